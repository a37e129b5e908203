//! Four-stage hierarchical windowed-attention encoder.
//!
//! Stage blocks alternate plain window attention (W-MSA) with the
//! cyclically shifted variant (SW-MSA); between stages a 2×2 patch merge
//! halves the spatial extent and doubles the channel width. Stage i
//! output can take an additive injection before merging, which is where
//! the cross-modal features enter.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MqError, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub stage_dims: [usize; 4],
    pub blocks_per_stage: usize,
    pub window: usize,
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    /// Spatial extent of stage i (0-based); halves per stage.
    pub fn stage_extent(&self, i: usize) -> usize {
        self.input_size / self.patch_size / (1 << i)
    }

    pub fn validate(&self) -> Result<()> {
        let div = self.patch_size * 8;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(MqError::Config(format!(
                "input size {} must be divisible by patch_size·8 = {div}",
                self.input_size
            )));
        }
        for i in 0..4 {
            let e = self.stage_extent(i);
            if self.window == 0 || e % self.window != 0 {
                return Err(MqError::Config(format!(
                    "window {} does not divide stage {} extent {e}",
                    self.window,
                    i + 1
                )));
            }
            if self.stage_dims[i] % self.heads[i] != 0 {
                return Err(MqError::Config(format!(
                    "stage {} dim {} not divisible by {} heads",
                    i + 1,
                    self.stage_dims[i],
                    self.heads[i]
                )));
            }
        }
        if self.stage_dims[1] != 2 * self.stage_dims[0]
            || self.stage_dims[2] != 2 * self.stage_dims[1]
            || self.stage_dims[3] != 2 * self.stage_dims[2]
        {
            return Err(MqError::Config(format!(
                "stage dims must double: {:?}",
                self.stage_dims
            )));
        }
        Ok(())
    }
}

/// Per-stage feature maps F¹..F⁴ as host tensors.
pub struct StageFeatures<S: Scalar> {
    pub maps: [Tensor<S>; 4],
}

#[derive(Clone, Debug)]
struct WindowBlock {
    shifted: bool,
    heads: usize,
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch_proj: Linear,
    pos: usize,
    stages: Vec<Vec<WindowBlock>>,
    merges: Vec<Linear>,
}

/// Region labels for the shifted-window attention mask. Tokens wrapped
/// around by the cyclic shift receive different labels from the tokens
/// they now neighbour, and attention is confined to equal labels.
fn shift_region_ids(h: usize, w: usize, win: usize, shift: usize) -> Vec<u8> {
    let mut ids = vec![0u8; h * w];
    let bands = |len: usize| {
        [
            0..len.saturating_sub(win),
            len.saturating_sub(win)..len.saturating_sub(shift),
            len.saturating_sub(shift)..len,
        ]
    };
    let mut label = 0u8;
    for hr in bands(h) {
        for wr in bands(w) {
            for i in hr.clone() {
                for j in wr.clone() {
                    ids[i * w + j] = label;
                }
            }
            label += 1;
        }
    }
    ids
}

/// Boolean attention mask per shifted window: (nW, win², win²) flattened.
fn shifted_window_mask(h: usize, w: usize, win: usize, shift: usize) -> Vec<bool> {
    let ids = shift_region_ids(h, w, win, shift);
    // shift the label grid exactly like the features, then window it
    let (gh, gw) = (h / win, w / win);
    let shifted_at = |i: usize, j: usize| -> u8 {
        let si = (i + shift) % h;
        let sj = (j + shift) % w;
        ids[si * w + sj]
    };
    let n_tok = win * win;
    let mut mask = vec![false; gh * gw * n_tok * n_tok];
    for wi in 0..gh {
        for wj in 0..gw {
            let base = (wi * gw + wj) * n_tok * n_tok;
            for a in 0..n_tok {
                let (ia, ja) = (wi * win + a / win, wj * win + a % win);
                let la = shifted_at(ia, ja);
                for b in 0..n_tok {
                    let (ib, jb) = (wi * win + b / win, wj * win + b % win);
                    mask[base + a * n_tok + b] = la == shifted_at(ib, jb);
                }
            }
        }
    }
    mask
}

impl Backbone {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let c1 = cfg.stage_dims[0];
        let patch_proj = Linear::new(
            store,
            rng,
            &format!("{name}.patch"),
            p * p * 3,
            c1,
            Init::FanIn { fan_in: p * p * 3, gain: 1.0 },
        );
        let grid = cfg.input_size / p;
        let pos = store.alloc(
            format!("{name}.pos"),
            crate::nn::init_tensor(&[grid * grid, c1], Init::FanIn { fan_in: c1, gain: 1.0 }, rng),
        );
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let c = cfg.stage_dims[s];
            let lin = Init::FanIn { fan_in: c, gain: 1.0 };
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let pfx = format!("{name}.stage{s}.block{b}");
                blocks.push(WindowBlock {
                    shifted: b % 2 == 1,
                    heads: cfg.heads[s],
                    ln1: LayerNorm::new(store, &format!("{pfx}.ln1"), c),
                    wq: Linear::new(store, rng, &format!("{pfx}.wq"), c, c, lin),
                    wk: Linear::new(store, rng, &format!("{pfx}.wk"), c, c, lin),
                    wv: Linear::new(store, rng, &format!("{pfx}.wv"), c, c, lin),
                    wo: Linear::new(store, rng, &format!("{pfx}.wo"), c, c, lin),
                    ln2: LayerNorm::new(store, &format!("{pfx}.ln2"), c),
                    fc1: Linear::new(store, rng, &format!("{pfx}.fc1"), c, c * cfg.mlp_ratio, lin),
                    fc2: Linear::new(
                        store,
                        rng,
                        &format!("{pfx}.fc2"),
                        c * cfg.mlp_ratio,
                        c,
                        Init::FanIn { fan_in: c * cfg.mlp_ratio, gain: 2.0 },
                    ),
                });
            }
            stages.push(blocks);
        }
        let mut merges = Vec::with_capacity(3);
        for s in 0..3 {
            let c = cfg.stage_dims[s];
            merges.push(Linear::new_no_bias(
                store,
                rng,
                &format!("{name}.merge{s}"),
                4 * c,
                2 * c,
                Init::FanIn { fan_in: 4 * c, gain: 1.0 },
            ));
        }
        Ok(Backbone {
            cfg,
            patch_proj,
            pos,
            stages,
            merges,
        })
    }

    /// Non-overlapping p×p patches, linearly projected: (H,W,3) → (H/p, W/p, C¹).
    pub fn patch_embed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        image: Var,
    ) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(MqError::InvalidDimension {
                op: "patch_embed",
                detail: format!("expected (H,W,3), got {shape:?}"),
            });
        }
        let patches = tape.patchify(image, self.cfg.patch_size)?;
        self.patch_proj.forward(tape, store, patches)
    }

    /// Adds the learned absolute position embedding (stage-1 input prep).
    pub fn add_position<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (gh, gw, c) = (shape[0], shape[1], shape[2]);
        let pos = tape.param(self.pos, store.get(self.pos));
        let pos_grid = tape.reshape(pos, &[gh, gw, c])?;
        tape.add(x, pos_grid)
    }

    fn attention_block<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        block: &WindowBlock,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let win = self.cfg.window;
        if h % win != 0 || w % win != 0 {
            return Err(MqError::InvalidDimension {
                op: "window_attention",
                detail: format!("window {win} does not divide {h}x{w}"),
            });
        }
        let shift = if block.shifted { win / 2 } else { 0 };
        let normed = block.ln1.forward(tape, store, x)?;
        let moved = if shift > 0 {
            tape.roll2d(normed, -(shift as isize), -(shift as isize))?
        } else {
            normed
        };
        let windows = tape.window_partition(moved, win)?;
        let q = block.wq.forward(tape, store, windows)?;
        let k = block.wk.forward(tape, store, windows)?;
        let v = block.wv.forward(tape, store, windows)?;
        let d = c / block.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mask = if shift > 0 {
            Some(shifted_window_mask(h, w, win, shift))
        } else {
            None
        };
        let mut ctx_heads = Vec::with_capacity(block.heads);
        for hd in 0..block.heads {
            let (s, e) = (hd * d, (hd + 1) * d);
            let qh = tape.slice_last(q, s, e)?;
            let kh = tape.slice_last(k, s, e)?;
            let vh = tape.slice_last(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale)?;
            let attn = match &mask {
                Some(m) => tape.masked_softmax_last(scaled, m.clone())?,
                None => {
                    let rank = tape.value(scaled).rank();
                    tape.softmax(scaled, rank - 1)?
                }
            };
            ctx_heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = if block.heads == 1 {
            ctx_heads[0]
        } else {
            tape.concat_last(&ctx_heads)?
        };
        let proj = block.wo.forward(tape, store, ctx)?;
        let restored = tape.window_reverse(proj, win, h, w)?;
        let unmoved = if shift > 0 {
            tape.roll2d(restored, shift as isize, shift as isize)?
        } else {
            restored
        };
        let x = tape.add(x, unmoved)?;
        let normed2 = block.ln2.forward(tape, store, x)?;
        let h1 = block.fc1.forward(tape, store, normed2)?;
        let act = tape.relu(h1)?;
        let h2 = block.fc2.forward(tape, store, act)?;
        tape.add(x, h2)
    }

    /// Runs the blocks of stage `i` (0-based) over the stage input.
    pub fn run_stage<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        i: usize,
        mut x: Var,
    ) -> Result<Var> {
        for block in &self.stages[i] {
            x = self.attention_block(tape, store, block, x)?;
        }
        Ok(x)
    }

    /// 2×2 concat + linear: halves the extent, doubles the channels.
    pub fn patch_merge<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        i: usize,
        x: Var,
    ) -> Result<Var> {
        let merged = tape.patchify(x, 2)?;
        self.merges[i].forward(tape, store, merged)
    }

    /// Full four-stage pass. `injected`, when given for stage i, is added
    /// to F^i before the merge into stage i+1 (shape must match F^i).
    /// Returns the raw per-stage outputs F^i.
    pub fn forward_stages<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        image: Var,
        injected: &[Option<Tensor<S>>; 4],
    ) -> Result<[Var; 4]> {
        let embedded = self.patch_embed(tape, store, image)?;
        let mut x = self.add_position(tape, store, embedded)?;
        let mut feats = Vec::with_capacity(4);
        for i in 0..4 {
            let f = self.run_stage(tape, store, i, x)?;
            feats.push(f);
            let fused = match &injected[i] {
                Some(t) => {
                    if t.shape() != tape.value(f).shape() {
                        return Err(MqError::ShapeMismatch {
                            op: "inject",
                            left: tape.value(f).shape().to_vec(),
                            right: t.shape().to_vec(),
                        });
                    }
                    let inj = tape.constant(t.clone());
                    tape.add(f, inj)?
                }
                None => f,
            };
            if i < 3 {
                x = self.patch_merge(tape, store, i, fused)?;
            }
        }
        Ok([feats[0], feats[1], feats[2], feats[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_cfg(input: usize, patch: usize, window: usize) -> BackboneConfig {
        BackboneConfig {
            input_size: input,
            patch_size: patch,
            stage_dims: [8, 16, 32, 64],
            blocks_per_stage: 2,
            window,
            heads: [2, 2, 2, 2],
            mlp_ratio: 2,
        }
    }

    fn build(cfg: BackboneConfig) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bb = Backbone::new(&mut store, &mut rng, "backbone", cfg).unwrap();
        (store, bb)
    }

    fn rand_image(size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(&[size, size, 3], data).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_windows() {
        assert!(tiny_cfg(32, 2, 2).validate().is_ok());
        // extents 8,4,2,1 → window 2 does not divide 1
        assert!(tiny_cfg(16, 2, 2).validate().is_err());
        assert!(tiny_cfg(16, 2, 1).validate().is_ok());
        assert!(tiny_cfg(30, 2, 1).validate().is_err()); // not divisible by 16
    }

    #[test]
    fn patch_embed_shape_and_grid() {
        let (store, bb) = build(tiny_cfg(64, 4, 2));
        let mut tape = Tape::inference();
        let img = tape.leaf(rand_image(64, 1));
        let e = bb.patch_embed(&mut tape, &store, img).unwrap();
        assert_eq!(tape.value(e).shape(), &[16, 16, 8]);
    }

    #[test]
    fn constant_image_embeds_spatially_constant() {
        let (store, bb) = build(tiny_cfg(32, 2, 2));
        let mut tape = Tape::inference();
        let img = tape.leaf(Tensor::full(&[32, 32, 3], 0.4));
        let e = bb.patch_embed(&mut tape, &store, img).unwrap();
        let v = tape.value(e);
        let c = v.shape()[2];
        let first = &v.data()[..c];
        for row in v.data().chunks(c) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn large_grid_arithmetic() {
        // 480×480 with patch 4 → 120×120 grid
        let cfg = BackboneConfig {
            input_size: 480,
            patch_size: 4,
            stage_dims: [8, 16, 32, 64],
            blocks_per_stage: 2,
            window: 5,
            heads: [2, 2, 2, 2],
            mlp_ratio: 2,
        };
        assert!(cfg.validate().is_ok());
        let (store, bb) = build(cfg);
        let mut tape = Tape::inference();
        let img = tape.leaf(Tensor::full(&[480, 480, 3], 0.1));
        let e = bb.patch_embed(&mut tape, &store, img).unwrap();
        assert_eq!(tape.value(e).shape(), &[120, 120, 8]);
    }

    #[test]
    fn forward_stage_shapes_on_desk_config() {
        let cfg = BackboneConfig {
            input_size: 64,
            patch_size: 4,
            stage_dims: [32, 64, 128, 256],
            blocks_per_stage: 2,
            window: 2,
            heads: [2, 2, 2, 2],
            mlp_ratio: 2,
        };
        let (store, bb) = build(cfg);
        let mut tape = Tape::inference();
        let img = tape.leaf(rand_image(64, 2));
        let feats = bb
            .forward_stages(&mut tape, &store, img, &[None, None, None, None])
            .unwrap();
        let expected: [&[usize]; 4] = [&[16, 16, 32], &[8, 8, 64], &[4, 4, 128], &[2, 2, 256]];
        for (f, want) in feats.iter().zip(expected.iter()) {
            assert_eq!(tape.value(*f).shape(), *want);
        }
    }

    #[test]
    fn zero_injection_is_identity() {
        let (store, bb) = build(tiny_cfg(32, 2, 2));
        let img = rand_image(32, 3);
        let mut t1 = Tape::inference();
        let i1 = t1.leaf(img.clone());
        let f1 = bb
            .forward_stages(&mut t1, &store, i1, &[None, None, None, None])
            .unwrap();
        let zeros: [Option<Tensor<f64>>; 4] = [
            Some(Tensor::zeros(&[16, 16, 8])),
            Some(Tensor::zeros(&[8, 8, 16])),
            Some(Tensor::zeros(&[4, 4, 32])),
            Some(Tensor::zeros(&[2, 2, 64])),
        ];
        let mut t2 = Tape::inference();
        let i2 = t2.leaf(img);
        let f2 = bb.forward_stages(&mut t2, &store, i2, &zeros).unwrap();
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert!(t1.value(*a).bit_eq(t2.value(*b)));
        }
    }

    #[test]
    fn injected_shape_mismatch_is_rejected() {
        let (store, bb) = build(tiny_cfg(32, 2, 2));
        let mut tape = Tape::inference();
        let img = tape.leaf(rand_image(32, 4));
        let bad: [Option<Tensor<f64>>; 4] = [Some(Tensor::zeros(&[4, 4, 8])), None, None, None];
        assert!(bb.forward_stages(&mut tape, &store, img, &bad).is_err());
    }

    #[test]
    fn unshifted_blocks_keep_windows_independent() {
        let (store, bb) = build(tiny_cfg(32, 2, 2));
        // stage-1 geometry: 16×16 grid, 2×2 windows
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base_data: Vec<f64> = (0..16 * 16 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = Tensor::new(&[16, 16, 8], base_data).unwrap();
        let mut poked = base.clone();
        poked.data_mut()[0] += 0.5; // inside window (0,0)
        let block = &bb.stages[0][0];
        assert!(!block.shifted);
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::inference();
            let v = tape.leaf(x.clone());
            let out = bb.attention_block(&mut tape, &store, block, v).unwrap();
            tape.value(out).clone()
        };
        let (a, b) = (run(&base), run(&poked));
        let c = 8;
        let mut changed_outside = 0;
        for i in 0..16 {
            for j in 0..16 {
                let inside = i < 2 && j < 2;
                let off = (i * 16 + j) * c;
                let diff = (0..c).any(|k| a.data()[off + k] != b.data()[off + k]);
                if !inside && diff {
                    changed_outside += 1;
                }
            }
        }
        assert_eq!(changed_outside, 0, "information leaked across windows");
    }

    #[test]
    fn shifted_block_respects_seam_mask() {
        let (store, bb) = build(tiny_cfg(32, 2, 2));
        let block = &bb.stages[0][1];
        assert!(block.shifted);
        // independent reimplementation of the region labels
        let (h, w, win, shift) = (16usize, 16usize, 2usize, 1usize);
        let region = |i: usize, j: usize| -> (u8, u8) {
            let band = |v: usize, len: usize| -> u8 {
                if v < len - win {
                    0
                } else if v < len - shift {
                    1
                } else {
                    2
                }
            };
            (band(i, h), band(j, w))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base_data: Vec<f64> = (0..h * w * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = Tensor::new(&[h, w, 8], base_data).unwrap();
        // poke the wrap-around corner token (h-1, w-1)
        let mut poked = base.clone();
        poked.data_mut()[((h - 1) * w + (w - 1)) * 8 + 3] += 0.5;
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::inference();
            let v = tape.leaf(x.clone());
            let out = bb.attention_block(&mut tape, &store, block, v).unwrap();
            tape.value(out).clone()
        };
        let (a, b) = (run(&base), run(&poked));
        let poked_region = region(h - 1, w - 1);
        for i in 0..h {
            for j in 0..w {
                if region(i, j) != poked_region {
                    let off = (i * w + j) * 8;
                    for k in 0..8 {
                        assert_eq!(
                            a.data()[off + k],
                            b.data()[off + k],
                            "token ({i},{j}) saw across the wrap seam"
                        );
                    }
                }
            }
        }
        // sanity: some same-region neighbour does change
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn shift_partition_round_trip_is_identity() {
        use crate::tensor::ops;
        let x = rand_image(8, 7); // any (H,W,C) content
        let shifted = ops::roll2d(&x, -1, -1).unwrap();
        let win = ops::window_partition(&shifted, 2).unwrap();
        let back = ops::window_reverse(&win, 2, 8, 8).unwrap();
        let restored = ops::roll2d(&back, 1, 1).unwrap();
        assert!(restored.bit_eq(&x));
    }

    #[test]
    fn end_to_end_gradient_to_input() {
        // 16×16 input, patch 2 → extents 8,4,2,1, window 1
        let (store, bb) = build(tiny_cfg(16, 2, 1));
        let img = rand_image(16, 8);
        let rel = crate::tensor::gradcheck::grad_check(
            |tape, v| {
                let feats = bb.forward_stages(tape, &store, v, &[None, None, None, None])?;
                let sums = [
                    tape.mean_all(feats[0])?,
                    tape.mean_all(feats[3])?,
                ];
                let both = tape.add(sums[0], sums[1])?;
                Ok(both)
            },
            &img,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn shifted_attention_gradient_via_params() {
        // windowed path with real shifts: 32×32 input, w=2; check d/dparam
        let (store, bb) = build(tiny_cfg(32, 2, 2));
        let img = rand_image(32, 9);
        let wq_id = bb.stages[1][1].wq.w;
        let rel = crate::nn::grad_check_param(
            |tape, s| {
                let v = tape.leaf(img.clone());
                let feats = bb.forward_stages(tape, s, v, &[None, None, None, None])?;
                tape.mean_all(feats[3])
            },
            &store,
            wq_id,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "rel {rel}");
    }
}
