//! Small transformer encoder producing per-token title features.
//!
//! Self-attention is restricted to valid (non-PAD) key positions, which
//! makes features at valid positions exactly invariant to the length
//! and content of the PAD tail.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MqError, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::text::TokenSequence;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Sequence capacity; runtime sequences may be shorter.
    pub t_cap: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(MqError::Config(format!(
                "text dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.t_cap == 0 || self.layers == 0 {
            return Err(MqError::Config("degenerate text encoder config".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
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
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    embed: usize,
    pos: usize,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
}

impl TextEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: TextEncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let embed_init = Init::FanIn { fan_in: c, gain: 1.0 };
        let embed = store.alloc(
            format!("{name}.embed"),
            crate::nn::init_tensor(&[cfg.vocab_size, c], embed_init, rng),
        );
        let pos = store.alloc(
            format!("{name}.pos"),
            crate::nn::init_tensor(&[cfg.t_cap, c], embed_init, rng),
        );
        let lin = Init::FanIn { fan_in: c, gain: 1.0 };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.layer{l}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), c),
                wq: Linear::new(store, rng, &format!("{p}.wq"), c, c, lin),
                wk: Linear::new(store, rng, &format!("{p}.wk"), c, c, lin),
                wv: Linear::new(store, rng, &format!("{p}.wv"), c, c, lin),
                wo: Linear::new(store, rng, &format!("{p}.wo"), c, c, lin),
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), c),
                fc1: Linear::new(store, rng, &format!("{p}.fc1"), c, c * cfg.mlp_ratio, lin),
                fc2: Linear::new(
                    store,
                    rng,
                    &format!("{p}.fc2"),
                    c * cfg.mlp_ratio,
                    c,
                    Init::FanIn { fan_in: c * cfg.mlp_ratio, gain: 2.0 },
                ),
            });
        }
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), c);
        Ok(TextEncoder {
            cfg,
            embed,
            pos,
            layers,
            ln_out,
        })
    }

    /// Encodes a sequence of length T_run ≤ capacity into (T_run, dim).
    /// PAD positions produce rows too; downstream consumers mask them.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        seq: &TokenSequence,
    ) -> Result<Var> {
        let t_run = seq.len();
        if t_run == 0 || t_run > self.cfg.t_cap {
            return Err(MqError::InvalidDimension {
                op: "encode_text",
                detail: format!("sequence length {t_run} outside 1..={}", self.cfg.t_cap),
            });
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let embed = tape.param(self.embed, store.get(self.embed));
        let tok = tape.gather_rows(embed, ids)?;
        let pos = tape.param(self.pos, store.get(self.pos));
        let pos_rows = tape.gather_rows(pos, (0..t_run).collect())?;
        let mut x = tape.add(tok, pos_rows)?;
        let heads = self.cfg.heads;
        let d = self.cfg.dim / heads;
        let scale = 1.0 / (d as f64).sqrt();
        for layer in &self.layers {
            let normed = layer.ln1.forward(tape, store, x)?;
            let q = layer.wq.forward(tape, store, normed)?;
            let k = layer.wk.forward(tape, store, normed)?;
            let v = layer.wv.forward(tape, store, normed)?;
            let mut ctx_heads = Vec::with_capacity(heads);
            for h in 0..heads {
                let (s, e) = (h * d, (h + 1) * d);
                let qh = tape.slice_last(q, s, e)?;
                let kh = tape.slice_last(k, s, e)?;
                let vh = tape.slice_last(v, s, e)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, scale)?;
                let attn = tape.masked_softmax_last(scaled, seq.valid.clone())?;
                ctx_heads.push(tape.matmul(attn, vh)?);
            }
            let ctx = if heads == 1 {
                ctx_heads[0]
            } else {
                tape.concat_last(&ctx_heads)?
            };
            let proj = layer.wo.forward(tape, store, ctx)?;
            x = tape.add(x, proj)?;
            let normed2 = layer.ln2.forward(tape, store, x)?;
            let h1 = layer.fc1.forward(tape, store, normed2)?;
            let act = tape.relu(h1)?;
            let h2 = layer.fc2.forward(tape, store, act)?;
            x = tape.add(x, h2)?;
        }
        self.ln_out.forward(tape, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::text::{tokenize, Vocab};
    use rand::SeedableRng;

    fn setup() -> (ParamStore<f64>, TextEncoder, Vocab) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = Vocab::builtin();
        let cfg = TextEncoderConfig {
            vocab_size: vocab.len(),
            t_cap: 16,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        let enc = TextEncoder::new(&mut store, &mut rng, "text", cfg).unwrap();
        (store, enc, vocab)
    }

    fn encode(store: &ParamStore<f64>, enc: &TextEncoder, seq: &TokenSequence) -> Tensor<f64> {
        let mut tape = Tape::inference();
        let out = enc.forward(&mut tape, store, seq).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn output_shape_is_t_by_dim() {
        let (store, enc, vocab) = setup();
        let seq = tokenize("red disc", &vocab, 12);
        let out = encode(&store, &enc, &seq);
        assert_eq!(out.shape(), &[12, 8]);
    }

    #[test]
    fn valid_positions_invariant_to_pad_tail_length() {
        let (store, enc, vocab) = setup();
        let short = tokenize("red disc", &vocab, 9);
        let long = tokenize("red disc", &vocab, 14);
        let a = encode(&store, &enc, &short);
        let b = encode(&store, &enc, &long);
        let c = enc.cfg.dim;
        for p in 0..short.valid_count() {
            assert_eq!(
                &a.data()[p * c..(p + 1) * c],
                &b.data()[p * c..(p + 1) * c],
                "row {p} differs under a longer PAD tail"
            );
        }
    }

    #[test]
    fn encoder_is_position_aware() {
        let (store, enc, vocab) = setup();
        let ab = tokenize("ab", &vocab, 8);
        let ba = tokenize("ba", &vocab, 8);
        let ea = encode(&store, &enc, &ab);
        let eb = encode(&store, &enc, &ba);
        assert!(
            ea.max_abs_diff(&eb) > 1e-9,
            "permuting tokens should change the encoding"
        );
    }

    #[test]
    fn rejects_over_capacity_sequences() {
        let (store, enc, vocab) = setup();
        let seq = tokenize("abcdefghij abcdefghij", &vocab, 20);
        let mut tape = Tape::<f64>::inference();
        assert!(enc.forward(&mut tape, &store, &seq).is_err());
    }
}
