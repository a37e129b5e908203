//! Full segmentation model: text encoder + windowed visual backbone +
//! per-stage mutual queries + a four-stage upsampling decoder.
//!
//! Stage wiring: F_A^i is computed from stage output F^i, the sum
//! F_VA^i = F^i ⊕ F_A^i feeds the next stage's patch merge, and F_VA^4
//! seeds the decoder. Decode stage j consumes F_A^{5−j}, so the deepest
//! fusion features come first and the shallowest last. The first three
//! decode stages upsample ×2; the final stage upsamples by the patch
//! size to land exactly on (H, W, 2).

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{MqError, Result};
use crate::fusion::{FusionConfig, MutualQueryStage};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::optim::AdamW;
use crate::tensor::ops::UpsampleMode;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::text::encoder::{TextEncoder, TextEncoderConfig};
use crate::text::TokenSequence;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub text: TextEncoderConfig,
    pub fusion: FusionConfig,
    /// Language-query-vision on/off; off means a pure-vision model whose
    /// output cannot depend on the title.
    pub use_lqv: bool,
    /// Vision-query-language filter on/off; off substitutes the raw
    /// token-projected response maps for F_A.
    pub use_vql: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.text.validate()?;
        if self.fusion.t_cap != self.text.t_cap {
            return Err(MqError::Config(format!(
                "fusion token capacity {} != text capacity {}",
                self.fusion.t_cap, self.text.t_cap
            )));
        }
        if self.fusion.c_l != self.text.dim {
            return Err(MqError::Config(format!(
                "fusion C_L {} != text dim {}",
                self.fusion.c_l, self.text.dim
            )));
        }
        Ok(())
    }
}

struct DecodeStage {
    conv: Conv2d,
    factor: usize,
    relu: bool,
}

pub struct SegModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub text: TextEncoder,
    pub stages: Vec<MutualQueryStage>,
    decoder: Vec<DecodeStage>,
}

/// Forward products: final logits plus the per-stage token response maps
/// (present when the language query ran).
pub struct Forwarded {
    pub logits: Var,
    pub response_maps: [Option<Var>; 4],
}

impl SegModel {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, rng, "backbone", cfg.backbone.clone())?;
        let text = TextEncoder::new(store, rng, "text", cfg.text)?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            stages.push(MutualQueryStage::new(
                store,
                rng,
                &format!("fusion.stage{i}"),
                cfg.fusion,
                cfg.backbone.stage_dims[i],
            ));
        }
        let dims = cfg.backbone.stage_dims;
        let mut decoder = Vec::with_capacity(4);
        for j in 1..=4usize {
            let skip = dims[4 - j];
            let c_in = if j == 1 { 2 * dims[3] } else { dims[5 - j] + skip };
            let (c_out, relu, init) = if j == 4 {
                (2, false, Init::Zero)
            } else {
                (dims[4 - j], true, Init::FanIn { fan_in: 9 * c_in, gain: 2.0 })
            };
            let factor = if j == 4 { cfg.backbone.patch_size } else { 2 };
            decoder.push(DecodeStage {
                conv: Conv2d::new(store, rng, &format!("decoder.stage{j}"), 3, c_in, c_out, init),
                factor,
                relu,
            });
        }
        Ok(SegModel {
            cfg,
            backbone,
            text,
            stages,
            decoder,
        })
    }

    /// Element-wise Eq.-10 injection; shapes must match exactly.
    pub fn inject<S: Scalar>(tape: &mut Tape<S>, f: Var, f_a: Var) -> Result<Var> {
        if tape.value(f).shape() != tape.value(f_a).shape() {
            return Err(MqError::ShapeMismatch {
                op: "inject",
                left: tape.value(f).shape().to_vec(),
                right: tape.value(f_a).shape().to_vec(),
            });
        }
        tape.add(f, f_a)
    }

    /// One decode step: concat on channels, upsample, convolve.
    fn decode_stage<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        j: usize,
        m_prev: Var,
        skip: Var,
    ) -> Result<Var> {
        let (a, b) = (tape.value(m_prev).shape(), tape.value(skip).shape());
        if a[..2] != b[..2] {
            return Err(MqError::ShapeMismatch {
                op: "decode_stage",
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
        let stage = &self.decoder[j - 1];
        let cat = tape.concat_last(&[m_prev, skip])?;
        let up = tape.upsample(cat, UpsampleMode::Bilinear, stage.factor)?;
        let conv = stage.conv.forward(tape, store, up)?;
        if stage.relu {
            tape.relu(conv)
        } else {
            Ok(conv)
        }
    }

    /// Full forward to (H,W,2) logits.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        image: Var,
        seq: &TokenSequence,
    ) -> Result<Forwarded> {
        let ishape = tape.value(image).shape().to_vec();
        if ishape.len() != 3
            || ishape[2] != 3
            || ishape[0] != self.cfg.backbone.input_size
            || ishape[1] != self.cfg.backbone.input_size
        {
            return Err(MqError::InvalidDimension {
                op: "forward",
                detail: format!(
                    "expected ({0},{0},3) image, got {ishape:?}",
                    self.cfg.backbone.input_size
                ),
            });
        }
        let lang = if self.cfg.use_lqv {
            Some(self.text.forward(tape, store, seq)?)
        } else {
            None
        };

        let embedded = self.backbone.patch_embed(tape, store, image)?;
        let mut x = self.backbone.add_position(tape, store, embedded)?;
        let mut skips: Vec<Var> = Vec::with_capacity(4);
        let mut response_maps: [Option<Var>; 4] = [None, None, None, None];
        let mut m0 = None;
        for i in 0..4 {
            let f = self.backbone.run_stage(tape, store, i, x)?;
            let f_a = match lang {
                Some(l) => {
                    let mq = &self.stages[i];
                    let f_m = mq.language_query_vision(tape, store, f, l, &seq.valid)?;
                    response_maps[i] = Some(f_m);
                    Some(if self.cfg.use_vql {
                        mq.vision_query_language(tape, store, f, f_m, &seq.valid)?
                    } else {
                        mq.project_raw(tape, store, f_m)?
                    })
                }
                None => None,
            };
            let (f_va, skip) = match f_a {
                Some(fa) => (Self::inject(tape, f, fa)?, fa),
                None => {
                    let zeros = tape.constant(Tensor::zeros(tape.value(f).shape()));
                    (f, zeros)
                }
            };
            skips.push(skip);
            if i < 3 {
                x = self.backbone.patch_merge(tape, store, i, f_va)?;
            } else {
                m0 = Some(f_va);
            }
        }
        let mut m = m0.expect("stage 4 ran");
        for j in 1..=4 {
            m = self.decode_stage(tape, store, j, m, skips[4 - j])?;
        }
        Ok(Forwarded {
            logits: m,
            response_maps,
        })
    }

    /// Pixel-mean two-class cross entropy against a boolean mask.
    pub fn loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        logits: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let shape = tape.value(logits).shape().to_vec();
        if shape.len() != 3 || shape[2] != 2 {
            return Err(MqError::InvalidDimension {
                op: "cross_entropy_2class",
                detail: format!("expected (H,W,2) logits, got {shape:?}"),
            });
        }
        if mask.len() != shape[0] * shape[1] {
            return Err(MqError::ShapeMismatch {
                op: "cross_entropy_2class",
                left: shape,
                right: vec![mask.len()],
            });
        }
        let rows = tape.reshape(logits, &[mask.len(), 2])?;
        let targets: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
        tape.cross_entropy_rows(rows, targets)
    }

    /// Inference: argmax over the two logit channels.
    pub fn predict<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        image: &Tensor<S>,
        seq: &TokenSequence,
    ) -> Result<Vec<bool>> {
        let mut tape = Tape::inference();
        let img = tape.leaf(image.clone());
        let fwd = self.forward(&mut tape, store, img, seq)?;
        let logits = tape.value(fwd.logits);
        Ok(logits
            .data()
            .chunks(2)
            .map(|px| px[1] > px[0])
            .collect())
    }
}

/// One training example, precision-resolved.
pub struct TrainSample<S: Scalar> {
    pub image: Tensor<S>,
    pub mask: Vec<bool>,
    pub seq: TokenSequence,
}

/// Forward+backward over the batch (samples in parallel, gradients
/// reduced in sample order), then one optimizer step.
/// Returns the pre-step batch loss.
pub fn train_step<S: Scalar>(
    model: &SegModel,
    store: &mut ParamStore<S>,
    opt: &mut AdamW<S>,
    batch: &[TrainSample<S>],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(MqError::InvalidArgument("empty training batch".into()));
    }
    let per_sample: Vec<Result<(f64, std::collections::BTreeMap<usize, Tensor<S>>)>> = batch
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new();
            let img = tape.leaf(sample.image.clone());
            let fwd = model.forward(&mut tape, store, img, &sample.seq)?;
            let loss = model.loss(&mut tape, fwd.logits, &sample.mask)?;
            let loss_val = tape.value(loss).item()?.as_f64();
            tape.backward(loss)?;
            Ok((loss_val, tape.param_grads()))
        })
        .collect();

    let inv_b = S::from_f64(1.0 / batch.len() as f64);
    let mut total = std::collections::BTreeMap::<usize, Tensor<S>>::new();
    let mut loss_sum = 0.0;
    for r in per_sample {
        let (l, grads) = r?;
        loss_sum += l;
        for (id, g) in grads {
            match total.get_mut(&id) {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                        *a = *a + v * inv_b;
                    }
                }
                None => {
                    let mut scaled = g;
                    for v in scaled.data_mut() {
                        *v = *v * inv_b;
                    }
                    total.insert(id, scaled);
                }
            }
        }
    }
    let batch_loss = loss_sum / batch.len() as f64;
    if !batch_loss.is_finite() {
        return Err(MqError::NonFinite { op: "train_step" });
    }
    opt.apply(store, &total)?;
    Ok(batch_loss)
}
