//! Cross-modal mutual queries between title tokens and visual features.
//!
//! Language-query-vision turns each title token into a spatial response
//! map: F_M[h,w,t] = ⟨projected visual feature, projected token⟩, giving
//! an (H,W,T) stack. Vision-query-language then filters those responses:
//! a per-location softmax over valid tokens, a linear map from the token
//! axis onto the visual width, and a hadamard gate against the projected
//! visual query, yielding F_A with exactly the stage's feature shape.
//!
//! The token-axis projection starts at zero, so an untrained model is
//! exactly the vision-only model.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MqError, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FusionConfig {
    /// Title feature width C_L.
    pub c_l: usize,
    /// Token capacity; runtime titles may be shorter.
    pub t_cap: usize,
    /// Exclude PAD positions from the token softmax (default on).
    pub pad_mask: bool,
    /// Optional 1/√C_L temper on the response maps (default off, matching
    /// the raw dot product).
    pub attn_scale: bool,
}

/// Per-stage projections; output widths differ per stage so instances are
/// stage-local.
#[derive(Clone, Debug)]
pub struct MutualQueryStage {
    pub c_v: usize,
    cfg: FusionConfig,
    f_l_query: Linear,
    f_v_key: Linear,
    f_v_query: Linear,
    /// (T_cap, C_V); rows 0..T_run are used for shorter titles.
    pub f_mk_w: usize,
    pub f_mk_b: usize,
}

impl MutualQueryStage {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: FusionConfig,
        c_v: usize,
    ) -> Self {
        let lin = Init::FanIn { fan_in: cfg.c_l, gain: 1.0 };
        let f_l_query = Linear::new(store, rng, &format!("{name}.f_l_query"), cfg.c_l, cfg.c_l, lin);
        let f_v_key = Linear::new(
            store,
            rng,
            &format!("{name}.f_v_key"),
            c_v,
            cfg.c_l,
            Init::FanIn { fan_in: c_v, gain: 1.0 },
        );
        let f_v_query = Linear::new(
            store,
            rng,
            &format!("{name}.f_v_query"),
            c_v,
            c_v,
            Init::FanIn { fan_in: c_v, gain: 1.0 },
        );
        let f_mk_w = store.alloc(format!("{name}.f_mk.w"), Tensor::zeros(&[cfg.t_cap, c_v]));
        let f_mk_b = store.alloc(format!("{name}.f_mk.b"), Tensor::zeros(&[c_v]));
        MutualQueryStage {
            c_v,
            cfg,
            f_l_query,
            f_v_key,
            f_v_query,
            f_mk_w,
            f_mk_b,
        }
    }

    /// Token-axis linear map using the first T_run weight rows.
    fn f_mk<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        t_run: usize,
    ) -> Result<Var> {
        if t_run > self.cfg.t_cap {
            return Err(MqError::InvalidDimension {
                op: "f_mk",
                detail: format!("title length {t_run} exceeds capacity {}", self.cfg.t_cap),
            });
        }
        let w_full = tape.param(self.f_mk_w, store.get(self.f_mk_w));
        let w = if t_run == self.cfg.t_cap {
            w_full
        } else {
            tape.gather_rows(w_full, (0..t_run).collect())?
        };
        let b = tape.param(self.f_mk_b, store.get(self.f_mk_b));
        let shape = tape.value(x).shape().to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, t_run])?;
        let mm = tape.matmul(flat, w)?;
        let biased = tape.bias_add(mm, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.c_v;
        tape.reshape(biased, &out_shape)
    }

    /// Response of every title token over the image plane:
    /// (H,W,C_V) × (T,C_L) → F_M (H,W,T).
    pub fn language_query_vision<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        f: Var,
        l: Var,
        valid: &[bool],
    ) -> Result<Var> {
        let lshape = tape.value(l).shape().to_vec();
        if lshape.len() != 2 || lshape[1] != self.cfg.c_l {
            return Err(MqError::InvalidDimension {
                op: "language_query_vision",
                detail: format!("expected (T,{}), got {lshape:?}", self.cfg.c_l),
            });
        }
        if valid.len() != lshape[0] {
            return Err(MqError::ShapeMismatch {
                op: "language_query_vision",
                left: lshape,
                right: vec![valid.len()],
            });
        }
        let fshape = tape.value(f).shape().to_vec();
        let (h, w) = (fshape[0], fshape[1]);
        let l_query = self.f_l_query.forward(tape, store, l)?;
        let v_key = self.f_v_key.forward(tape, store, f)?;
        let v_key_flat = tape.reshape(v_key, &[h * w, self.cfg.c_l])?;
        let mut resp = tape.matmul_nt(v_key_flat, l_query)?;
        if self.cfg.attn_scale {
            resp = tape.scale(resp, 1.0 / (self.cfg.c_l as f64).sqrt())?;
        }
        tape.reshape(resp, &[h, w, lshape[0]])
    }

    /// Filters token responses through the visual query gate:
    /// F_A = f_V_query(F) ⊗ f_MK(softmax_T(F_M)).
    ///
    /// With pad masking on, the softmax runs over valid tokens only; an
    /// all-PAD title yields F_A = 0.
    pub fn vision_query_language<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        f: Var,
        f_m: Var,
        valid: &[bool],
    ) -> Result<Var> {
        let fshape = tape.value(f).shape().to_vec();
        let t_run = *tape.value(f_m).shape().last().unwrap();
        if valid.len() != t_run {
            return Err(MqError::ShapeMismatch {
                op: "vision_query_language",
                left: vec![t_run],
                right: vec![valid.len()],
            });
        }
        if self.cfg.pad_mask && valid.iter().all(|&v| !v) {
            return Ok(tape.constant(Tensor::zeros(&fshape)));
        }
        let v_query = self.f_v_query.forward(tape, store, f)?;
        let sm = if self.cfg.pad_mask {
            tape.masked_softmax_last(f_m, valid.to_vec())?
        } else {
            let rank = tape.value(f_m).rank();
            tape.softmax(f_m, rank - 1)?
        };
        let mk = self.f_mk(tape, store, sm, t_run)?;
        tape.hadamard(v_query, mk)
    }

    /// The ablation path that bypasses the filter: F_A := f_MK(F_M) with
    /// neither the softmax nor the visual gate.
    pub fn project_raw<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        f_m: Var,
    ) -> Result<Var> {
        let t_run = *tape.value(f_m).shape().last().unwrap();
        self.f_mk(tape, store, f_m, t_run)
    }

    /// Both queries composed; returns (F_A, F_M) so the response maps stay
    /// available for diagnostics.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        f: Var,
        l: Var,
        valid: &[bool],
    ) -> Result<(Var, Var)> {
        let f_m = self.language_query_vision(tape, store, f, l, valid)?;
        let f_a = self.vision_query_language(tape, store, f, f_m, valid)?;
        Ok((f_a, f_m))
    }
}
