//! Central-difference verification of backward rules.

use crate::error::{MqError, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the taped gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// Returns the max over coordinates of |analytic − numeric| / max(1, |numeric|).
/// Runs in f64; `f` must map its input to a scalar.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().requires_grad());
    let out = f(&mut tape, x)?;
    if tape.value(out).numel() != 1 {
        return Err(MqError::InvalidDimension {
            op: "grad_check",
            detail: format!(
                "function output must be scalar, got {:?}",
                tape.value(out).shape()
            ),
        });
    }
    tape.backward(out)?;
    let analytic = match tape.grad(x) {
        Some(g) => g.clone(),
        None => Tensor::zeros(point.shape()),
    };

    let eval = |pt: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(pt.clone());
        let o = f(&mut t, v)?;
        t.value(o).item()
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
