//! Parameter store and small layer wrappers over the tape.
//!
//! Layers hold indices into a [`ParamStore`] rather than tensors, so the
//! same model definition works for either scalar precision and the
//! optimizer/checkpoint code can treat parameters uniformly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MqError, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Flat registry of named parameters. Allocation order is construction
/// order, which is deterministic for a given config.
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<S> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<S> {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Overwrites values by name; unknown or shape-incompatible names fail.
    /// A loaded tensor may have more leading rows than the target (sequence
    /// capacity params shrink gracefully), never fewer.
    pub fn load_named(&mut self, pairs: &[(String, Tensor<S>)]) -> Result<()> {
        for (name, t) in pairs {
            let Some(id) = self.names.iter().position(|n| n == name) else {
                return Err(MqError::Config(format!("unknown parameter {name}")));
            };
            if self.values[id].shape() != t.shape() {
                return Err(MqError::ShapeMismatch {
                    op: "load_named",
                    left: self.values[id].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            self.values[id] = t.clone();
        }
        Ok(())
    }
}

/// Weight initialization recipes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in ±sqrt(3·gain/fan_in); gain 2 for relu-fed layers.
    FanIn { fan_in: usize, gain: f64 },
    Zero,
}

pub fn init_tensor<S: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor<S> {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::FanIn { fan_in, gain } => {
            let bound = (3.0 * gain / fan_in.max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n)
                .map(|_| S::from_f64(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(shape, data).expect("init shape")
        }
    }
}

/// Dense map on the trailing axis: y = x·W (+ b).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let w = store.alloc(format!("{name}.w"), init_tensor(&[in_dim, out_dim], init, rng));
        let bias_init = match init {
            Init::Zero => Init::Zero,
            _ => Init::FanIn {
                fan_in: in_dim,
                gain: 0.1,
            },
        };
        let b = store.alloc(format!("{name}.b"), init_tensor(&[out_dim], bias_init, rng));
        Linear { w, b: Some(b) }
    }

    pub fn new_no_bias<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let w = store.alloc(format!("{name}.w"), init_tensor(&[in_dim, out_dim], init, rng));
        Linear { w, b: None }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(self.w, store.get(self.w));
        let b = self.b.map(|id| tape.param(id, store.get(id)));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.alloc(format!("{name}.gamma"), Tensor::full(&[dim], S::one()));
        let beta = store.alloc(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(self.gamma, store.get(self.gamma));
        let b = tape.param(self.beta, store.get(self.beta));
        tape.layernorm(x, g, b, self.eps)
    }
}

/// Same-padded square convolution (kernel k×k, odd k).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: usize,
    pub bias: Option<usize>,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        init: Init,
    ) -> Self {
        let kernel = store.alloc(
            format!("{name}.k"),
            init_tensor(&[k, k, c_in, c_out], init, rng),
        );
        let bias = store.alloc(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv2d {
            kernel,
            bias: Some(bias),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let k = tape.param(self.kernel, store.get(self.kernel));
        let b = self.bias.map(|id| tape.param(id, store.get(id)));
        tape.conv2d(x, k, b)
    }
}

/// Finite-difference check of the gradient with respect to one stored
/// parameter of a scalar-valued forward function. Runs in f64.
pub fn grad_check_param<F>(
    f: F,
    store: &ParamStore<f64>,
    param_id: usize,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if tape.value(out).numel() != 1 {
        return Err(MqError::InvalidDimension {
            op: "grad_check_param",
            detail: "forward must produce a scalar".into(),
        });
    }
    tape.backward(out)?;
    let analytic = tape
        .param_grads()
        .remove(&param_id)
        .unwrap_or_else(|| Tensor::zeros(store.get(param_id).shape()));

    let mut perturbed = ParamStore::new();
    for i in 0..store.len() {
        perturbed.alloc(store.name(i).to_string(), store.get(i).clone());
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let o = f(&mut t, s)?;
        t.value(o).item()
    };
    let mut max_rel: f64 = 0.0;
    for i in 0..store.get(param_id).numel() {
        let base = store.get(param_id).data()[i];
        perturbed.get_mut(param_id).data_mut()[i] = base + eps;
        let fp = eval(&perturbed)?;
        perturbed.get_mut(param_id).data_mut()[i] = base - eps;
        let fm = eval(&perturbed)?;
        perturbed.get_mut(param_id).data_mut()[i] = base;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_allocates_in_order() {
        let mut store = ParamStore::<f64>::new();
        let a = store.alloc("a", Tensor::zeros(&[2]));
        let b = store.alloc("b", Tensor::zeros(&[3]));
        assert_eq!((a, b), (0, 1));
        assert_eq!(store.name(1), "b");
        assert_eq!(store.total_scalars(), 5);
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut store = ParamStore::<f64>::new();
        store.alloc("w", Tensor::zeros(&[2, 2]));
        let ok = vec![("w".to_string(), Tensor::full(&[2, 2], 1.0))];
        store.load_named(&ok).unwrap();
        assert_eq!(store.get(0).data(), &[1.0; 4]);
        let bad_shape = vec![("w".to_string(), Tensor::zeros(&[3]))];
        assert!(store.load_named(&bad_shape).is_err());
        let bad_name = vec![("nope".to_string(), Tensor::zeros(&[2, 2]))];
        assert!(store.load_named(&bad_name).is_err());
    }

    #[test]
    fn fan_in_init_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = init_tensor(&[4, 4], Init::FanIn { fan_in: 4, gain: 2.0 }, &mut rng);
        let bound = (3.0 * 2.0 / 4.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let t2: Tensor<f64> =
            init_tensor(&[4, 4], Init::FanIn { fan_in: 4, gain: 2.0 }, &mut rng2);
        assert!(t.bit_eq(&t2));
    }
}
