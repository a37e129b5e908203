//! Recording tape for reverse-mode differentiation.
//!
//! Ops push nodes in execution order, so reverse index order is a valid
//! reverse-topological traversal. Every forward result is checked for
//! NaN/Inf on the way in; a non-finite value aborts with the op name.

use std::collections::BTreeMap;

use crate::error::{MqError, Result};
use crate::tensor::{ops, Scalar, Tensor};
use crate::tensor::ops::UpsampleMode;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct BkCtx<'a, S: Scalar> {
    parents: &'a [&'a Tensor<S>],
    out: &'a Tensor<S>,
    gout: &'a Tensor<S>,
}

type BackFn<S> = Box<dyn Fn(&BkCtx<'_, S>) -> Result<Vec<Option<Tensor<S>>>> + Send>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<usize>,
    backward: Option<BackFn<S>>,
    needs_grad: bool,
    param_key: Option<usize>,
    op: &'static str,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// Forward-only tape: no backward rules are recorded.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Leaf whose `requires_grad` flag decides gradient participation.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let needs = t.requires_grad && self.grad_enabled;
        self.push_raw(t, vec![], None, needs, None, "leaf")
            .expect("leaf values are caller-checked")
    }

    /// Leaf that never takes gradients.
    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Parameter leaf tagged with a stable key for optimizer retrieval.
    pub fn param(&mut self, key: usize, value: &Tensor<S>) -> Var {
        self.push_raw(
            value.clone(),
            vec![],
            None,
            self.grad_enabled,
            Some(key),
            "param",
        )
        .expect("param values are caller-checked")
    }

    fn push_raw(
        &mut self,
        value: Tensor<S>,
        parents: Vec<usize>,
        backward: Option<BackFn<S>>,
        needs_grad: bool,
        param_key: Option<usize>,
        op: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(MqError::NonFinite { op });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
            param_key,
            op,
        });
        self.grads.push(None);
        Ok(Var(id))
    }

    fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        parents: Vec<Var>,
        backward: BackFn<S>,
    ) -> Result<Var> {
        let pids: Vec<usize> = parents.iter().map(|v| v.0).collect();
        let needs = self.grad_enabled && pids.iter().any(|&p| self.nodes[p].needs_grad);
        let bk = if needs { Some(backward) } else { None };
        self.push_raw(value, pids, bk, needs, None, op)
    }

    /// Reverse pass from a scalar root. Fails on a second call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(MqError::Tape("backward called twice without reset".into()));
        }
        if !self.grad_enabled {
            return Err(MqError::Tape("backward on an inference tape".into()));
        }
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(MqError::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(Tensor::full(root_val.shape(), S::one()));
        for id in (0..self.nodes.len()).rev() {
            let (before, rest) = self.grads.split_at_mut(id);
            let Some(gout) = rest[0].as_ref() else { continue };
            let node = &self.nodes[id];
            let Some(back) = node.backward.as_ref() else { continue };
            let parent_vals: Vec<&Tensor<S>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let ctx = BkCtx {
                parents: &parent_vals,
                out: &node.value,
                gout,
            };
            let pgrads = back(&ctx)?;
            debug_assert_eq!(pgrads.len(), node.parents.len(), "op {}", node.op);
            for (&pid, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[pid].needs_grad {
                    continue;
                }
                match &mut before[pid] {
                    Some(acc) => {
                        for (a, &g) in acc.data_mut().iter_mut().zip(pg.data().iter()) {
                            *a = *a + g;
                        }
                    }
                    None => before[pid] = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Per-key parameter gradients after backward, in ascending key order.
    /// Keys registered multiple times have their gradients summed.
    pub fn param_grads(&self) -> BTreeMap<usize, Tensor<S>> {
        let mut out: BTreeMap<usize, Tensor<S>> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let Some(key) = node.param_key else { continue };
            let Some(g) = &self.grads[id] else { continue };
            match out.get_mut(&key) {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                        *a = *a + v;
                    }
                }
                None => {
                    out.insert(key, g.clone());
                }
            }
        }
        out
    }

    // ── recorded ops ────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        self.push_op(
            "add",
            v,
            vec![a, b],
            Box::new(|ctx| Ok(vec![Some(ctx.gout.clone()), Some(ctx.gout.clone())])),
        )
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::hadamard(self.value(a), self.value(b))?;
        self.push_op(
            "hadamard",
            v,
            vec![a, b],
            Box::new(|ctx| {
                Ok(vec![
                    Some(ops::hadamard(ctx.gout, ctx.parents[1])?),
                    Some(ops::hadamard(ctx.gout, ctx.parents[0])?),
                ])
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = ops::scale(self.value(a), S::from_f64(c));
        self.push_op(
            "scale",
            v,
            vec![a],
            Box::new(move |ctx| Ok(vec![Some(ops::scale(ctx.gout, S::from_f64(c)))])),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = ops::relu(self.value(a));
        self.push_op(
            "relu",
            v,
            vec![a],
            Box::new(|ctx| Ok(vec![Some(ops::relu_backward(ctx.parents[0], ctx.gout))])),
        )
    }

    /// (M,K)·(K,N), (B,M,K)·(B,K,N), or (B,M,K)·(K,N) with shared rhs.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::bmm(self.value(a), self.value(b))?;
        let b_shape = self.value(b).shape().to_vec();
        self.push_op(
            "matmul",
            v,
            vec![a, b],
            Box::new(move |ctx| {
                let da = ops::bmm_nt(ctx.gout, ctx.parents[1])?;
                let db_full = ops::bmm_tn(ctx.parents[0], ctx.gout)?;
                let db = ops::sum_batch(&db_full, &b_shape)?;
                Ok(vec![Some(da), Some(db)])
            }),
        )
    }

    /// Batched a · bᵀ (used for attention scores and the token response map).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::bmm_nt(self.value(a), self.value(b))?;
        let b_shape = self.value(b).shape().to_vec();
        self.push_op(
            "matmul_nt",
            v,
            vec![a, b],
            Box::new(move |ctx| {
                let da = ops::bmm(ctx.gout, ctx.parents[1])?;
                let db_full = ops::bmm_tn(ctx.gout, ctx.parents[0])?;
                let db = ops::sum_batch(&db_full, &b_shape)?;
                Ok(vec![Some(da), Some(db)])
            }),
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose2d(self.value(a))?;
        self.push_op(
            "transpose",
            v,
            vec![a],
            Box::new(|ctx| Ok(vec![Some(ops::transpose2d(ctx.gout)?)])),
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax_axis(self.value(a), axis)?;
        self.push_op(
            "softmax",
            v,
            vec![a],
            Box::new(move |ctx| Ok(vec![Some(ops::softmax_backward(ctx.out, ctx.gout, axis))])),
        )
    }

    pub fn masked_softmax_last(&mut self, a: Var, valid: Vec<bool>) -> Result<Var> {
        let v = ops::masked_softmax_last(self.value(a), &valid)?;
        self.push_op(
            "masked_softmax",
            v,
            vec![a],
            Box::new(|ctx| Ok(vec![Some(ops::masked_softmax_backward(ctx.out, ctx.gout))])),
        )
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let e = S::from_f64(eps);
        let v = ops::layernorm_last(self.value(x), self.value(gamma), self.value(beta), e)?;
        self.push_op(
            "layernorm",
            v,
            vec![x, gamma, beta],
            Box::new(move |ctx| {
                let (dx, dg, db) =
                    ops::layernorm_backward(ctx.parents[0], ctx.parents[1], e, ctx.gout);
                Ok(vec![Some(dx), Some(dg), Some(db)])
            }),
        )
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let v = ops::conv2d_same(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        )?;
        let mut parents = vec![x, kernel];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.push_op(
            "conv2d",
            v,
            parents,
            Box::new(move |ctx| {
                let (dx, dk, db) = ops::conv2d_backward(ctx.parents[0], ctx.parents[1], ctx.gout);
                let mut grads = vec![Some(dx), Some(dk)];
                if has_bias {
                    grads.push(Some(db));
                }
                Ok(grads)
            }),
        )
    }

    pub fn upsample(&mut self, x: Var, mode: UpsampleMode, factor: usize) -> Result<Var> {
        let v = ops::upsample(self.value(x), mode, factor)?;
        let in_shape = self.value(x).shape().to_vec();
        self.push_op(
            "upsample",
            v,
            vec![x],
            Box::new(move |ctx| {
                let dx = match mode {
                    UpsampleMode::Nearest => {
                        ops::upsample_nearest_backward(&in_shape, factor, ctx.gout)
                    }
                    UpsampleMode::Bilinear => {
                        ops::upsample_bilinear_backward(&in_shape, factor, ctx.gout)
                    }
                };
                Ok(vec![Some(dx)])
            }),
        )
    }

    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let v = ops::cross_entropy_rows(self.value(logits), &targets)?;
        self.push_op(
            "cross_entropy",
            v,
            vec![logits],
            Box::new(move |ctx| {
                let g = ctx.gout.item()?;
                Ok(vec![Some(ops::cross_entropy_rows_backward(
                    ctx.parents[0],
                    &targets,
                    g,
                ))])
            }),
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = ops::gather_rows(self.value(x), &idx)?;
        let in_shape = self.value(x).shape().to_vec();
        self.push_op(
            "gather_rows",
            v,
            vec![x],
            Box::new(move |ctx| {
                Ok(vec![Some(ops::gather_rows_backward(&in_shape, &idx, ctx.gout))])
            }),
        )
    }

    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let v = ops::mean_axis0(self.value(x))?;
        let in_shape = self.value(x).shape().to_vec();
        self.push_op(
            "mean_axis0",
            v,
            vec![x],
            Box::new(move |ctx| {
                let (n, c) = (in_shape[0], in_shape[1]);
                let inv = S::from_f64(1.0 / n as f64);
                let mut dx = vec![S::zero(); n * c];
                for r in 0..n {
                    for a in 0..c {
                        dx[r * c + a] = ctx.gout.data()[a] * inv;
                    }
                }
                Ok(vec![Some(Tensor::new(&in_shape, dx)?)])
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = ops::sum_all(self.value(x));
        let in_shape = self.value(x).shape().to_vec();
        self.push_op(
            "sum_all",
            v,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.gout.item()?;
                Ok(vec![Some(Tensor::full(&in_shape, g))])
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = ops::mean_all(self.value(x));
        let in_shape = self.value(x).shape().to_vec();
        let n = self.value(x).numel();
        self.push_op(
            "mean_all",
            v,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.gout.item()? / S::from_f64(n as f64);
                Ok(vec![Some(Tensor::full(&in_shape, g))])
            }),
        )
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_last(&vals)?;
        let widths: Vec<usize> = vals.iter().map(|t| *t.shape().last().unwrap()).collect();
        self.push_op(
            "concat",
            v,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut start = 0;
                for &w in &widths {
                    grads.push(Some(ops::slice_last(ctx.gout, start, start + w)?));
                    start += w;
                }
                Ok(grads)
            }),
        )
    }

    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = ops::slice_last(self.value(x), start, end)?;
        let in_shape = self.value(x).shape().to_vec();
        self.push_op(
            "slice",
            v,
            vec![x],
            Box::new(move |ctx| {
                Ok(vec![Some(ops::slice_last_backward(&in_shape, start, ctx.gout))])
            }),
        )
    }

    pub fn window_partition(&mut self, x: Var, w: usize) -> Result<Var> {
        let v = ops::window_partition(self.value(x), w)?;
        let (h, ww) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        self.push_op(
            "window_partition",
            v,
            vec![x],
            Box::new(move |ctx| Ok(vec![Some(ops::window_reverse(ctx.gout, w, h, ww)?)])),
        )
    }

    pub fn window_reverse(&mut self, x: Var, w: usize, h: usize, ww: usize) -> Result<Var> {
        let v = ops::window_reverse(self.value(x), w, h, ww)?;
        self.push_op(
            "window_reverse",
            v,
            vec![x],
            Box::new(move |ctx| Ok(vec![Some(ops::window_partition(ctx.gout, w)?)])),
        )
    }

    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let v = ops::patchify(self.value(x), p)?;
        let (h, w) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        self.push_op(
            "patchify",
            v,
            vec![x],
            Box::new(move |ctx| Ok(vec![Some(ops::unpatchify(ctx.gout, p, h, w)?)])),
        )
    }

    pub fn roll2d(&mut self, x: Var, dy: isize, dx: isize) -> Result<Var> {
        let v = ops::roll2d(self.value(x), dy, dx)?;
        self.push_op(
            "roll2d",
            v,
            vec![x],
            Box::new(move |ctx| Ok(vec![Some(ops::roll2d(ctx.gout, -dy, -dx)?)])),
        )
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = ops::broadcast_add_rows(self.value(x), self.value(bias))?;
        let c = *self.value(bias).shape().last().unwrap();
        self.push_op(
            "bias_add",
            v,
            vec![x, bias],
            Box::new(move |ctx| {
                let mut db = vec![S::zero(); c];
                for row in ctx.gout.data().chunks(c) {
                    for (d, &g) in db.iter_mut().zip(row.iter()) {
                        *d = *d + g;
                    }
                }
                Ok(vec![Some(ctx.gout.clone()), Some(Tensor::new(&[c], db)?)])
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let in_shape = self.value(x).shape().to_vec();
        self.push_op(
            "reshape",
            v,
            vec![x],
            Box::new(move |ctx| Ok(vec![Some(ctx.gout.reshape(&in_shape)?)])),
        )
    }

    /// Linear map rows·W + b on the trailing axis.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c_in = *xs.last().unwrap();
        let rows = self.value(x).numel() / c_in;
        let flat = if xs.len() == 2 { x } else { self.reshape(x, &[rows, c_in])? };
        let mut y = self.matmul(flat, weight)?;
        if let Some(b) = bias {
            y = self.bias_add(y, b)?;
        }
        if xs.len() == 2 {
            Ok(y)
        } else {
            let c_out = *self.value(y).shape().last().unwrap();
            let mut out_shape = xs;
            *out_shape.last_mut().unwrap() = c_out;
            self.reshape(y, &out_shape)
        }
    }
}
