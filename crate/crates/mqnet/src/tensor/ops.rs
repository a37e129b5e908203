//! Pure forward kernels and their backward counterparts.
//!
//! Everything here is tape-agnostic: functions map value tensors to value
//! tensors. The tape wraps these into recorded nodes. Backward functions
//! return gradients with respect to each differentiable input.

use crate::error::{MqError, Result};
use crate::tensor::{Scalar, Tensor};

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> MqError {
    MqError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn dim_err(op: &'static str, detail: String) -> MqError {
    MqError::InvalidDimension { op, detail }
}

// ── element-wise ─────────────────────────────────────────────────────

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn hadamard<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(shape_err("hadamard", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn scale<S: Scalar>(x: &Tensor<S>, c: S) -> Tensor<S> {
    let mut out = x.clone();
    out.grad = None;
    out.requires_grad = false;
    for v in out.data_mut() {
        *v = *v * c;
    }
    out
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > S::zero() { v } else { S::zero() })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

pub fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let data = x
        .data()
        .iter()
        .zip(dy.data().iter())
        .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

// ── matrix products ──────────────────────────────────────────────────

/// C[m,n] = sum_k A[m,k] B[k,n].
pub fn matmul2d<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(shape_err("matmul", ash, bsh));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let mut out = vec![S::zero(); m * n];
    matmul_kernel(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// C[m,n] = sum_k A[m,k] B[n,k]  (A · Bᵀ).
fn matmul_nt_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s = s + av * bv;
            }
            out[i * n + j] = s;
        }
    }
}

/// C[k,n] = sum_m A[m,k] B[m,n]  (Aᵀ · B).
fn matmul_tn_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

fn batch_dims(op: &'static str, sh: &[usize]) -> Result<(usize, usize, usize)> {
    match sh.len() {
        2 => Ok((1, sh[0], sh[1])),
        3 => Ok((sh[0], sh[1], sh[2])),
        _ => Err(dim_err(op, format!("expected rank 2 or 3, got {sh:?}"))),
    }
}

/// Batched product: (B,M,K)·(B,K,N), (M,K)·(K,N), or (B,M,K)·(K,N) with
/// the right-hand matrix shared across the batch.
pub fn bmm<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ba, m, k) = batch_dims("matmul", a.shape())?;
    let (bb, kb, n) = batch_dims("matmul", b.shape())?;
    if k != kb || (bb != ba && bb != 1) {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![S::zero(); ba * m * n];
    for i in 0..ba {
        let bi = if bb == 1 { 0 } else { i };
        matmul_kernel(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let shape: Vec<usize> = if a.rank() == 2 {
        vec![m, n]
    } else {
        vec![ba, m, n]
    };
    Tensor::new(&shape, out)
}

/// Batched A · Bᵀ: (B,M,K)·(B,N,K) → (B,M,N).
pub fn bmm_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ba, m, k) = batch_dims("matmul_nt", a.shape())?;
    let (bb, n, kb) = batch_dims("matmul_nt", b.shape())?;
    if k != kb || (bb != ba && bb != 1) {
        return Err(shape_err("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![S::zero(); ba * m * n];
    for i in 0..ba {
        let bi = if bb == 1 { 0 } else { i };
        matmul_nt_kernel(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[bi * n * k..(bi + 1) * n * k],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let shape: Vec<usize> = if a.rank() == 2 {
        vec![m, n]
    } else {
        vec![ba, m, n]
    };
    Tensor::new(&shape, out)
}

/// Batched Aᵀ · B: (B,M,K)·(B,M,N) → (B,K,N).
pub fn bmm_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ba, m, k) = batch_dims("matmul_tn", a.shape())?;
    let (bb, mb, n) = batch_dims("matmul_tn", b.shape())?;
    if m != mb || bb != ba {
        return Err(shape_err("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![S::zero(); ba * k * n];
    for i in 0..ba {
        matmul_tn_kernel(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * m * n..(i + 1) * m * n],
            &mut out[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
        );
    }
    let shape: Vec<usize> = if a.rank() == 2 {
        vec![k, n]
    } else {
        vec![ba, k, n]
    };
    Tensor::new(&shape, out)
}

/// Reduce a batched gradient (B,K,N) onto a shared rhs (K,N), batch-major order.
pub fn sum_batch<S: Scalar>(g: &Tensor<S>, target_shape: &[usize]) -> Result<Tensor<S>> {
    if g.shape() == target_shape {
        return Ok(g.clone());
    }
    let inner: usize = target_shape.iter().product();
    if g.numel() % inner != 0 {
        return Err(shape_err("sum_batch", g.shape(), target_shape));
    }
    let mut out = vec![S::zero(); inner];
    for chunk in g.data().chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk.iter()) {
            *o = *o + v;
        }
    }
    Tensor::new(target_shape, out)
}

pub fn transpose2d<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 2 {
        return Err(dim_err(
            "transpose",
            format!("expected rank 2, got {:?}", x.shape()),
        ));
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

// ── softmax family ───────────────────────────────────────────────────

/// Numerically stable softmax along `axis`.
pub fn softmax_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.rank() {
        return Err(dim_err(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let shape = x.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![S::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut m = S::neg_infinity();
            for a in 0..axis_len {
                let v = x.data()[base + a * inner];
                if v > m {
                    m = v;
                }
            }
            let mut sum = S::zero();
            for a in 0..axis_len {
                let e = (x.data()[base + a * inner] - m).exp();
                out[base + a * inner] = e;
                sum = sum + e;
            }
            for a in 0..axis_len {
                out[base + a * inner] = out[base + a * inner] / sum;
            }
        }
    }
    Tensor::new(shape, out)
}

/// dx = y ⊙ (dy − ⟨y, dy⟩ along axis).
pub fn softmax_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>, axis: usize) -> Tensor<S> {
    let shape = y.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![S::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = S::zero();
            for a in 0..axis_len {
                let idx = base + a * inner;
                dot = dot + y.data()[idx] * dy.data()[idx];
            }
            for a in 0..axis_len {
                let idx = base + a * inner;
                out[idx] = y.data()[idx] * (dy.data()[idx] - dot);
            }
        }
    }
    Tensor::new(shape, out).expect("same shape")
}

/// Softmax over the last axis restricted to lanes where `valid` is true.
///
/// Invalid lanes come out exactly zero, so downstream contractions see
/// them as hard zeros. `valid` either matches the full element count or
/// just the last axis (broadcast across rows). A row with no valid lane
/// yields all zeros.
pub fn masked_softmax_last<S: Scalar>(x: &Tensor<S>, valid: &[bool]) -> Result<Tensor<S>> {
    let lanes = *x.shape().last().expect("non-empty shape");
    let rows = x.numel() / lanes;
    let broadcast = if valid.len() == lanes {
        true
    } else if valid.len() == x.numel() {
        false
    } else {
        return Err(dim_err(
            "masked_softmax",
            format!(
                "mask length {} matches neither last axis {} nor element count {}",
                valid.len(),
                lanes,
                x.numel()
            ),
        ));
    };
    let mut out = vec![S::zero(); x.numel()];
    for r in 0..rows {
        let base = r * lanes;
        let row_valid = |a: usize| {
            if broadcast {
                valid[a]
            } else {
                valid[base + a]
            }
        };
        let mut m = S::neg_infinity();
        for a in 0..lanes {
            if row_valid(a) && x.data()[base + a] > m {
                m = x.data()[base + a];
            }
        }
        if m == S::neg_infinity() {
            continue; // no valid lane: all-zero row
        }
        let mut sum = S::zero();
        for a in 0..lanes {
            if row_valid(a) {
                let e = (x.data()[base + a] - m).exp();
                out[base + a] = e;
                sum = sum + e;
            }
        }
        for a in 0..lanes {
            if row_valid(a) {
                out[base + a] = out[base + a] / sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Same Jacobian as plain softmax; zero lanes contribute and receive nothing.
pub fn masked_softmax_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    softmax_backward(y, dy, y.rank() - 1)
}

// ── layer norm across the last axis ──────────────────────────────────

pub fn layernorm_last<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let c = *x.shape().last().expect("non-empty shape");
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err("layernorm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / c;
    let cn = S::from_f64(c as f64);
    let mut out = vec![S::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mut mean = S::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / cn;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / cn;
        let inv = (var + eps).sqrt().recip();
        for a in 0..c {
            out[r * c + a] = gamma.data()[a] * ((row[a] - mean) * inv) + beta.data()[a];
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns (dx, dgamma, dbeta).
pub fn layernorm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    eps: S,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let c = *x.shape().last().expect("non-empty shape");
    let rows = x.numel() / c;
    let cn = S::from_f64(c as f64);
    let mut dx = vec![S::zero(); x.numel()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let dyr = &dy.data()[r * c..(r + 1) * c];
        let mut mean = S::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / cn;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / cn;
        let inv = (var + eps).sqrt().recip();
        // accumulate param grads and the two row sums the dx formula needs
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for a in 0..c {
            let xhat = (row[a] - mean) * inv;
            dgamma[a] = dgamma[a] + dyr[a] * xhat;
            dbeta[a] = dbeta[a] + dyr[a];
            let dxhat = dyr[a] * gamma.data()[a];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
        }
        for a in 0..c {
            let xhat = (row[a] - mean) * inv;
            let dxhat = dyr[a] * gamma.data()[a];
            dx[r * c + a] = inv * (dxhat - sum_dxhat / cn - xhat * sum_dxhat_xhat / cn);
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("same shape"),
        Tensor::new(&[c], dgamma).expect("gamma shape"),
        Tensor::new(&[c], dbeta).expect("beta shape"),
    )
}

// ── convolution ──────────────────────────────────────────────────────

/// Same-padded cross-correlation: x (H,W,Cin), kernel (k,k,Cin,Cout), odd k.
pub fn conv2d_same<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 3 || ks.len() != 4 {
        return Err(shape_err("conv2d", xs, ks));
    }
    let (h, w, cin) = (xs[0], xs[1], xs[2]);
    let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
    if kh != kw || kh % 2 == 0 {
        return Err(dim_err("conv2d", format!("kernel must be square odd, got {ks:?}")));
    }
    if kcin != cin {
        return Err(shape_err("conv2d", xs, ks));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err("conv2d", &[cout], b.shape()));
        }
    }
    let pad = kh / 2;
    let mut out = vec![S::zero(); h * w * cout];
    if let Some(b) = bias {
        for px in out.chunks_mut(cout) {
            px.copy_from_slice(b.data());
        }
    }
    for i in 0..h {
        for j in 0..w {
            let orow = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
            for di in 0..kh {
                let si = i + di;
                if si < pad || si - pad >= h {
                    continue;
                }
                let si = si - pad;
                for dj in 0..kw {
                    let sj = j + dj;
                    if sj < pad || sj - pad >= w {
                        continue;
                    }
                    let sj = sj - pad;
                    let xrow = &x.data()[(si * w + sj) * cin..(si * w + sj + 1) * cin];
                    let kbase = (di * kw + dj) * cin * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == S::zero() {
                            continue;
                        }
                        let krow = &kernel.data()[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (o, &kv) in orow.iter_mut().zip(krow.iter()) {
                            *o = *o + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cout], out)
}

/// Returns (dx, dkernel, dbias).
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = kernel.shape();
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let pad = kh / 2;
    let mut dx = vec![S::zero(); h * w * cin];
    let mut dk = vec![S::zero(); kernel.numel()];
    let mut db = vec![S::zero(); cout];
    for i in 0..h {
        for j in 0..w {
            let gyrow = &dy.data()[(i * w + j) * cout..(i * w + j + 1) * cout];
            for (co, &g) in gyrow.iter().enumerate() {
                db[co] = db[co] + g;
            }
            for di in 0..kh {
                let si = i + di;
                if si < pad || si - pad >= h {
                    continue;
                }
                let si = si - pad;
                for dj in 0..kw {
                    let sj = j + dj;
                    if sj < pad || sj - pad >= w {
                        continue;
                    }
                    let sj = sj - pad;
                    let xrow = &x.data()[(si * w + sj) * cin..(si * w + sj + 1) * cin];
                    let dxrow = &mut dx[(si * w + sj) * cin..(si * w + sj + 1) * cin];
                    let kbase = (di * kw + dj) * cin * cout;
                    for ci in 0..cin {
                        let krow = &kernel.data()[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let xv = xrow[ci];
                        let mut acc = S::zero();
                        for co in 0..cout {
                            let g = gyrow[co];
                            acc = acc + g * krow[co];
                            dkrow[co] = dkrow[co] + g * xv;
                        }
                        dxrow[ci] = dxrow[ci] + acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("same shape"),
        Tensor::new(kernel.shape(), dk).expect("same shape"),
        Tensor::new(&[cout], db).expect("bias shape"),
    )
}

// ── upsampling ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

pub fn upsample<S: Scalar>(x: &Tensor<S>, mode: UpsampleMode, factor: usize) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(dim_err(
            "upsample",
            format!("expected (H,W,C), got {:?}", x.shape()),
        ));
    }
    if factor != 2 && factor != 4 {
        return Err(dim_err("upsample", format!("factor must be 2 or 4, got {factor}")));
    }
    match mode {
        UpsampleMode::Nearest => Ok(upsample_nearest(x, factor)),
        UpsampleMode::Bilinear => Ok(upsample_bilinear(x, factor)),
    }
}

fn upsample_nearest<S: Scalar>(x: &Tensor<S>, f: usize) -> Tensor<S> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![S::zero(); oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let src = &x.data()[((i / f) * w + j / f) * c..((i / f) * w + j / f + 1) * c];
            out[(i * ow + j) * c..(i * ow + j + 1) * c].copy_from_slice(src);
        }
    }
    Tensor::new(&[oh, ow, c], out).expect("shape")
}

pub fn upsample_nearest_backward<S: Scalar>(in_shape: &[usize], f: usize, dy: &Tensor<S>) -> Tensor<S> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let ow = w * f;
    let mut dx = vec![S::zero(); h * w * c];
    for i in 0..h * f {
        for j in 0..ow {
            let dst = ((i / f) * w + j / f) * c;
            let src = (i * ow + j) * c;
            for a in 0..c {
                dx[dst + a] = dx[dst + a] + dy.data()[src + a];
            }
        }
    }
    Tensor::new(in_shape, dx).expect("shape")
}

/// Half-pixel-center source coordinate and lerp weights for one output index.
fn bilinear_taps(out_idx: usize, factor: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.max(0.0).min((in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

fn upsample_bilinear<S: Scalar>(x: &Tensor<S>, f: usize) -> Tensor<S> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![S::zero(); oh * ow * c];
    for i in 0..oh {
        let (i0, i1, fi) = bilinear_taps(i, f, h);
        let (wi0, wi1) = (S::from_f64(1.0 - fi), S::from_f64(fi));
        for j in 0..ow {
            let (j0, j1, fj) = bilinear_taps(j, f, w);
            let (wj0, wj1) = (S::from_f64(1.0 - fj), S::from_f64(fj));
            for a in 0..c {
                let v = wi0 * wj0 * x.data()[(i0 * w + j0) * c + a]
                    + wi0 * wj1 * x.data()[(i0 * w + j1) * c + a]
                    + wi1 * wj0 * x.data()[(i1 * w + j0) * c + a]
                    + wi1 * wj1 * x.data()[(i1 * w + j1) * c + a];
                out[(i * ow + j) * c + a] = v;
            }
        }
    }
    Tensor::new(&[oh, ow, c], out).expect("shape")
}

pub fn upsample_bilinear_backward<S: Scalar>(
    in_shape: &[usize],
    f: usize,
    dy: &Tensor<S>,
) -> Tensor<S> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![S::zero(); h * w * c];
    for i in 0..oh {
        let (i0, i1, fi) = bilinear_taps(i, f, h);
        let (wi0, wi1) = (S::from_f64(1.0 - fi), S::from_f64(fi));
        for j in 0..ow {
            let (j0, j1, fj) = bilinear_taps(j, f, w);
            let (wj0, wj1) = (S::from_f64(1.0 - fj), S::from_f64(fj));
            for a in 0..c {
                let g = dy.data()[(i * ow + j) * c + a];
                dx[(i0 * w + j0) * c + a] = dx[(i0 * w + j0) * c + a] + wi0 * wj0 * g;
                dx[(i0 * w + j1) * c + a] = dx[(i0 * w + j1) * c + a] + wi0 * wj1 * g;
                dx[(i1 * w + j0) * c + a] = dx[(i1 * w + j0) * c + a] + wi1 * wj0 * g;
                dx[(i1 * w + j1) * c + a] = dx[(i1 * w + j1) * c + a] + wi1 * wj1 * g;
            }
        }
    }
    Tensor::new(in_shape, dx).expect("shape")
}

// ── losses ───────────────────────────────────────────────────────────

/// Mean over rows of −log softmax(row)[target].
pub fn cross_entropy_rows<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(dim_err(
            "cross_entropy",
            format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
        ));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(dim_err(
            "cross_entropy",
            format!("target {bad} out of range for {k} classes"),
        ));
    }
    let mut total = S::zero();
    for r in 0..n {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &v in row {
            sum = sum + (v - m).exp();
        }
        total = total + (sum.ln() + m - row[targets[r]]);
    }
    Ok(Tensor::scalar(total / S::from_f64(n as f64)))
}

/// dlogits[r,k] = (softmax(r)[k] − 1{k = target_r}) · g / N.
pub fn cross_entropy_rows_backward<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    g: S,
) -> Tensor<S> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let gn = g / S::from_f64(n as f64);
    let mut dx = vec![S::zero(); n * k];
    for r in 0..n {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &v in row {
            sum = sum + (v - m).exp();
        }
        for a in 0..k {
            let p = (row[a] - m).exp() / sum;
            let ind = if a == targets[r] { S::one() } else { S::zero() };
            dx[r * k + a] = (p - ind) * gn;
        }
    }
    Tensor::new(logits.shape(), dx).expect("same shape")
}

// ── gathers, reductions, reshapes ────────────────────────────────────

pub fn gather_rows<S: Scalar>(x: &Tensor<S>, idx: &[usize]) -> Result<Tensor<S>> {
    if x.rank() != 2 {
        return Err(dim_err(
            "gather_rows",
            format!("expected (N,C), got {:?}", x.shape()),
        ));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(dim_err("gather_rows", format!("row {bad} out of range {n}")));
    }
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(&[idx.len(), c], out)
}

pub fn gather_rows_backward<S: Scalar>(
    in_shape: &[usize],
    idx: &[usize],
    dy: &Tensor<S>,
) -> Tensor<S> {
    let c = in_shape[1];
    let mut dx = vec![S::zero(); in_shape[0] * c];
    for (r, &i) in idx.iter().enumerate() {
        for a in 0..c {
            dx[i * c + a] = dx[i * c + a] + dy.data()[r * c + a];
        }
    }
    Tensor::new(in_shape, dx).expect("shape")
}

pub fn mean_axis0<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 2 {
        return Err(dim_err(
            "mean_axis0",
            format!("expected (N,C), got {:?}", x.shape()),
        ));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![S::zero(); c];
    for r in 0..n {
        for a in 0..c {
            out[a] = out[a] + x.data()[r * c + a];
        }
    }
    let nn = S::from_f64(n as f64);
    for v in &mut out {
        *v = *v / nn;
    }
    Tensor::new(&[c], out)
}

pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut s = S::zero();
    for &v in x.data() {
        s = s + v;
    }
    Tensor::scalar(s)
}

pub fn mean_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = sum_all(x).item().expect("scalar");
    Tensor::scalar(s / S::from_f64(x.numel() as f64))
}

pub fn concat_last<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err("concat", "no operands".into()))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(shape_err("concat", first.shape(), p.shape()));
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(widths.iter()) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(&shape, out)
}

pub fn slice_last<S: Scalar>(x: &Tensor<S>, start: usize, end: usize) -> Result<Tensor<S>> {
    let c = *x.shape().last().expect("non-empty shape");
    if start >= end || end > c {
        return Err(dim_err(
            "slice",
            format!("range {start}..{end} invalid for last axis {c}"),
        ));
    }
    let rows = x.numel() / c;
    let w = end - start;
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * c + start..r * c + end]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w;
    Tensor::new(&shape, out)
}

pub fn slice_last_backward<S: Scalar>(
    in_shape: &[usize],
    start: usize,
    dy: &Tensor<S>,
) -> Tensor<S> {
    let c = *in_shape.last().unwrap();
    let w = *dy.shape().last().unwrap();
    let rows = dy.numel() / w;
    let mut dx = vec![S::zero(); rows * c];
    for r in 0..rows {
        dx[r * c + start..r * c + start + w].copy_from_slice(&dy.data()[r * w..(r + 1) * w]);
    }
    Tensor::new(in_shape, dx).expect("shape")
}

// ── spatial rearrangements (all bijective index remaps) ──────────────

/// (H,W,C) → (nWin, w·w, C), windows row-major, tokens row-major inside.
pub fn window_partition<S: Scalar>(x: &Tensor<S>, w: usize) -> Result<Tensor<S>> {
    let (h, ww, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if w == 0 || h % w != 0 || ww % w != 0 {
        return Err(dim_err(
            "window_partition",
            format!("window {w} does not divide {h}x{ww}"),
        ));
    }
    let (gh, gw) = (h / w, ww / w);
    let mut out = vec![S::zero(); x.numel()];
    for i in 0..h {
        for j in 0..ww {
            let win = (i / w) * gw + j / w;
            let tok = (i % w) * w + j % w;
            let dst = (win * w * w + tok) * c;
            let src = (i * ww + j) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(&[gh * gw, w * w, c], out)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<S: Scalar>(x: &Tensor<S>, w: usize, h: usize, ww: usize) -> Result<Tensor<S>> {
    let c = x.shape()[2];
    if x.shape()[0] * x.shape()[1] != h * ww || x.shape()[1] != w * w {
        return Err(dim_err(
            "window_reverse",
            format!("cannot reassemble {:?} into {h}x{ww}", x.shape()),
        ));
    }
    let gw = ww / w;
    let mut out = vec![S::zero(); x.numel()];
    for i in 0..h {
        for j in 0..ww {
            let win = (i / w) * gw + j / w;
            let tok = (i % w) * w + j % w;
            let src = (win * w * w + tok) * c;
            let dst = (i * ww + j) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(&[h, ww, c], out)
}

/// (H,W,C) → (H/p, W/p, p²·C); patch pixels row-major in the channel block.
pub fn patchify<S: Scalar>(x: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err(
            "patchify",
            format!("patch {p} does not divide {h}x{w}"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![S::zero(); x.numel()];
    for i in 0..h {
        for j in 0..w {
            let cell = (i / p) * gw + j / p;
            let inner = (i % p) * p + j % p;
            let dst = cell * p * p * c + inner * c;
            let src = (i * w + j) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(&[gh, gw, p * p * c], out)
}

/// Inverse of [`patchify`]; used by its backward pass.
pub fn unpatchify<S: Scalar>(x: &Tensor<S>, p: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    let c = x.shape()[2] / (p * p);
    let gw = w / p;
    let mut out = vec![S::zero(); x.numel()];
    for i in 0..h {
        for j in 0..w {
            let cell = (i / p) * gw + j / p;
            let inner = (i % p) * p + j % p;
            let src = cell * p * p * c + inner * c;
            let dst = (i * w + j) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Cyclic shift: out[i,j] = x[(i−dy) mod H, (j−dx) mod W].
pub fn roll2d<S: Scalar>(x: &Tensor<S>, dy: isize, dx: isize) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(dim_err("roll2d", format!("expected (H,W,C), got {:?}", x.shape())));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let modd = |v: isize, m: usize| -> usize {
        let m = m as isize;
        (((v % m) + m) % m) as usize
    };
    let mut out = vec![S::zero(); x.numel()];
    for i in 0..h {
        let si = modd(i as isize - dy, h);
        for j in 0..w {
            let sj = modd(j as isize - dx, w);
            let dst = (i * w + j) * c;
            let src = (si * w + sj) * c;
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn broadcast_add_rows<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let c = *x.shape().last().expect("non-empty shape");
    if bias.shape() != [c] {
        return Err(shape_err("bias_add", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    out.grad = None;
    out.requires_grad = false;
    for row in out.data_mut().chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias.data().iter()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul2d(&i, &b).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        // dense oracle computed by hand: [[1,2]]·[[3],[4]] = [[11]]
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul2d(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let b = t(&[3, 4], &(0..12).map(|i| i as f64).collect::<Vec<_>>());
        let out = matmul2d(&z, &b).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let err = matmul2d(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let a = t(&[2, 2, 3], &(0..12).map(|i| i as f64 * 0.5).collect::<Vec<_>>());
        let b = t(&[2, 3, 2], &(0..12).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        let out = bmm(&a, &b).unwrap();
        for i in 0..2 {
            let ai = t(&[2, 3], &a.data()[i * 6..(i + 1) * 6].to_vec());
            let bi = t(&[3, 2], &b.data()[i * 6..(i + 1) * 6].to_vec());
            let ci = matmul2d(&ai, &bi).unwrap();
            assert_eq!(&out.data()[i * 4..(i + 1) * 4], ci.data());
        }
    }

    #[test]
    fn bmm_nt_is_b_transposed() {
        let a = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[1, 2, 3], &[1.0, 0.0, 1.0, 0.5, 0.5, 0.0]);
        let out = bmm_nt(&a, &b).unwrap();
        // row0·row0 = 1+3 = 4; row0·row1 = .5+1 = 1.5; row1·row0 = 4+6 = 10; row1·row1 = 2+2.5 = 4.5
        assert_eq!(out.data(), &[4.0, 1.5, 10.0, 4.5]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = t(&[2], &[0.0, 0.0]);
        let y = softmax_axis(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let big = t(&[2], &[1000.0, 1000.0]);
        let y = softmax_axis(&big, 0).unwrap();
        assert!(y.is_finite());
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        // e^0 = 1, e^{ln 3} = 3 → [0.25, 0.75]
        let x = t(&[2], &[0.0, 3.0f64.ln()]);
        let y = softmax_axis(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let x = t(&[2], &[0.0, 1.0]);
        assert!(softmax_axis(&x, 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_with_huge_offset() {
        let vals: Vec<f64> = (0..12).map(|i| (i as f64).cos() + 1e6).collect();
        let x = t(&[3, 4], &vals);
        let y = softmax_axis(&x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_zeroes_invalid_lanes() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let y = masked_softmax_last(&x, &[true, true, false]).unwrap();
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[5], 0.0);
        let s0: f64 = y.data()[..3].iter().sum();
        assert!((s0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_all_invalid_is_zero_row() {
        let x = t(&[1, 3], &[5.0, 5.0, 5.0]);
        let y = masked_softmax_last(&x, &[false, false, false]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d_same(&x, &k, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_box_sum_oracle() {
        // one-hot 3×3 image, all-ones 3×3 kernel → ones everywhere
        // (sliding-window oracle: each window covers the single hot pixel)
        let mut img = vec![0.0; 9];
        img[4] = 1.0;
        let x = t(&[3, 3, 1], &img);
        let k = t(&[3, 3, 1, 1], &[1.0; 9]);
        let y = conv2d_same(&x, &k, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_zero_kernel() {
        let x = t(&[3, 3, 2], &(0..18).map(|i| i as f64).collect::<Vec<_>>());
        let k = Tensor::<f64>::zeros(&[3, 3, 2, 4]);
        let y = conv2d_same(&x, &k, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[3, 3, 2]);
        let k = Tensor::<f64>::zeros(&[3, 3, 5, 4]);
        assert!(conv2d_same(&x, &k, None).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 1], 7.5);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let y = upsample(&x, mode, 2).unwrap();
            assert_eq!(y.shape(), &[4, 6, 1]);
            assert!(y.data().iter().all(|&v| v == 7.5));
        }
    }

    #[test]
    fn upsample_nearest_replicates() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = upsample(&x, UpsampleMode::Nearest, 2).unwrap();
        let expected = [
            1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn upsample_bilinear_matches_scalar_oracle() {
        // independent scalar oracle for half-pixel interpolation of [0,1]:
        // src = (o + 0.5)/2 − 0.5, clamped to [0, 1], lerp between the cells
        let x = t(&[1, 2, 1], &[0.0, 1.0]);
        let y = upsample(&x, UpsampleMode::Bilinear, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 1]);
        let row_oracle: Vec<f64> = (0..4)
            .map(|o| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0))
            .collect();
        for row in 0..2 {
            for (got, want) in y.data()[row * 4..(row + 1) * 4].iter().zip(row_oracle.iter()) {
                assert!((got - want).abs() < 1e-15, "{got} vs {want}");
            }
        }
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_rejects_bad_factor() {
        let x = Tensor::<f64>::zeros(&[2, 2, 1]);
        assert!(upsample(&x, UpsampleMode::Nearest, 3).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Tensor::<f64>::zeros(&[4, 2]);
        let loss = cross_entropy_rows(&logits, &[0, 1, 0, 1]).unwrap();
        assert!((loss.item().unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form() {
        // logits [0, ln 3], target 1 → −ln 0.75
        let logits = t(&[1, 2], &[0.0, 3.0f64.ln()]);
        let loss = cross_entropy_rows(&logits, &[1]).unwrap();
        assert!((loss.item().unwrap() - (-(0.75f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_huge_margin_goes_to_zero() {
        let logits = t(&[1, 2], &[0.0, 100.0]);
        let loss = cross_entropy_rows(&logits, &[1]).unwrap();
        assert!(loss.item().unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let logits = Tensor::<f64>::zeros(&[1, 2]);
        assert!(cross_entropy_rows(&logits, &[2]).is_err());
    }

    #[test]
    fn window_partition_round_trip() {
        let x = t(&[4, 4, 2], &(0..32).map(|i| i as f64).collect::<Vec<_>>());
        let win = window_partition(&x, 2).unwrap();
        assert_eq!(win.shape(), &[4, 4, 2]); // 4 windows, 4 tokens, 2 ch
        let back = window_reverse(&win, 2, 4, 4).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn patchify_round_trip() {
        let x = t(&[4, 6, 3], &(0..72).map(|i| i as f64).collect::<Vec<_>>());
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[2, 3, 12]);
        let back = unpatchify(&p, 2, 4, 6).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn roll_round_trip() {
        let x = t(&[3, 4, 1], &(0..12).map(|i| i as f64).collect::<Vec<_>>());
        let r = roll2d(&x, -1, -1).unwrap();
        assert_eq!(r.data()[0], x.data()[5]); // out[0,0] = x[1,1]
        let back = roll2d(&r, 1, 1).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_slice_round_trip_is_exact() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 2], &[7.0, 8.0, 9.0, 10.0]);
        let cat = concat_last(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 5]);
        let sa = slice_last(&cat, 0, 3).unwrap();
        let sb = slice_last(&cat, 3, 5).unwrap();
        assert!(sa.bit_eq(&a) && sb.bit_eq(&b));
    }
}
