use std::sync::Arc;

use super::{Element, TensorOf};
use crate::error::{Error, Result};

/// Every differentiable operation the tape knows about.
///
/// Elementwise binary ops broadcast only the right operand, and only when it
/// is a single element or a row vector matching the last axis of the left
/// operand. Row-wise ops (softmax, norms, layer norm) act on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `(m, k) @ (k, n)`.
    MatMul,
    /// `(b, m, k) @ (b, k, n)`; either side may be rank 2 and is then shared
    /// across the batch.
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Reshape(Vec<usize>),
    /// Swaps the last two axes.
    Transpose,
    /// Rows `start..end` of axis 0.
    RowSlice { start: usize, end: usize },
    /// Concatenation along axis 0, or along the last axis when `last_axis`.
    Concat { last_axis: bool },
    /// Selects axis-0 rows by index; `None` yields a zero row.
    Gather(Arc<Vec<Option<usize>>>),
    Softmax,
    LogSoftmax,
    Silu,
    Tanh,
    Sigmoid,
    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    LayerNorm,
    /// Mean squared difference of two same-shaped tensors.
    Mse,
    Sum,
    /// Euclidean norm of each last-axis row.
    L2Norm,
    /// Cosine similarity of matching last-axis rows.
    Cosine,
    /// Scales each last-axis row to unit norm.
    RowNormalize,
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::BatchMatMul => "batch_matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Transpose => "transpose",
            Op::RowSlice { .. } => "row_slice",
            Op::Concat { .. } => "concat",
            Op::Gather(_) => "gather",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Silu => "silu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::LayerNorm => "layer_norm",
            Op::Mse => "mse",
            Op::Sum => "sum",
            Op::L2Norm => "l2_norm",
            Op::Cosine => "cosine",
            Op::RowNormalize => "row_normalize",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::BatchMatMul | Op::Add | Op::Sub | Op::Mul | Op::Mse | Op::Cosine => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

// ---------------------------------------------------------------------------
// gemm

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `(m, k)` and `op(b)` of
/// shape `(k, n)`. A transposed operand is stored as its transpose, row-major.
#[allow(clippy::too_many_arguments)]
fn gemm<E: Element>(m: usize, k: usize, n: usize, a: &[E], ta: bool, b: &[E], tb: bool, c: &mut [E], beta: E) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides above address only the asserted ranges.
    unsafe {
        E::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize);
    }
}

// ---------------------------------------------------------------------------
// broadcast helpers

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

fn bcast_mode<E: Element>(op: &'static str, a: &TensorOf<E>, b: &TensorOf<E>) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.numel() == 1 {
        Ok(Bcast::Scalar)
    } else if b.rank() == 1 && b.numel() == a.cols() {
        Ok(Bcast::Row)
    } else {
        Err(Error::shape(op, format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape())))
    }
}

fn binary<E: Element>(a: &TensorOf<E>, b: &TensorOf<E>, mode: Bcast, f: impl Fn(E, E) -> E) -> TensorOf<E> {
    let ad = a.data();
    let bd = b.data();
    let data = match mode {
        Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
        Bcast::Row => {
            let c = bd.len();
            ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect()
        }
    };
    TensorOf::from_parts(a.shape().to_vec(), data)
}

/// Sums a left-operand-shaped gradient down to the right operand's shape.
fn reduce_to<E: Element>(g: &[E], b: &TensorOf<E>, mode: Bcast) -> TensorOf<E> {
    match mode {
        Bcast::Same => TensorOf::from_parts(b.shape().to_vec(), g.to_vec()),
        Bcast::Scalar => {
            let s: f64 = g.iter().map(|v| v.as_f64()).sum();
            TensorOf::from_parts(b.shape().to_vec(), vec![E::of(s)])
        }
        Bcast::Row => {
            let c = b.numel();
            let mut acc = vec![0.0f64; c];
            for (i, v) in g.iter().enumerate() {
                acc[i % c] += v.as_f64();
            }
            TensorOf::from_parts(b.shape().to_vec(), acc.into_iter().map(E::of).collect())
        }
    }
}

/// `reduce_to` of the elementwise product `g * a`, with the products formed
/// in `f64` as well.
fn reduce_products_to<E: Element>(g: &[E], a: &[E], b: &TensorOf<E>, mode: Bcast) -> TensorOf<E> {
    let c = if mode == Bcast::Scalar { 1 } else { b.numel() };
    let mut acc = vec![0.0f64; c];
    for (i, (x, y)) in g.iter().zip(a).enumerate() {
        acc[i % c] += x.as_f64() * y.as_f64();
    }
    TensorOf::from_parts(b.shape().to_vec(), acc.into_iter().map(E::of).collect())
}

// ---------------------------------------------------------------------------
// shape helpers

fn batch_dims<E: Element>(op: &'static str, a: &TensorOf<E>, b: &TensorOf<E>) -> Result<(usize, usize, usize, usize)> {
    let (ra, rb) = (a.rank(), b.rank());
    if !(2..=3).contains(&ra) || !(2..=3).contains(&rb) || (ra == 2 && rb == 2) {
        return Err(Error::shape(op, format!("ranks {:?} x {:?}", a.shape(), b.shape())));
    }
    let sa = a.shape();
    let sb = b.shape();
    let batch = if ra == 3 { sa[0] } else { sb[0] };
    if ra == 3 && rb == 3 && sa[0] != sb[0] {
        return Err(Error::shape(op, format!("batch {} vs {}", sa[0], sb[0])));
    }
    let (m, k) = (sa[ra - 2], sa[ra - 1]);
    let (k2, n) = (sb[rb - 2], sb[rb - 1]);
    if k != k2 {
        return Err(Error::shape(op, format!("inner dims {:?} x {:?}", sa, sb)));
    }
    Ok((batch, m, k, n))
}

fn rowwise_out_shape<E: Element>(x: &TensorOf<E>) -> Vec<usize> {
    if x.rank() == 1 {
        vec![1]
    } else {
        x.shape()[..x.rank() - 1].to_vec()
    }
}

pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

fn row_norm<E: Element>(r: &[E]) -> f64 {
    r.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Returns `(cos, |a|, |b|)`; cosine is 0 when either row is zero.
fn cosine_row<E: Element>(a: &[E], b: &[E]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na == 0.0 || nb == 0.0 {
        (0.0, na, nb)
    } else {
        (dot / (na * nb), na, nb)
    }
}

// ---------------------------------------------------------------------------
// forward

/// Evaluates `op` on concrete inputs without recording anything.
pub fn forward_op<E: Element>(op: &Op, inputs: &[&TensorOf<E>]) -> Result<TensorOf<E>> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::shape(op.name(), format!("expected {n} inputs, got {}", inputs.len())));
        }
    } else if inputs.is_empty() {
        return Err(Error::shape(op.name(), "no inputs"));
    }
    let zero = E::zero();
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![zero; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, zero);
            Ok(TensorOf::from_parts(vec![m, n], out))
        }
        Op::BatchMatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n) = batch_dims("batch_matmul", a, b)?;
            let mut out = vec![zero; batch * m * n];
            let sa = if a.rank() == 3 { m * k } else { 0 };
            let sb = if b.rank() == 3 { k * n } else { 0 };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * sa..],
                    false,
                    &b.data()[i * sb..],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    zero,
                );
            }
            Ok(TensorOf::from_parts(vec![batch, m, n], out))
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = bcast_mode(op.name(), a, b)?;
            Ok(match op {
                Op::Add => binary(a, b, mode, |x, y| x + y),
                Op::Sub => binary(a, b, mode, |x, y| x - y),
                _ => binary(a, b, mode, |x, y| x * y),
            })
        }
        Op::Scale(s) => {
            let s = E::of(*s);
            Ok(inputs[0].map(|v| v * s))
        }
        Op::Reshape(shape) => inputs[0].reshaped(shape.clone()),
        Op::Transpose => {
            let x = inputs[0];
            if x.rank() < 2 {
                return Err(Error::shape("transpose", format!("rank {}", x.rank())));
            }
            Ok(transpose(x))
        }
        Op::RowSlice { start, end } => {
            let x = inputs[0];
            let rows = x.shape()[0];
            if start >= end || *end > rows {
                return Err(Error::shape("row_slice", format!("{start}..{end} of {rows} rows")));
            }
            let stride = x.numel() / rows;
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            Ok(TensorOf::from_parts(shape, x.data()[start * stride..end * stride].to_vec()))
        }
        Op::Concat { last_axis } => concat_forward(inputs, *last_axis),
        Op::Gather(idx) => {
            let x = inputs[0];
            let rows = x.shape()[0];
            let stride = x.numel() / rows;
            let mut out = vec![zero; idx.len() * stride];
            for (o, i) in idx.iter().enumerate() {
                if let Some(i) = *i {
                    if i >= rows {
                        return Err(Error::shape("gather", format!("index {i} of {rows} rows")));
                    }
                    out[o * stride..(o + 1) * stride].copy_from_slice(&x.data()[i * stride..(i + 1) * stride]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Ok(TensorOf::from_parts(shape, out))
        }
        Op::Softmax | Op::LogSoftmax => {
            let x = inputs[0];
            let c = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                if *op == Op::Softmax {
                    for v in row.iter_mut() {
                        *v = E::of((v.as_f64() - max).exp() / z);
                    }
                } else {
                    let lz = z.ln();
                    for v in row.iter_mut() {
                        *v = E::of(v.as_f64() - max - lz);
                    }
                }
            }
            Ok(TensorOf::from_parts(x.shape().to_vec(), out))
        }
        Op::Silu => Ok(inputs[0].map(|v| v * sigmoid(v))),
        Op::Tanh => Ok(inputs[0].map(|v| v.tanh())),
        Op::Sigmoid => Ok(inputs[0].map(sigmoid)),
        Op::LayerNorm => {
            let x = inputs[0];
            let c = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let (mean, inv) = ln_stats(row);
                for v in row.iter_mut() {
                    *v = E::of((v.as_f64() - mean) * inv);
                }
            }
            Ok(TensorOf::from_parts(x.shape().to_vec(), out))
        }
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum();
            Ok(TensorOf::scalar(E::of(s / a.numel() as f64)))
        }
        Op::Sum => Ok(TensorOf::scalar(E::of(inputs[0].sum()))),
        Op::L2Norm => {
            let x = inputs[0];
            let data = x.data().chunks(x.cols()).map(|r| E::of(row_norm(r))).collect();
            Ok(TensorOf::from_parts(rowwise_out_shape(x), data))
        }
        Op::Cosine => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape("cosine", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let c = a.cols();
            let data = a
                .data()
                .chunks(c)
                .zip(b.data().chunks(c))
                .map(|(ra, rb)| E::of(cosine_row(ra, rb).0))
                .collect();
            Ok(TensorOf::from_parts(rowwise_out_shape(a), data))
        }
        Op::RowNormalize => {
            let x = inputs[0];
            let c = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let n = row_norm(row).max(NORM_FLOOR);
                for v in row.iter_mut() {
                    *v = E::of(v.as_f64() / n);
                }
            }
            Ok(TensorOf::from_parts(x.shape().to_vec(), out))
        }
    }
}

fn ln_stats<E: Element>(row: &[E]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c;
    let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn transpose<E: Element>(x: &TensorOf<E>) -> TensorOf<E> {
    let r = x.rank();
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.numel() / (rows * cols);
    let mut out = vec![E::zero(); x.numel()];
    let d = x.data();
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[off + j * rows + i] = d[off + i * cols + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    TensorOf::from_parts(shape, out)
}

fn concat_forward<E: Element>(inputs: &[&TensorOf<E>], last_axis: bool) -> Result<TensorOf<E>> {
    let first = inputs[0];
    let r = first.rank();
    for t in &inputs[1..] {
        let ok = t.rank() == r
            && if last_axis {
                t.shape()[..r - 1] == first.shape()[..r - 1]
            } else {
                t.shape()[1..] == first.shape()[1..]
            };
        if !ok {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", first.shape(), t.shape())));
        }
    }
    let mut shape = first.shape().to_vec();
    if last_axis {
        shape[r - 1] = inputs.iter().map(|t| t.cols()).sum();
        let rows = first.rows();
        let mut out = Vec::with_capacity(rows * shape[r - 1]);
        for i in 0..rows {
            for t in inputs {
                out.extend_from_slice(t.row(i));
            }
        }
        Ok(TensorOf::from_parts(shape, out))
    } else {
        shape[0] = inputs.iter().map(|t| t.shape()[0]).sum();
        let mut out = Vec::with_capacity(shape.iter().product());
        for t in inputs {
            out.extend_from_slice(t.data());
        }
        Ok(TensorOf::from_parts(shape, out))
    }
}

pub(crate) fn forward_checked<E: Element>(op: &Op, inputs: &[&TensorOf<E>], strict: bool) -> Result<TensorOf<E>> {
    let out = forward_op(op, inputs)?;
    if strict && !out.is_finite() {
        return Err(Error::NonFinite(op.name()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// backward

/// Vector-Jacobian products of `op` for each input flagged in `need`.
pub(crate) fn backward_op<E: Element>(
    op: &Op,
    inputs: &[&TensorOf<E>],
    out: &TensorOf<E>,
    gout: &TensorOf<E>,
    need: &[bool],
) -> Vec<Option<TensorOf<E>>> {
    let g = gout.data();
    let zero = E::zero();
    let one = E::one();
    let mut grads: Vec<Option<TensorOf<E>>> = vec![None; inputs.len()];
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if need[0] {
                let mut da = vec![zero; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut da, zero);
                grads[0] = Some(TensorOf::from_parts(a.shape().to_vec(), da));
            }
            if need[1] {
                let mut db = vec![zero; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut db, zero);
                grads[1] = Some(TensorOf::from_parts(b.shape().to_vec(), db));
            }
        }
        Op::BatchMatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n) = batch_dims("batch_matmul", a, b).expect("validated in forward");
            let sa = if a.rank() == 3 { m * k } else { 0 };
            let sb = if b.rank() == 3 { k * n } else { 0 };
            if need[0] {
                let mut da = vec![zero; a.numel()];
                for i in 0..batch {
                    let beta = if sa == 0 && i > 0 { one } else { zero };
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        false,
                        &b.data()[i * sb..],
                        true,
                        &mut da[i * sa..i * sa + m * k],
                        beta,
                    );
                }
                grads[0] = Some(TensorOf::from_parts(a.shape().to_vec(), da));
            }
            if need[1] {
                let mut db = vec![zero; b.numel()];
                for i in 0..batch {
                    let beta = if sb == 0 && i > 0 { one } else { zero };
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * sa..],
                        true,
                        &g[i * m * n..],
                        false,
                        &mut db[i * sb..i * sb + k * n],
                        beta,
                    );
                }
                grads[1] = Some(TensorOf::from_parts(b.shape().to_vec(), db));
            }
        }
        Op::Add | Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = bcast_mode(op.name(), a, b).expect("validated in forward");
            if need[0] {
                grads[0] = Some(gout.clone());
            }
            if need[1] {
                let r = reduce_to(g, b, mode);
                grads[1] = Some(if *op == Op::Sub { r.map(|v| -v) } else { r });
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = bcast_mode(op.name(), a, b).expect("validated in forward");
            if need[0] {
                grads[0] = Some(binary(gout, b, mode, |x, y| x * y));
            }
            if need[1] {
                grads[1] = Some(match mode {
                    Bcast::Same => TensorOf::from_parts(b.shape().to_vec(), g.iter().zip(a.data()).map(|(&x, &y)| x * y).collect()),
                    _ => reduce_products_to(g, a.data(), b, mode),
                });
            }
        }
        Op::Scale(s) => {
            let s = E::of(*s);
            grads[0] = Some(gout.map(|v| v * s));
        }
        Op::Reshape(_) => {
            grads[0] = Some(TensorOf::from_parts(inputs[0].shape().to_vec(), g.to_vec()));
        }
        Op::Transpose => grads[0] = Some(transpose(gout)),
        Op::RowSlice { start, end } => {
            let x = inputs[0];
            let stride = x.numel() / x.shape()[0];
            let mut d = vec![zero; x.numel()];
            d[start * stride..end * stride].copy_from_slice(g);
            grads[0] = Some(TensorOf::from_parts(x.shape().to_vec(), d));
        }
        Op::Concat { last_axis } => {
            if *last_axis {
                let rows = out.rows();
                let oc = out.cols();
                let mut off = 0;
                for (j, t) in inputs.iter().enumerate() {
                    let c = t.cols();
                    if need[j] {
                        let mut d = Vec::with_capacity(t.numel());
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * oc + off..i * oc + off + c]);
                        }
                        grads[j] = Some(TensorOf::from_parts(t.shape().to_vec(), d));
                    }
                    off += c;
                }
            } else {
                let mut off = 0;
                for (j, t) in inputs.iter().enumerate() {
                    if need[j] {
                        grads[j] = Some(TensorOf::from_parts(t.shape().to_vec(), g[off..off + t.numel()].to_vec()));
                    }
                    off += t.numel();
                }
            }
        }
        Op::Gather(idx) => {
            let x = inputs[0];
            let stride = x.numel() / x.shape()[0];
            let mut d = vec![zero; x.numel()];
            for (o, i) in idx.iter().enumerate() {
                if let Some(i) = *i {
                    for (dst, &src) in d[i * stride..(i + 1) * stride].iter_mut().zip(&g[o * stride..(o + 1) * stride]) {
                        *dst = *dst + src;
                    }
                }
            }
            grads[0] = Some(TensorOf::from_parts(x.shape().to_vec(), d));
        }
        Op::Softmax => {
            let c = out.cols();
            let mut d = vec![zero; out.numel()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y.as_f64() * gg.as_f64()).sum();
                for ((dv, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = E::of(y.as_f64() * (gg.as_f64() - dot));
                }
            }
            grads[0] = Some(TensorOf::from_parts(out.shape().to_vec(), d));
        }
        Op::LogSoftmax => {
            let c = out.cols();
            let mut d = vec![zero; out.numel()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                let total: f64 = gr.iter().map(|v| v.as_f64()).sum();
                for ((dv, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = E::of(gg.as_f64() - y.as_f64().exp() * total);
                }
            }
            grads[0] = Some(TensorOf::from_parts(out.shape().to_vec(), d));
        }
        Op::Silu => {
            let x = inputs[0];
            let d = x
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gg)| {
                    let s = sigmoid(v);
                    gg * s * (one + v * (one - s))
                })
                .collect();
            grads[0] = Some(TensorOf::from_parts(x.shape().to_vec(), d));
        }
        Op::Tanh => {
            let d = out.data().iter().zip(g).map(|(&y, &gg)| gg * (one - y * y)).collect();
            grads[0] = Some(TensorOf::from_parts(out.shape().to_vec(), d));
        }
        Op::Sigmoid => {
            let d = out.data().iter().zip(g).map(|(&y, &gg)| gg * y * (one - y)).collect();
            grads[0] = Some(TensorOf::from_parts(out.shape().to_vec(), d));
        }
        Op::LayerNorm => {
            let x = inputs[0];
            let c = x.cols();
            let mut d = vec![zero; x.numel()];
            for ((dr, xr), (yr, gr)) in d
                .chunks_mut(c)
                .zip(x.data().chunks(c))
                .zip(out.data().chunks(c).zip(g.chunks(c)))
            {
                let (_, inv) = ln_stats(xr);
                let cf = c as f64;
                let gm = gr.iter().map(|v| v.as_f64()).sum::<f64>() / cf;
                let gy = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / cf;
                for ((dv, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = E::of(inv * (gg.as_f64() - gm - y.as_f64() * gy));
                }
            }
            grads[0] = Some(TensorOf::from_parts(x.shape().to_vec(), d));
        }
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let scale = E::of(2.0 * g[0].as_f64() / a.numel() as f64);
            let diff: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| scale * (x - y)).collect();
            if need[1] {
                grads[1] = Some(TensorOf::from_parts(b.shape().to_vec(), diff.iter().map(|&v| -v).collect()));
            }
            if need[0] {
                grads[0] = Some(TensorOf::from_parts(a.shape().to_vec(), diff));
            }
        }
        Op::Sum => grads[0] = Some(TensorOf::full(inputs[0].shape().to_vec(), g[0])),
        Op::L2Norm => {
            let x = inputs[0];
            let c = x.cols();
            let mut d = vec![zero; x.numel()];
            for (i, (dr, xr)) in d.chunks_mut(c).zip(x.data().chunks(c)).enumerate() {
                let n = row_norm(xr);
                if n > 0.0 {
                    let s = g[i].as_f64() / n;
                    for (dv, v) in dr.iter_mut().zip(xr) {
                        *dv = E::of(s * v.as_f64());
                    }
                }
            }
            grads[0] = Some(TensorOf::from_parts(x.shape().to_vec(), d));
        }
        Op::Cosine => {
            let (a, b) = (inputs[0], inputs[1]);
            let c = a.cols();
            let mut da = vec![zero; a.numel()];
            let mut db = vec![zero; b.numel()];
            for (i, (ra, rb)) in a.data().chunks(c).zip(b.data().chunks(c)).enumerate() {
                let (cos, na, nb) = cosine_row(ra, rb);
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let gi = g[i].as_f64();
                for j in 0..c {
                    let (x, y) = (ra[j].as_f64(), rb[j].as_f64());
                    da[i * c + j] = E::of(gi * (y / (na * nb) - cos * x / (na * na)));
                    db[i * c + j] = E::of(gi * (x / (na * nb) - cos * y / (nb * nb)));
                }
            }
            if need[0] {
                grads[0] = Some(TensorOf::from_parts(a.shape().to_vec(), da));
            }
            if need[1] {
                grads[1] = Some(TensorOf::from_parts(b.shape().to_vec(), db));
            }
        }
        Op::RowNormalize => {
            let x = inputs[0];
            let c = x.cols();
            let mut d = vec![zero; x.numel()];
            for ((dr, xr), (yr, gr)) in d
                .chunks_mut(c)
                .zip(x.data().chunks(c))
                .zip(out.data().chunks(c).zip(g.chunks(c)))
            {
                let n = row_norm(xr).max(NORM_FLOOR);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                for ((dv, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = E::of((gg.as_f64() - y.as_f64() * dot) / n);
                }
            }
            grads[0] = Some(TensorOf::from_parts(x.shape().to_vec(), d));
        }
    }
    for (gr, &n) in grads.iter_mut().zip(need) {
        if !n {
            *gr = None;
        }
    }
    grads
}
