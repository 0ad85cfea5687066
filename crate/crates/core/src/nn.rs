//! Small building blocks shared by the three models.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use rand::Rng;

use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::{AdamState, Element, Tape, Tensor, Var};

/// Affine layer `x W + b` stored as two parameter slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    /// Weights drawn from `N(0, gain / d_in)`, zero bias.
    pub fn new<R: Rng>(p: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f32, rng: &mut R) -> Self {
        let std = (gain / d_in as f32).sqrt();
        let w = p.add(format!("{name}.w"), Tensor::randn(vec![d_in, d_out], std, rng));
        let b = p.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Self { w, b }
    }

    pub fn apply<'t, E: Element>(&self, vars: &[Var<'t, E>], x: Var<'t, E>) -> Result<Var<'t, E>> {
        x.linear(vars[self.w], vars[self.b])
    }
}

pub fn index(v: impl IntoIterator<Item = usize>) -> Arc<Vec<Option<usize>>> {
    Arc::new(v.into_iter().map(Some).collect())
}

/// Row gather of `rows` from a `(n, ...)` tensor outside any tape.
pub fn take_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let stride = t.numel() / n;
    let mut data = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        if r >= n {
            return Err(Error::shape("take_rows", format!("row {r} of {n}")));
        }
        data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or(Error::EmptyDataset)?;
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Shuffled minibatches covering `0..n`; the last batch may be short.
pub fn epoch_batches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// One optimizer step on every parameter in `params`; returns the loss.
pub fn train_step<F>(params: &mut ParamStore, adam: &mut AdamState, loss_fn: F) -> Result<f64>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params.bind(&tape, true);
    let loss = loss_fn(&tape, &vars)?;
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let g = tape.backward(loss)?;
    let grads: Vec<Option<Tensor>> = vars.iter().map(|v| Some(g.get(*v))).collect();
    adam.step(&mut params.tensors_mut(), &grads)?;
    Ok(value)
}

/// Mean of a per-step loss series.
pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Optimizer schedule shared by the model trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}
