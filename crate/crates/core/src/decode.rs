//! Ridge regression from voxels to feature spaces, cross-validated accuracy
//! and top-fraction feature selection.
//!
//! Matrices follow the samples-as-columns convention: voxels `X` are
//! `(n_voxels, n)` and targets `Y` are `(dims, n)`. Solves run in `f64`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pearson;
use crate::rng;

pub use nalgebra::DMatrix as Matrix;

pub const LAMBDA_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

/// How voxels are transformed before the solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// No centering and no bias.
    Raw,
    /// Voxels and targets centered; bias from the means.
    Center,
    /// Voxels z-scored with training statistics, targets centered.
    #[default]
    Standardize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeDecoder {
    /// `(dims, n_voxels)` in the preprocessed voxel space.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub lambda: f64,
    pub preprocess: Preprocess,
    pub voxel_mean: DVector<f64>,
    pub voxel_scale: DVector<f64>,
}

struct Prepared {
    x: DMatrix<f64>,
    mean: DVector<f64>,
    scale: DVector<f64>,
}

fn prepare(x: &DMatrix<f64>, pre: Preprocess) -> Prepared {
    let (v, n) = x.shape();
    let mut mean = DVector::zeros(v);
    let mut scale = DVector::from_element(v, 1.0);
    if pre != Preprocess::Raw {
        for i in 0..v {
            let row = x.row(i);
            let m = row.sum() / n as f64;
            mean[i] = m;
            if pre == Preprocess::Standardize {
                let var = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
                scale[i] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
    }
    Prepared {
        x: apply_stats(x, &mean, &scale),
        mean,
        scale,
    }
}

fn apply_stats(x: &DMatrix<f64>, mean: &DVector<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        for a in row.iter_mut() {
            *a = (*a - mean[i]) / scale[i];
        }
    }
    out
}

fn target_means(y: &DMatrix<f64>, pre: Preprocess) -> DVector<f64> {
    let n = y.ncols() as f64;
    match pre {
        Preprocess::Raw => DVector::zeros(y.nrows()),
        _ => DVector::from_iterator(y.nrows(), y.row_iter().map(|r| r.sum() / n)),
    }
}

fn check_dims(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} voxel samples vs {} target samples",
            x.ncols(),
            y.ncols()
        )));
    }
    if x.ncols() < 2 {
        return Err(Error::TooFewSamples { need: 2, got: x.ncols() });
    }
    if !(lambda >= 0.0) {
        return Err(Error::BadRange(format!("lambda {lambda} must be non-negative")));
    }
    Ok(())
}

/// Closed form `W = Y X^T (X X^T + lambda I)^-1` via Cholesky.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, pre: Preprocess) -> Result<RidgeDecoder> {
    check_dims(x, y, lambda)?;
    let p = prepare(x, pre);
    let ym = target_means(y, pre);
    let mut yc = y.clone();
    for (i, mut row) in yc.row_iter_mut().enumerate() {
        row.add_scalar_mut(-ym[i]);
    }
    let mut gram = &p.x * p.x.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let chol = Cholesky::new(gram).ok_or(Error::SingularSystem)?;
    let rhs = &p.x * yc.transpose();
    let wt = chol.solve(&rhs);
    if !wt.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let weights = wt.transpose();
    let bias = ym;
    Ok(RidgeDecoder {
        weights,
        bias,
        lambda,
        preprocess: pre,
        voxel_mean: p.mean,
        voxel_scale: p.scale,
    })
}

impl RidgeDecoder {
    pub fn n_voxels(&self) -> usize {
        self.weights.ncols()
    }

    pub fn dims(&self) -> usize {
        self.weights.nrows()
    }

    /// Predictions for voxel columns `(n_voxels, n)`.
    pub fn predict_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n_voxels() {
            return Err(Error::DimensionMismatch(format!(
                "{} voxels for a decoder fit on {}",
                x.nrows(),
                self.n_voxels()
            )));
        }
        let xs = apply_stats(x, &self.voxel_mean, &self.voxel_scale);
        let mut out = &self.weights * xs;
        for mut col in out.column_iter_mut() {
            col += &self.bias;
        }
        Ok(out)
    }

    /// Weights and bias acting on raw voxels.
    pub fn effective_weights(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut w = self.weights.clone();
        for (j, mut col) in w.column_iter_mut().enumerate() {
            col /= self.voxel_scale[j];
        }
        let b = &self.bias - &w * &self.voxel_mean;
        (w, b)
    }

    /// Rows `dims` of this decoder as a decoder of its own.
    pub fn restrict(&self, dims: &[usize]) -> RidgeDecoder {
        RidgeDecoder {
            weights: self.weights.select_rows(dims),
            bias: self.bias.select_rows(dims),
            ..self.clone()
        }
    }
}

/// Fold id of every sample: a seeded shuffle cut into contiguous chunks.
pub fn fold_assignment(n: usize, k_folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "cv-folds", 0));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos * k_folds / n;
    }
    fold
}

/// Out-of-fold Pearson r of every target dim for each lambda in `lambdas`.
///
/// Each fold is solved once through an eigendecomposition of the training
/// Gram matrix, so extra lambdas cost one matrix product each.
pub fn cv_accuracy_grid(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambdas: &[f64],
    k_folds: usize,
    seed: u64,
    pre: Preprocess,
) -> Result<Vec<Vec<f64>>> {
    for &l in lambdas {
        check_dims(x, y, l)?;
    }
    let n = x.ncols();
    if k_folds < 2 || n < k_folds {
        return Err(Error::TooFewSamples {
            need: k_folds.max(2),
            got: n,
        });
    }
    let fold = fold_assignment(n, k_folds, seed);
    let d = y.nrows();
    let mut preds: Vec<DMatrix<f64>> = lambdas.iter().map(|_| DMatrix::zeros(d, n)).collect();
    for k in 0..k_folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == k).collect();
        let xtr = x.select_columns(&train);
        let ytr = y.select_columns(&train);
        let p = prepare(&xtr, pre);
        let ym = target_means(&ytr, pre);
        let mut yc = ytr;
        for (i, mut row) in yc.row_iter_mut().enumerate() {
            row.add_scalar_mut(-ym[i]);
        }
        let eig = SymmetricEigen::new(&p.x * p.x.transpose());
        let q = &eig.eigenvectors;
        let c = q.transpose() * (&p.x * yc.transpose());
        let xte = apply_stats(&x.select_columns(&test), &p.mean, &p.scale);
        let pt = xte.transpose() * q;
        for (li, &lambda) in lambdas.iter().enumerate() {
            let mut scaled = c.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                let denom = eig.eigenvalues[i].max(0.0) + lambda;
                if denom <= 1e-12 {
                    return Err(Error::SingularSystem);
                }
                row /= denom;
            }
            let out = &pt * scaled;
            for (ti, &col) in test.iter().enumerate() {
                for j in 0..d {
                    preds[li][(j, col)] = out[(ti, j)] + ym[j];
                }
            }
        }
    }
    Ok(preds
        .iter()
        .map(|p| {
            (0..d)
                .map(|j| {
                    let a: Vec<f64> = p.row(j).iter().copied().collect();
                    let b: Vec<f64> = y.row(j).iter().copied().collect();
                    pearson(&a, &b)
                })
                .collect()
        })
        .collect())
}

/// Out-of-fold Pearson r of every target dim.
pub fn cv_accuracy(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    k_folds: usize,
    seed: u64,
    pre: Preprocess,
) -> Result<Vec<f64>> {
    Ok(cv_accuracy_grid(x, y, &[lambda], k_folds, seed, pre)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub r: Vec<f64>,
    pub keep: Vec<bool>,
    pub fraction: f64,
}

impl FeatureMask {
    pub fn all(dims: usize) -> Self {
        Self {
            r: vec![1.0; dims],
            keep: vec![true; dims],
            fraction: 1.0,
        }
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Keeps the `round(fraction * D)` dims of highest r; ties go to the lower
/// index, and NaN ranks last.
pub fn select_features(r: &[f64], fraction: f64) -> Result<FeatureMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::BadFraction(fraction));
    }
    let keep_n = (fraction * r.len() as f64).round() as usize;
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| key(r[b]).total_cmp(&key(r[a])).then(a.cmp(&b)));
    let mut keep = vec![false; r.len()];
    for &i in &order[..keep_n] {
        keep[i] = true;
    }
    Ok(FeatureMask {
        r: r.to_vec(),
        keep,
        fraction,
    })
}

/// A decoded feature vector; `present[i]` is false for dims outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub values: Vec<f64>,
    pub present: Vec<bool>,
}

/// Decoder for one feature space, fit on the kept dims only.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDecoder {
    pub decoder: RidgeDecoder,
    pub mask: FeatureMask,
}

impl FeatureDecoder {
    pub fn dims(&self) -> usize {
        self.mask.keep.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        predict(&self.decoder, Some(&self.mask), x)
    }
}

/// Decodes one voxel vector. With a mask the decoder holds one row per kept
/// dim and the result is scattered back to full length.
pub fn predict(decoder: &RidgeDecoder, mask: Option<&FeatureMask>, x: &[f64]) -> Result<Prediction> {
    let col = DMatrix::from_column_slice(x.len(), 1, x);
    let out = decoder.predict_matrix(&col)?;
    match mask {
        None => Ok(Prediction {
            values: out.iter().copied().collect(),
            present: vec![true; out.nrows()],
        }),
        Some(m) => {
            let kept = m.kept();
            if kept.len() != out.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "mask keeps {} dims, decoder has {}",
                    kept.len(),
                    out.nrows()
                )));
            }
            let mut values = vec![0.0; m.keep.len()];
            for (row, &dim) in kept.iter().enumerate() {
                values[dim] = out[(row, 0)];
            }
            Ok(Prediction {
                values,
                present: m.keep.clone(),
            })
        }
    }
}

/// Settings of a full decoder fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub lambdas: Vec<f64>,
    pub k_folds: usize,
    pub fold_seed: u64,
    pub keep_fraction: f64,
    pub preprocess: Preprocess,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            lambdas: LAMBDA_GRID.to_vec(),
            k_folds: 5,
            fold_seed: 0,
            keep_fraction: 0.25,
            preprocess: Preprocess::Standardize,
        }
    }
}

/// Picks lambda by mean CV r, selects dims when `select`, and refits on all
/// samples. Returns the decoder and the mean CV r at the chosen lambda.
pub fn fit_feature_space(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    select: bool,
    cfg: &DecodeConfig,
) -> Result<(FeatureDecoder, f64)> {
    let grid = cv_accuracy_grid(x, y, &cfg.lambdas, cfg.k_folds, cfg.fold_seed, cfg.preprocess)?;
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len().max(1) as f64;
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(i, r)| (i, mean(r)))
        .fold((0, f64::NEG_INFINITY), |acc, (i, m)| if m > acc.1 { (i, m) } else { acc });
    let r = &grid[best];
    let mask = if select {
        select_features(r, cfg.keep_fraction)?
    } else {
        FeatureMask {
            r: r.clone(),
            keep: vec![true; r.len()],
            fraction: 1.0,
        }
    };
    let kept = mask.kept();
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter(cfg.keep_fraction));
    }
    let decoder = fit_ridge(x, &y.select_rows(&kept), cfg.lambdas[best], cfg.preprocess)?;
    Ok((FeatureDecoder { decoder, mask }, mean(r)))
}
