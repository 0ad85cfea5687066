use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued function that can be evaluated at any element precision.
///
/// The tape gradient is taken in `f32`; the finite-difference oracle replays
/// the same function in `f64`.
pub trait ScalarFn {
    fn eval<'t, E: Element>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>>;
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference half step, scaled by `max(1, |x_i|)`.
    pub step: f64,
    pub tol: f64,
    /// Check only a seeded random subset of coordinates.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
    /// Set when the function itself failed to evaluate.
    pub failure: Option<String>,
}

/// Compares the tape gradient of `f` at `x` against `f64` central differences.
///
/// The error of coordinate `i` is `|a_i - b_i| / max(|a_i|, |b_i|, s)` where
/// `s` is 1% of the largest finite-difference component (or `1e-12`), so
/// coordinates that are numerically zero do not dominate the report.
pub fn grad_check<F: ScalarFn>(f: &F, x: &Tensor, cfg: &GradCheck) -> GradCheckReport {
    match run(f, x, cfg) {
        Ok(r) => r,
        Err(e) => GradCheckReport {
            max_rel_err: f64::INFINITY,
            worst_index: 0,
            checked: 0,
            tol: cfg.tol,
            passed: false,
            failure: Some(e.to_string()),
        },
    }
}

fn eval64<F: ScalarFn>(f: &F, x: &[f64], shape: &[usize]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let v = tape.leaf(super::TensorOf::new(shape.to_vec(), x.to_vec())?);
    let out = f.eval(&tape, v)?;
    let val = out.value();
    if val.numel() != 1 {
        return Err(Error::NotScalarLoss(val.shape().to_vec()));
    }
    Ok(val.item())
}

fn run<F: ScalarFn>(f: &F, x: &Tensor, cfg: &GradCheck) -> Result<GradCheckReport> {
    let tape = Tape::<f32>::new();
    let xv = tape.leaf(x.clone());
    let loss = f.eval(&tape, xv)?;
    let analytic = tape.backward(loss)?.get(xv);

    let n = x.numel();
    let coords: Vec<usize> = match cfg.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };

    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = base.clone();
    for &i in &coords {
        let h = cfg.step * base[i].abs().max(1.0);
        probe[i] = base[i] + h;
        let up = eval64(f, &probe, x.shape())?;
        probe[i] = base[i] - h;
        let down = eval64(f, &probe, x.shape())?;
        probe[i] = base[i];
        numeric.push((up - down) / (2.0 * h));
    }

    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (0.01 * scale).max(1e-12);
    let mut worst = (0.0f64, 0usize);
    for (k, &i) in coords.iter().enumerate() {
        let a = analytic.data()[i] as f64;
        let b = numeric[k];
        let err = (a - b).abs() / a.abs().max(b.abs()).max(floor);
        if !err.is_finite() || err > worst.0 {
            worst = (if err.is_finite() { err } else { f64::INFINITY }, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
        tol: cfg.tol,
        passed: worst.0 <= cfg.tol,
        failure: None,
    })
}
