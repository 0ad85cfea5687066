//! Finite-difference battery over every op kind, a deep composite, and the
//! Stage-2 objective as a function of `(c, z)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::{self, PipelineConfig};
use crate::reconstruct::{self, Models, TapTarget};
use crate::rng;
use crate::tensor::{concat, grad_check, Element, GradCheck, ScalarFn, Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

/// One way of feeding a random input through a single op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    MatMulLhs,
    MatMulRhs,
    BatchMatMulLhs,
    BatchMatMulRhs,
    BatchMatMulShared,
    Add,
    AddRow,
    Sub,
    SubRow,
    MulRow,
    MulScalar,
    MulSelf,
    Scale,
    Reshape,
    Transpose,
    Transpose3,
    RowSlice,
    ConcatRows,
    ConcatLast,
    Gather,
    Softmax,
    LogSoftmax,
    Silu,
    Tanh,
    Sigmoid,
    LayerNorm,
    Mse,
    Sum,
    L2Norm,
    CosineLhs,
    CosineRhs,
    RowNormalize,
}

pub const PROBES: [Probe; 32] = [
    Probe::MatMulLhs,
    Probe::MatMulRhs,
    Probe::BatchMatMulLhs,
    Probe::BatchMatMulRhs,
    Probe::BatchMatMulShared,
    Probe::Add,
    Probe::AddRow,
    Probe::Sub,
    Probe::SubRow,
    Probe::MulRow,
    Probe::MulScalar,
    Probe::MulSelf,
    Probe::Scale,
    Probe::Reshape,
    Probe::Transpose,
    Probe::Transpose3,
    Probe::RowSlice,
    Probe::ConcatRows,
    Probe::ConcatLast,
    Probe::Gather,
    Probe::Softmax,
    Probe::LogSoftmax,
    Probe::Silu,
    Probe::Tanh,
    Probe::Sigmoid,
    Probe::LayerNorm,
    Probe::Mse,
    Probe::Sum,
    Probe::L2Norm,
    Probe::CosineLhs,
    Probe::CosineRhs,
    Probe::RowNormalize,
];

impl Probe {
    fn norm_based(self) -> bool {
        matches!(self, Probe::CosineLhs | Probe::CosineRhs | Probe::RowNormalize | Probe::L2Norm)
    }

    /// Shape of the differentiated input and of each constant operand.
    fn shapes(self) -> (Vec<usize>, Vec<Vec<usize>>) {
        use Probe::*;
        match self {
            MatMulLhs => (vec![3, 4], vec![vec![4, 2]]),
            MatMulRhs => (vec![3, 4], vec![vec![2, 3]]),
            BatchMatMulLhs => (vec![2, 3, 4], vec![vec![2, 4, 2]]),
            BatchMatMulRhs => (vec![2, 4, 2], vec![vec![2, 3, 4]]),
            BatchMatMulShared => (vec![4, 2], vec![vec![2, 3, 4]]),
            Add | Sub | Mse | CosineLhs | CosineRhs => (vec![3, 4], vec![vec![3, 4]]),
            AddRow | SubRow | MulRow => (vec![4], vec![vec![3, 4]]),
            MulScalar => (vec![1], vec![vec![3, 4]]),
            Transpose3 => (vec![2, 3, 4], vec![]),
            RowSlice => (vec![4, 3], vec![]),
            ConcatRows => (vec![2, 3], vec![vec![1, 3]]),
            ConcatLast => (vec![2, 3], vec![vec![2, 1]]),
            Gather => (vec![3, 2], vec![]),
            Softmax | LogSoftmax => (vec![3, 5], vec![]),
            LayerNorm => (vec![3, 6], vec![]),
            _ => (vec![3, 4], vec![]),
        }
    }

    pub fn name(self) -> String {
        let s = format!("{self:?}");
        let mut out = String::new();
        for (i, ch) in s.chars().enumerate() {
            if ch.is_uppercase() && i > 0 {
                out.push('_');
            }
            out.push(ch.to_ascii_lowercase());
        }
        out
    }

    fn apply<'t, E: Element>(self, x: Var<'t, E>, k: &[Var<'t, E>]) -> Result<Var<'t, E>> {
        use Probe::*;
        match self {
            MatMulLhs | BatchMatMulLhs => x.matmul(k[0]),
            MatMulRhs | BatchMatMulRhs | BatchMatMulShared => k[0].matmul(x),
            Add => x.add(k[0]),
            AddRow => k[0].add(x),
            Sub => k[0].sub(x),
            SubRow => k[0].sub(x),
            MulRow | MulScalar => k[0].mul(x),
            MulSelf => x.mul(x),
            Scale => x.scale(1.7),
            Reshape => x.reshape(vec![2, 6]),
            Transpose | Transpose3 => x.transpose(),
            RowSlice => x.rows(1, 3),
            ConcatRows => concat(&[x, k[0]], false),
            ConcatLast => concat(&[k[0], x], true),
            Gather => x.gather(Arc::new(vec![Some(2), None, Some(0), Some(2)])),
            Softmax => x.softmax(),
            LogSoftmax => x.log_softmax(),
            Silu => x.silu(),
            Tanh => x.tanh(),
            Sigmoid => x.sigmoid(),
            LayerNorm => x.layer_norm(),
            Mse => x.mse(k[0]),
            Sum => x.sum(),
            L2Norm => x.l2_norm(),
            CosineLhs => x.cosine(k[0]),
            CosineRhs => k[0].cosine(x),
            RowNormalize => x.normalize(),
        }
    }
}

/// `sum(w * op(x, consts))` with seeded constants and read-out weights.
struct ProbeFn {
    probe: Probe,
    seed: u64,
    consts: Vec<Tensor>,
}

impl ScalarFn for ProbeFn {
    fn eval<'t, E: Element>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let k: Vec<Var<'t, E>> = self.consts.iter().map(|c| tape.constant(c.cast())).collect();
        let y = self.probe.apply(x, &k)?;
        let w = rng::gaussian(self.seed, "probe-readout", 0, y.shape());
        y.mul(tape.constant(w.cast()))?.sum()
    }
}

/// Worst result of one probe over many seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    /// Smallest reproducing case: the first seed that failed.
    pub first_failure: Option<u64>,
    pub failures: usize,
    pub seeds: usize,
    pub tol: f64,
}

impl ProbeReport {
    fn new(name: String, tol: f64) -> Self {
        Self {
            name,
            max_rel_err: 0.0,
            worst_seed: 0,
            first_failure: None,
            failures: 0,
            seeds: 0,
            tol,
        }
    }

    fn add(&mut self, seed: u64, r: &crate::tensor::GradCheckReport) {
        self.seeds += 1;
        if !r.passed {
            self.failures += 1;
            self.first_failure.get_or_insert(seed);
        }
        let err = if r.max_rel_err.is_nan() { f64::INFINITY } else { r.max_rel_err };
        if err > self.max_rel_err || self.seeds == 1 {
            self.max_rel_err = err;
            self.worst_seed = seed;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn battery<F: ScalarFn>(
    name: String,
    seeds: impl Iterator<Item = u64>,
    tol: f64,
    max_coords: Option<usize>,
    make: impl Fn(u64) -> (F, Tensor),
) -> ProbeReport {
    let mut rep = ProbeReport::new(name, tol);
    for seed in seeds {
        let (f, x) = make(seed);
        let cfg = GradCheck {
            tol,
            max_coords,
            seed,
            ..GradCheck::default()
        };
        rep.add(seed, &grad_check(&f, &x, &cfg));
    }
    rep
}

fn seeds(master: u64, label: &str, n: usize) -> impl Iterator<Item = u64> + '_ {
    let label = label.to_string();
    (0..n as u64).map(move |i| rng::derive_seed(master, &label, i))
}

/// Rescales rows (about their mean if `centered`) whose norm is below 1 up
/// to 1. Row norms are singular at zero, where a fixed finite-difference
/// step stops resolving the curvature.
fn rows_away_from_zero(mut t: Tensor, centered: bool) -> Tensor {
    let d = *t.shape().last().expect("probe inputs have rank >= 1");
    for row in t.data_mut().chunks_mut(d) {
        let m = if centered { row.iter().sum::<f32>() / d as f32 } else { 0.0 };
        let n = row.iter().map(|v| (v - m) * (v - m)).sum::<f32>().sqrt();
        if n < 1.0 {
            for (k, v) in row.iter_mut().enumerate() {
                let dev = if n > 0.0 { (*v - m) / n } else if k % 2 == 0 { 1.0 } else { -1.0 };
                *v = m + dev;
            }
        }
    }
    t
}

/// Every probe at `OP_TOLERANCE` over `n_seeds` random inputs.
pub fn op_battery(master: u64, n_seeds: usize) -> Vec<ProbeReport> {
    PROBES
        .iter()
        .map(|&p| {
            battery(p.name(), seeds(master, "op-battery", n_seeds), OP_TOLERANCE, None, |seed| {
                let (xs, cs) = p.shapes();
                let fix = |t: Tensor| match p {
                    Probe::LayerNorm => rows_away_from_zero(t, true),
                    _ if p.norm_based() => rows_away_from_zero(t, false),
                    _ => t,
                };
                let consts = cs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| fix(rng::gaussian(seed, "probe-const", i as u64, s.clone())))
                    .collect();
                let x = fix(rng::gaussian(seed, "probe-input", 0, xs));
                (ProbeFn { probe: p, seed, consts }, x)
            })
        })
        .collect()
}

/// Two attention-style blocks: well over ten recorded ops.
struct DeepComposite {
    w1: Tensor,
    w2: Tensor,
    target: Tensor,
}

impl ScalarFn for DeepComposite {
    fn eval<'t, E: Element>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let w1 = tape.constant(self.w1.cast());
        let w2 = tape.constant(self.w2.cast());
        let mut h = x;
        for _ in 0..2 {
            let n = h.layer_norm()?;
            let att = n.matmul(n.transpose()?)?.scale(0.5)?.softmax()?;
            h = h.add(att.matmul(n)?)?;
            let m = n.matmul(w1)?.silu()?.matmul(w2)?.tanh()?;
            h = h.add(m)?;
        }
        let out = h.normalize()?;
        out.cosine(tape.constant(self.target.cast()))?.sum()?.add(h.mse(tape.constant(self.target.cast()))?)
    }
}

pub fn composite_battery(master: u64, n_seeds: usize) -> ProbeReport {
    battery("deep_composite".into(), seeds(master, "composite", n_seeds), COMPOSITE_TOLERANCE, None, |seed| {
        let f = DeepComposite {
            w1: rng::gaussian(seed, "w1", 0, vec![4, 6]).map(|v| v * 0.5),
            w2: rng::gaussian(seed, "w2", 0, vec![6, 4]).map(|v| v * 0.5),
            target: rng::gaussian(seed, "target", 0, vec![3, 4]),
        };
        (f, rows_away_from_zero(rng::gaussian(seed, "x", 0, vec![3, 4]), true))
    })
}

/// The Stage-2 objective over the concatenation `[c, z]`.
pub struct Stage2Objective<'m> {
    pub models: &'m Models,
    pub chain: crate::diffusion::DenoisingChain,
    pub positions: Vec<usize>,
    pub targets: Vec<TapTarget>,
}

impl Stage2Objective<'_> {
    pub fn split(&self) -> (usize, usize) {
        let cfg = &self.models.denoiser.config;
        (cfg.cond_dim(), cfg.latent_dim())
    }
}

impl ScalarFn for Stage2Objective<'_> {
    fn eval<'t, E: Element>(&self, _tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let (cd, zd) = self.split();
        let col = x.reshape(vec![cd + zd, 1])?;
        let c = col.rows(0, cd)?.reshape(vec![cd])?;
        let z = col.rows(cd, cd + zd)?.reshape(vec![zd])?;
        let g = reconstruct::generate(self.models, &self.chain, c, z, Some((&self.positions, &self.targets)))?;
        Ok(g.loss.expect("targets given"))
    }
}

/// Untrained models of the tiny configuration.
pub fn tiny_models() -> Result<Models> {
    pipeline::fresh_models(&PipelineConfig::tiny().train)
}

/// A random Stage-2 problem: frozen chain, masked targets from another
/// image's taps, and a starting point `[c, z]`.
pub fn stage2_problem(models: &Models, seed: u64) -> Result<(Stage2Objective<'_>, Tensor)> {
    let cfg = PipelineConfig::tiny().reconstruct;
    let dcfg = &models.denoiser.config;
    let t_start = cfg.t_start(&models.schedule)?;
    let chain = crate::diffusion::DenoisingChain::new(&models.schedule, t_start, cfg.stride, seed, dcfg.latent_dim())?;
    let other = Tensor::uniform(vec![crate::image::SIZE, crate::image::SIZE, 3], 0.0, 1.0, &mut rng::stream(seed, "target-image", 0));
    let feats = models.encoder.image_features(&other)?;
    let positions: Vec<usize> = (0..models.encoder.config.taps.len()).collect();
    let targets = feats
        .taps
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut r = rng::stream(seed, "target-mask", k as u64);
            TapTarget {
                values: t.clone(),
                mask: (0..t.numel()).map(|_| rand::Rng::random_bool(&mut r, 0.25)).collect(),
            }
        })
        .collect();
    let x = rng::gaussian(seed, "stage2-start", 0, vec![dcfg.cond_dim() + dcfg.latent_dim()]);
    Ok((
        Stage2Objective {
            models,
            chain,
            positions,
            targets,
        },
        x,
    ))
}

/// Stage-2 gradient against finite differences on `coords` random
/// coordinates per seed.
pub fn stage2_battery(models: &Models, master: u64, n_seeds: usize, coords: usize) -> Result<ProbeReport> {
    let problems: Vec<(Stage2Objective<'_>, Tensor)> = seeds(master, "stage2-grad", n_seeds)
        .map(|s| stage2_problem(models, s))
        .collect::<Result<_>>()?;
    let mut rep = ProbeReport::new("stage2_composite".into(), COMPOSITE_TOLERANCE);
    for ((f, x), seed) in problems.iter().zip(seeds(master, "stage2-grad", n_seeds)) {
        let cfg = GradCheck {
            tol: COMPOSITE_TOLERANCE,
            max_coords: Some(coords),
            seed,
            ..GradCheck::default()
        };
        rep.add(seed, &grad_check(f, x, &cfg));
    }
    Ok(rep)
}
