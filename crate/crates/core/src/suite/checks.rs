//! The check behind every registered invariant.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::gradients::{self, COMPOSITE_TOLERANCE, OP_TOLERANCE};
use super::registry::{self, Outcome, SuiteContext};
use crate::autoencoder::{Autoencoder, AutoencoderConfig};
use crate::commands;
use crate::decode::{self, DecodeConfig, Matrix, Preprocess};
use crate::diffusion::{self, denoising_loss, forward_noise, DiffusionSchedule};
use crate::encoder::{ContrastiveEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::SIZE;
use crate::metrics;
use crate::neurosim::{self, FeatureLayout, SceneFeatures, SceneRecord, SimConfig, SubjectModel};
use crate::pipeline::{PipelineConfig, Variant, ALL_STAGES};
use crate::reconstruct::{self, ReconstructionConfig, TapTarget};
use crate::rng::{self, derive_seed};
use crate::store::ParamStore;
use crate::tensor::{forward_op, grad_check, Element, GradCheck, Op, ScalarFn, Tape, Tensor, TensorOf, Var};

fn seeds(ctx: &SuiteContext, label: &str, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(ctx.seed, label, i)).collect()
}

fn scene_image(seed: u64) -> Tensor {
    neurosim::render(&neurosim::sample_scene(&mut rng::stream(seed, "scene", 0)))
}

fn noise_image(seed: u64) -> Tensor {
    Tensor::uniform(vec![SIZE, SIZE, 3], 0.0, 1.0, &mut rng::stream(seed, "noise-image", 0))
}

fn tiny() -> PipelineConfig {
    PipelineConfig::tiny()
}

/// Scratch directory removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new(label: &str) -> Result<Self> {
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        let n = NEXT.fetch_add(1, Ordering::Relaxed);
        let p = std::env::temp_dir().join(format!("mindkit-check-{}-{label}-{n}", std::process::id()));
        if p.exists() {
            std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Self(p))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

// --------------------------------------------------------- tensor_autodiff

pub fn op_gradients(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(OP_TOLERANCE);
    let mut reports = gradients::op_battery(ctx.seed, ctx.trials);
    reports.push(gradients::composite_battery(ctx.seed, ctx.trials));
    for r in &reports {
        o.measure(format!("{}.max_rel_err", r.name), r.max_rel_err);
        o.require(r.passed(), r.first_failure.unwrap_or(r.worst_seed), || {
            format!(
                "{} failed on {} of {} seeds (max rel err {:.3e}, tol {:.0e})",
                r.name, r.failures, r.seeds, r.max_rel_err, r.tol
            )
        });
    }
    o.measure("composite_tolerance", COMPOSITE_TOLERANCE);
    Ok(o)
}

pub fn softmax_rows(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-6;
    let mut o = Outcome::new(tol);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for seed in seeds(ctx, "softmax", ctx.trials) {
        let x = rng::gaussian(seed, "x", 0, vec![4, 7]).map(|v| 2.0 * v);
        let y32 = forward_op(&Op::Softmax, &[&x])?;
        let x64: TensorOf<f64> = x.cast();
        let y64 = forward_op(&Op::Softmax, &[&x64])?;
        for r in 0..4 {
            worst32 = worst32.max((y32.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            worst64 = worst64.max((y64.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        let open = y64.data().iter().all(|&v| v > 0.0 && v < 1.0);
        o.require(open, seed, || "softmax output outside (0, 1)".into());
        o.require(worst32 <= tol && worst64 <= tol, seed, || format!("row sum off by {worst32:.2e}"));
    }
    o.measure("max_row_sum_err_f32", worst32).measure("max_row_sum_err_f64", worst64);
    Ok(o)
}

fn deep_loss<'t>(x: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    let w = x.constant(w.clone());
    let h = x.matmul(w)?.layer_norm()?.silu()?;
    let a = h.matmul(h.transpose()?)?.softmax()?;
    a.matmul(h)?.tanh()?.sum_squares()?.add(h.l2_norm()?.sum()?)
}

pub fn backward_purity(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    for seed in seeds(ctx, "purity", ctx.trials) {
        let tape = Tape::new();
        let x = tape.leaf(rng::gaussian(seed, "x", 0, vec![4, 5]));
        let loss = deep_loss(x, &rng::gaussian(seed, "w", 0, vec![5, 6]))?;
        let g1 = tape.backward(loss)?.get(x);
        let g2 = tape.backward(loss)?.get(x);
        o.require(g1 == g2, seed, || "second backward pass differs".into());
    }
    Ok(o)
}

pub fn reshape_transpose_exact(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    for seed in seeds(ctx, "reshape", ctx.trials) {
        let xv = rng::gaussian(seed, "x", 0, vec![3, 4]);
        let w = rng::gaussian(seed, "w", 0, vec![3, 4]);
        let f = |through: bool| -> Result<Tensor> {
            let tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let y = if through {
                x.reshape(vec![2, 6])?.reshape(vec![3, 4])?.transpose()?.transpose()?
            } else {
                x
            };
            let loss = y.tanh()?.mul(tape.constant(w.clone()))?.sum()?;
            Ok(tape.backward(loss)?.get(x))
        };
        o.require(f(true)? == f(false)?, seed, || "identity reshape/transpose changed the gradient".into());
    }
    Ok(o)
}

// --------------------------------------------------------------- diffusion

pub fn schedule_monotone(_ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    for (name, s) in [("default", DiffusionSchedule::default()), ("tiny", crate::pipeline::schedule(&tiny().train.schedule)?)] {
        let gap = (1..=s.steps())
            .map(|t| s.alpha_bar(t - 1) - s.alpha_bar(t))
            .fold(f64::INFINITY, f64::min);
        o.measure(format!("{name}.min_gap"), gap);
        o.require(gap > 0.0, 0, || format!("alpha_bar not strictly decreasing in the {name} schedule"));
    }
    Ok(o)
}

fn mean_var(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

pub const MARGINAL_DRAWS: usize = 10_000;

pub fn forward_marginals(ctx: &SuiteContext) -> Result<Outcome> {
    let sched = DiffusionSchedule::default();
    let n = MARGINAL_DRAWS;
    let mut o = Outcome::new(3.0);
    let big_t = sched.steps();
    let z0 = 0.7f32;
    for t in [1, big_t / 2, big_t] {
        let ab = sched.alpha_bar(t);
        let eps = rng::gaussian(ctx.seed, "marginal-eps", t as u64, vec![n]);
        let x = forward_noise(&Tensor::full(vec![n], z0), t, &eps, &sched)?;
        let (m, v) = mean_var(x.data());
        let (em, ev) = (ab.sqrt() * z0 as f64, 1.0 - ab);
        let zm = (m - em) / (ev / n as f64).sqrt();
        let zv = (v - ev) / (ev * (2.0 / (n as f64 - 1.0)).sqrt());
        o.measure(format!("t{t}.mean_z"), zm).measure(format!("t{t}.var_z"), zv);
        o.require(zm.abs() <= 3.0 && zv.abs() <= 3.0, ctx.seed, || {
            format!("t={t}: mean {m:.5} vs {em:.5}, var {v:.5} vs {ev:.5}")
        });
        let z = rng::gaussian(ctx.seed, "marginal-z", t as u64, vec![n]);
        let y = forward_noise(&z, t, &eps, &sched)?;
        let (_, vz) = mean_var(z.data());
        let (_, vy) = mean_var(y.data());
        let pred = ab * vz + 1.0 - ab;
        let zp = (vy - pred) / (pred * (2.0 / (n as f64 - 1.0)).sqrt());
        o.measure(format!("t{t}.preserve_z"), zp);
        o.require(zp.abs() <= 3.0, ctx.seed, || format!("t={t}: variance {vy:.5} vs {pred:.5}"));
    }
    Ok(o)
}

pub fn denoising_loss_zero(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    for seed in seeds(ctx, "eps-loss", ctx.trials) {
        let e = rng::gaussian(seed, "e", 0, vec![2, 8]);
        let mut near = e.clone();
        let k = rng::stream(seed, "k", 0).random_range(0..16);
        near.data_mut()[k] += 1e-3;
        let tape = Tape::new();
        let ev = tape.constant(e.clone());
        let zero = denoising_loss(ev, tape.constant(e.clone()))?.value().item();
        let pos = denoising_loss(tape.constant(near), ev)?.value().item();
        o.require(zero == 0.0 && pos > 0.0, seed, || format!("loss {zero} at equality, {pos} off it"));
    }
    Ok(o)
}

pub fn sampling_chain_pure(ctx: &SuiteContext) -> Result<Outcome> {
    let models = gradients::tiny_models()?;
    let cfg = &models.denoiser.config;
    let mut o = Outcome::new(0.0);
    for seed in seeds(ctx, "chain", 5) {
        let z = rng::gaussian(seed, "z", 0, vec![cfg.latent_dim()]);
        let c = rng::gaussian(seed, "c", 0, vec![cfg.cond_dim()]);
        let run = |den: &diffusion::Denoiser, c: &Tensor| diffusion::sample_img2img(&z, c, 32, &models.schedule, den, seed, 4);
        let a = run(&models.denoiser, &c)?;
        let copy = models.denoiser.clone();
        let b = run(&copy, &c)?;
        let other = run(&models.denoiser, &c.map(|v| v + 0.5))?;
        o.require(a == b, seed, || "same inputs gave different samples".into());
        o.require(a != other, seed, || "condition had no effect on the sample".into());
    }
    Ok(o)
}

// ------------------------------------------------------------- autoencoder

pub fn roundtrip_shape(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    for (name, cfg) in [("tiny", tiny().train.autoencoder), ("default", AutoencoderConfig::default())] {
        let ae = Autoencoder::new(cfg, ctx.seed)?;
        let x = scene_image(ctx.seed);
        let y = ae.decode(&ae.encode(&x)?)?;
        o.require(y.shape() == x.shape(), ctx.seed, || format!("{name}: {:?} -> {:?}", x.shape(), y.shape()));
    }
    Ok(o)
}

struct DecodeReadout<'a> {
    ae: &'a Autoencoder,
    w: Tensor,
}

impl ScalarFn for DecodeReadout<'_> {
    fn eval<'t, E: Element>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let vars = self.ae.params.bind(tape, false);
        let d = self.ae.config.latent_dim();
        let img = self.ae.decode_var(&vars, x.reshape(vec![1, d])?)?;
        img.reshape(vec![SIZE * SIZE, 3])?.mul(tape.constant(self.w.cast()))?.sum()
    }
}

pub fn decode_gradient(ctx: &SuiteContext) -> Result<Outcome> {
    let ae = Autoencoder::new(tiny().train.autoencoder, ctx.seed)?;
    let mut o = Outcome::new(COMPOSITE_TOLERANCE);
    let mut worst = 0.0f64;
    for seed in seeds(ctx, "ae-grad", (ctx.trials / 10).max(3)) {
        let f = DecodeReadout {
            ae: &ae,
            w: rng::gaussian(seed, "w", 0, vec![SIZE * SIZE, 3]),
        };
        let z = rng::gaussian(seed, "z", 0, vec![ae.config.latent_dim()]);
        let r = grad_check(
            &f,
            &z,
            &GradCheck {
                tol: COMPOSITE_TOLERANCE,
                max_coords: Some(24),
                seed,
                ..GradCheck::default()
            },
        );
        worst = worst.max(r.max_rel_err);
        o.require(r.passed, seed, || format!("decode gradient rel err {:.3e}", r.max_rel_err));
    }
    o.measure("max_rel_err", worst);
    Ok(o)
}

/// Latents are channel-major (`channel * cells + cell`, cells row-major);
/// probed by locality of single-cell perturbations in both directions.
pub fn latent_layout(ctx: &SuiteContext) -> Result<Outcome> {
    let cfg = tiny().train.autoencoder;
    let ae = Autoencoder::new(cfg.clone(), ctx.seed)?;
    let (side, p, cells, lc) = (cfg.latent_side(), cfg.patch, cfg.cells(), cfg.latent_channels);
    let mut o = Outcome::new(0.0);
    let x = scene_image(ctx.seed);
    let z = ae.encode(&x)?;
    for (cy, cx, ch) in [(1usize, 2usize, 1usize), (side - 1, 0, lc - 1), (3, 5, 2)] {
        let cell = cy * side + cx;
        let mut x2 = x.clone();
        for py in cy * p..(cy + 1) * p {
            for px in cx * p..(cx + 1) * p {
                for k in 0..3 {
                    let v = &mut x2.data_mut()[(py * SIZE + px) * 3 + k];
                    *v = if *v < 0.5 { *v + 0.4 } else { *v - 0.4 };
                }
            }
        }
        let z2 = ae.encode(&x2)?;
        let changed: Vec<usize> = (0..z.numel()).filter(|&i| z.data()[i] != z2.data()[i]).collect();
        let ok = !changed.is_empty() && changed.iter().all(|&i| i % cells == cell);
        o.require(ok, ctx.seed, || format!("patch ({cy}, {cx}) changed latents {changed:?}"));

        let mut zb = z.clone();
        zb.data_mut()[ch * cells + cell] += 2.0;
        let (a, b) = (ae.decode(&z)?, ae.decode(&zb)?);
        let mut centre = false;
        let mut outside = false;
        for py in 0..SIZE {
            for px in 0..SIZE {
                let i = (py * SIZE + px) * 3;
                if a.data()[i..i + 3] != b.data()[i..i + 3] {
                    let (dy, dx) = ((py / p) as i64 - cy as i64, (px / p) as i64 - cx as i64);
                    centre |= dy == 0 && dx == 0;
                    outside |= dy.abs() > 1 || dx.abs() > 1;
                }
            }
        }
        o.require(centre && !outside, ctx.seed, || {
            format!("latent ({ch}, {cell}) is not read by cell ({cy}, {cx}) and its neighbours")
        });
    }
    Ok(o)
}

// ----------------------------------------------------- contrastive_encoder

pub fn shallow_taps(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let cfg = EncoderConfig::default();
    let max_tap = cfg.taps.iter().copied().max().unwrap_or(0);
    o.measure("blocks", cfg.blocks as f64).measure("deepest_tap", max_tap as f64);
    o.require(max_tap * 2 <= cfg.blocks, 0, || format!("tap {max_tap} is beyond the shallow half of {}", cfg.blocks));
    let recon = ReconstructionConfig::default();
    o.require(recon.taps.iter().all(|t| cfg.taps.contains(t)), 0, || "loss taps are not encoder taps".into());
    let enc = ContrastiveEncoder::new(cfg, ctx.seed)?;
    let x = scene_image(ctx.seed).reshaped(vec![1, SIZE, SIZE, 3])?;
    let tape = Tape::new();
    let vars = enc.params.bind(&tape, false);
    let full = enc.image_var(&vars, tape.constant(x.clone()), false)?;
    let short = enc.image_var(&vars, tape.constant(x), true)?;
    let same = full.taps.iter().zip(&short.taps).all(|(a, b)| *a.value() == *b.value());
    o.require(same && short.embedding.is_none(), ctx.seed, || "taps depend on blocks past the deepest tap".into());
    Ok(o)
}

pub fn image_features_pure(ctx: &SuiteContext) -> Result<Outcome> {
    let enc = ContrastiveEncoder::new(tiny().train.encoder, ctx.seed)?;
    let copy = enc.clone();
    let mut o = Outcome::new(0.0);
    for seed in seeds(ctx, "features", 5) {
        let x = scene_image(seed);
        let (a, b) = (enc.image_features(&x)?, copy.image_features(&x)?);
        o.require(a == b && a == enc.image_features(&x)?, seed, || "image features not reproducible".into());
    }
    Ok(o)
}

pub fn cosine_scale_invariant(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-6;
    let mut o = Outcome::new(tol);
    let mut worst = 0.0f64;
    for seed in seeds(ctx, "cosine-scale", ctx.trials) {
        let a = rng::gaussian(seed, "a", 0, vec![32]);
        let b = rng::gaussian(seed, "b", 0, vec![32]);
        let s = (2.0 * rng::gaussian(seed, "s", 0, vec![1]).item()).exp();
        let base = metrics::embedding_cosine(&a, &b);
        let d = (metrics::embedding_cosine(&a.map(|v| v * s), &b) - base)
            .abs()
            .max((metrics::embedding_cosine(&a, &b.map(|v| v * s)) - base).abs());
        worst = worst.max(d);
        o.require(d <= tol, seed, || format!("cosine moved by {d:.2e} under scale {s}"));
    }
    o.measure("max_abs_change", worst);
    Ok(o)
}

// ---------------------------------------------------------------- neurosim

fn probe_layout() -> FeatureLayout {
    FeatureLayout {
        c_dim: 16,
        z_dim: 24,
        tap_dims: vec![48],
    }
}

fn random_features(layout: &FeatureLayout, seed: u64) -> SceneFeatures {
    SceneFeatures {
        c: rng::gaussian(seed, "c", 0, vec![layout.c_dim]),
        z: rng::gaussian(seed, "z", 0, vec![layout.z_dim]),
        taps: layout
            .tap_dims
            .iter()
            .enumerate()
            .map(|(k, &d)| rng::gaussian(seed, "tap", k as u64, vec![d]))
            .collect(),
        weights_hash: "probe".into(),
    }
}

fn features_from(layout: &FeatureLayout, v: &[f32]) -> SceneFeatures {
    let g = layout.groups();
    let part = |k: usize| Tensor::vector(v[g[k].0..g[k].1].to_vec());
    SceneFeatures {
        c: part(0),
        z: part(1),
        taps: (2..g.len()).map(part).collect(),
        weights_hash: "probe".into(),
    }
}

fn record(features: SceneFeatures) -> SceneRecord {
    let mut r = SceneRecord::new(0, neurosim::sample_scene(&mut rng::stream(0, "scene", 0)));
    r.features = Some(features);
    r
}

fn probe_subject(seed: u64, sigma: f64) -> Result<SubjectModel> {
    let layout = probe_layout();
    let cfg = SimConfig {
        n_voxels: 64,
        sigma,
        ..SimConfig::default()
    };
    SubjectModel::new(seed, &layout, &vec![1.0; layout.total()], "probe", &cfg)
}

pub fn linear_response(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-5;
    let layout = probe_layout();
    let mut o = Outcome::new(tol);
    let mut worst = 0.0f64;
    for seed in seeds(ctx, "linear", ctx.trials / 4 + 1) {
        let subject = probe_subject(seed, 0.0)?;
        let f1 = random_features(&layout, derive_seed(seed, "f", 1)).concat();
        let f2 = random_features(&layout, derive_seed(seed, "f", 2)).concat();
        let a = 1.0 + rng::gaussian(seed, "a", 0, vec![1]).item().abs();
        let resp = |v: Vec<f32>| -> Result<Vec<f64>> {
            let r = neurosim::respond(&record(features_from(&layout, &v)), &subject, 1, &mut rng::stream(seed, "n", 0))?;
            Ok(r.averaged.to_f64_vec())
        };
        let sum: Vec<f32> = f1.iter().zip(&f2).map(|(x, y)| x + y).collect();
        let scaled: Vec<f32> = f1.iter().map(|x| a * x).collect();
        let (r1, r2, r12, ra) = (resp(f1.clone())?, resp(f2)?, resp(sum)?, resp(scaled)?);
        let scale = r1.iter().chain(&r2).fold(1.0f64, |m, v| m.max(v.abs()));
        let add = r12.iter().zip(r1.iter().zip(&r2)).map(|(s, (x, y))| (s - x - y).abs()).fold(0.0, f64::max);
        let hom = ra.iter().zip(&r1).map(|(s, x)| (s - a as f64 * x).abs()).fold(0.0, f64::max);
        let err = add.max(hom) / scale;
        worst = worst.max(err);
        o.require(err <= tol, seed, || format!("relative deviation from linearity {err:.2e}"));
    }
    o.measure("max_rel_deviation", worst);
    Ok(o)
}

pub fn trial_average_exact(ctx: &SuiteContext) -> Result<Outcome> {
    let layout = probe_layout();
    let mut o = Outcome::new(0.0);
    for seed in seeds(ctx, "trials", 10) {
        let subject = probe_subject(seed, 0.1)?;
        let r = neurosim::respond(&record(random_features(&layout, seed)), &subject, 3, &mut rng::stream(seed, "n", 0))?;
        let mean: Vec<f32> = (0..r.averaged.numel())
            .map(|i| (r.trials.iter().map(|t| t.data()[i] as f64).sum::<f64>() / 3.0) as f32)
            .collect();
        o.require(r.averaged.data() == mean.as_slice(), seed, || "average differs from the arithmetic mean".into());
    }
    Ok(o)
}

pub const SIGMAS: [f64; 4] = [0.0, 0.1, 0.5, 1.0];

/// Test-set and CV accuracy of decoding z as the simulator noise grows,
/// with the same noise draws scaled at every level.
pub fn degradation_curve(seed: u64) -> Result<Vec<(f64, f64, f64)>> {
    let layout = probe_layout();
    let (n, n_train) = (240, 180);
    let feats: Vec<SceneFeatures> = (0..n).map(|i| random_features(&layout, derive_seed(seed, "scene", i as u64))).collect();
    let rows: Vec<Vec<f32>> = feats.iter().map(|f| f.concat()).collect();
    let scales = neurosim::feature_scales(&rows[..n_train])?;
    let mut out = Vec::new();
    for sigma in SIGMAS {
        let cfg = SimConfig {
            n_voxels: 160,
            sigma,
            ..SimConfig::default()
        };
        let subject = SubjectModel::new(seed, &layout, &scales, "probe", &cfg)?;
        let vox: Vec<Vec<f32>> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let r = neurosim::respond(&record(f.clone()), &subject, 1, &mut rng::stream(seed, "noise", i as u64))?;
                Ok(r.averaged.into_data())
            })
            .collect::<Result<_>>()?;
        let cols = |range: std::ops::Range<usize>, pick: &dyn Fn(usize) -> Vec<f32>| {
            let d = pick(0).len();
            Matrix::from_fn(d, range.len(), |i, j| pick(range.start + j)[i] as f64)
        };
        let x_tr = cols(0..n_train, &|i| vox[i].clone());
        let y_tr = cols(0..n_train, &|i| feats[i].z.data().to_vec());
        let x_te = cols(n_train..n, &|i| vox[i].clone());
        let y_te = cols(n_train..n, &|i| feats[i].z.data().to_vec());
        let (fd, cv_r) = decode::fit_feature_space(&x_tr, &y_tr, false, &DecodeConfig::default())?;
        let pred = fd.decoder.predict_matrix(&x_te)?;
        let test_r = (0..y_te.nrows())
            .map(|j| {
                let a: Vec<f64> = pred.row(j).iter().copied().collect();
                let b: Vec<f64> = y_te.row(j).iter().copied().collect();
                metrics::pearson(&a, &b)
            })
            .sum::<f64>()
            / y_te.nrows() as f64;
        out.push((sigma, test_r, cv_r));
    }
    Ok(out)
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub fn difficulty_monotone(ctx: &SuiteContext) -> Result<Outcome> {
    let curve = degradation_curve(ctx.seed)?;
    let mut o = Outcome::new(0.0);
    for &(s, r, _) in &curve {
        o.measure(format!("sigma{s}.test_r"), r);
    }
    let r: Vec<f64> = curve.iter().map(|c| c.1).collect();
    o.require(strictly_decreasing(&r), ctx.seed, || format!("test r not decreasing: {r:?}"));
    Ok(o)
}

// ------------------------------------------------------------------ decode

fn ridge_objective(x: &Matrix<f64>, y: &Matrix<f64>, w: &Matrix<f64>, lambda: f64) -> f64 {
    (y - w * x).norm_squared() + lambda * w.norm_squared()
}

fn gaussian_matrix(seed: u64, label: &str, r: usize, c: usize) -> Matrix<f64> {
    let t = rng::gaussian(seed, label, 0, vec![r * c]);
    Matrix::from_fn(r, c, |i, j| t.data()[i * c + j] as f64)
}

pub fn ridge_optimality(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let mut min_gain = f64::INFINITY;
    for seed in seeds(ctx, "ridge-opt", 5) {
        let x = gaussian_matrix(seed, "x", 12, 40);
        let y = gaussian_matrix(seed, "y", 4, 40);
        let lambda = 0.7;
        for pre in [Preprocess::Raw, Preprocess::Center] {
            let d = decode::fit_ridge(&x, &y, lambda, pre)?;
            let (xc, yc) = if pre == Preprocess::Raw {
                (x.clone(), y.clone())
            } else {
                let center = |m: &Matrix<f64>| {
                    let mut m = m.clone();
                    for mut row in m.row_iter_mut() {
                        let mean = row.mean();
                        row.add_scalar_mut(-mean);
                    }
                    m
                };
                (center(&x), center(&y))
            };
            let base = ridge_objective(&xc, &yc, &d.weights, lambda);
            for k in 0..ctx.trials {
                let delta = gaussian_matrix(derive_seed(seed, "delta", k as u64), "d", 4, 12) * 1e-3;
                let gain = ridge_objective(&xc, &yc, &(&d.weights + delta), lambda) - base;
                min_gain = min_gain.min(gain);
                o.require(gain >= 0.0, seed, || format!("perturbation {k} lowered the objective by {:.3e}", -gain));
            }
        }
    }
    o.measure("min_objective_increase", min_gain);
    Ok(o)
}

pub fn cv_folds(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(1e-12);
    for seed in seeds(ctx, "folds", 10) {
        let (n, k) = (103, 5);
        let fold = decode::fold_assignment(n, k, seed);
        let mut sizes = vec![0usize; k];
        for &f in &fold {
            if f < k {
                sizes[f] += 1;
            }
        }
        let cover = fold.len() == n && fold.iter().all(|&f| f < k);
        let balanced = sizes.iter().max().unwrap_or(&0) - sizes.iter().min().unwrap_or(&0) <= 1 && sizes.iter().all(|&s| s > 0);
        o.require(cover && balanced, seed, || format!("fold sizes {sizes:?}"));
    }
    let x = gaussian_matrix(ctx.seed, "x", 20, 60);
    let y = gaussian_matrix(ctx.seed, "y", 6, 60) + gaussian_matrix(ctx.seed, "w", 6, 20) * &x * 0.3;
    let perm = [3usize, 0, 5, 1, 4, 2];
    let r = decode::cv_accuracy(&x, &y, 1.0, 5, ctx.seed, Preprocess::Standardize)?;
    let rp = decode::cv_accuracy(&x, &y.select_rows(&perm), 1.0, 5, ctx.seed, Preprocess::Standardize)?;
    let diff = perm.iter().enumerate().map(|(i, &p)| (rp[i] - r[p]).abs()).fold(0.0, f64::max);
    o.measure("permutation_max_diff", diff);
    o.require(diff <= 1e-12, ctx.seed, || format!("per-dim r depends on target order ({diff:.2e})"));
    Ok(o)
}

pub fn mask_is_selection(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-9;
    let mut o = Outcome::new(tol);
    let x = gaussian_matrix(ctx.seed, "x", 30, 80);
    let y = gaussian_matrix(ctx.seed, "w", 40, 30) * &x * 0.2 + gaussian_matrix(ctx.seed, "n", 40, 80);
    let cfg = DecodeConfig::default();
    let (fd, _) = decode::fit_feature_space(&x, &y, true, &cfg)?;
    let full = decode::fit_ridge(&x, &y, fd.decoder.lambda, cfg.preprocess)?;
    let probe = gaussian_matrix(ctx.seed, "probe", 30, 1);
    let expect = full.predict_matrix(&probe)?;
    let got = fd.predict(probe.as_slice())?;
    let mut worst = 0.0f64;
    for d in 0..40 {
        if fd.mask.keep[d] {
            worst = worst.max((got.values[d] - expect[(d, 0)]).abs());
        } else {
            o.require(!got.present[d] && got.values[d] == 0.0, ctx.seed, || format!("dropped dim {d} has a value"));
        }
    }
    o.measure("max_kept_diff", worst).measure("kept", fd.mask.count() as f64);
    o.require(worst <= tol, ctx.seed, || format!("kept predictions moved by {worst:.2e}"));
    Ok(o)
}

pub fn monotone_degradation(ctx: &SuiteContext) -> Result<Outcome> {
    let curve = degradation_curve(ctx.seed)?;
    let mut o = Outcome::new(0.0);
    for &(s, _, r) in &curve {
        o.measure(format!("sigma{s}.cv_r"), r);
    }
    let r: Vec<f64> = curve.iter().map(|c| c.2).collect();
    o.require(strictly_decreasing(&r), ctx.seed, || format!("CV r not decreasing: {r:?}"));
    Ok(o)
}

/// Planted model `Y = W X + b` without noise, recovered with a negligible
/// penalty.
pub fn planted_recovery(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-3;
    let mut o = Outcome::new(tol);
    let (v, d, n) = (25, 8, 200);
    let x = gaussian_matrix(ctx.seed, "x", v, n);
    let w = gaussian_matrix(ctx.seed, "w", d, v);
    let b = gaussian_matrix(ctx.seed, "b", d, 1);
    let mut y = &w * &x;
    for mut col in y.column_iter_mut() {
        col += b.column(0);
    }
    let fit = decode::fit_ridge(&x, &y, 1e-8, Preprocess::Center)?;
    let (we, be) = fit.effective_weights();
    let werr = (&we - &w).abs().max();
    let berr = (be - b.column(0)).abs().max();
    let r = decode::cv_accuracy(&x, &y, 1e-8, 5, ctx.seed, Preprocess::Center)?;
    let min_r = r.iter().copied().fold(f64::INFINITY, f64::min);
    let mask = decode::select_features(&r, 0.25)?;
    o.measure("max_weight_err", werr)
        .measure("max_bias_err", berr)
        .measure("min_cv_r", min_r)
        .measure("kept", mask.count() as f64);
    o.require(werr <= tol && berr <= tol, ctx.seed, || format!("weight error {werr:.2e}, bias error {berr:.2e}"));
    o.require(min_r >= 0.999, ctx.seed, || format!("CV r {min_r}"));
    o.require(mask.count() == (0.25 * d as f64).round() as usize, ctx.seed, || format!("kept {}", mask.count()));
    Ok(o)
}

/// Brute force: a dim is kept when fewer than `k` dims outrank it, ranking
/// by r descending, NaN last, ties to the lower index.
pub fn topk_oracle_mask(r: &[f64], fraction: f64) -> Vec<bool> {
    let k = (fraction * r.len() as f64).round() as usize;
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    (0..r.len())
        .map(|i| {
            let above = (0..r.len())
                .filter(|&j| key(r[j]) > key(r[i]) || (key(r[j]) == key(r[i]) && j < i))
                .count();
            above < k
        })
        .collect()
}

pub fn topk_oracle(ctx: &SuiteContext) -> Result<Outcome> {
    let mut o = Outcome::new(0.0);
    let values = [-0.5, 0.0, 0.3, 0.3, 0.9, f64::NAN];
    for seed in seeds(ctx, "topk", ctx.trials) {
        let mut r_ = rng::stream(seed, "r", 0);
        let d = r_.random_range(1..40);
        let r: Vec<f64> = (0..d)
            .map(|_| if r_.random_bool(0.5) { values[r_.random_range(0..values.len())] } else { r_.random_range(-1.0..1.0) })
            .collect();
        let fraction = [0.1, 0.25, 0.5, 1.0][r_.random_range(0..4)];
        let mask = decode::select_features(&r, fraction)?;
        let oracle = topk_oracle_mask(&r, fraction);
        let k = (fraction * d as f64).round() as usize;
        o.require(mask.keep == oracle && mask.count() == k, seed, || format!("mask differs from oracle for {r:?}"));
    }
    Ok(o)
}

// ------------------------------------------------------------- reconstruct

pub fn stage2_deterministic(ctx: &SuiteContext) -> Result<Outcome> {
    let models = gradients::tiny_models()?;
    let mut o = Outcome::new(0.0);
    for seed in seeds(ctx, "stage2-det", 3) {
        let (f, x) = gradients::stage2_problem(&models, seed)?;
        let run = || -> Result<(Tensor, f32)> {
            let tape = Tape::new();
            let (cd, _) = f.split();
            let c = tape.constant(Tensor::vector(x.data()[..cd].to_vec()));
            let z = tape.constant(Tensor::vector(x.data()[cd..].to_vec()));
            let g = reconstruct::generate(&models, &f.chain, c, z, Some((&f.positions, &f.targets)))?;
            let img = (*g.image.value()).clone();
            Ok((img, g.loss.expect("targets").value().item()))
        };
        let (a, b) = (run()?, run()?);
        o.require(a.0 == b.0 && a.1.to_bits() == b.1.to_bits(), seed, || "two evaluations differ".into());
    }
    Ok(o)
}

pub fn stage2_gradient(ctx: &SuiteContext) -> Result<Outcome> {
    let models = gradients::tiny_models()?;
    let r = gradients::stage2_battery(&models, ctx.seed, ctx.trials, 6)?;
    let mut o = Outcome::new(COMPOSITE_TOLERANCE);
    o.measure("max_rel_err", r.max_rel_err).measure("failures", r.failures as f64);
    o.require(r.passed(), r.first_failure.unwrap_or(r.worst_seed), || {
        format!("{} of {} seeds failed, max rel err {:.3e}", r.failures, r.seeds, r.max_rel_err)
    });
    Ok(o)
}

pub fn best_snapshot(ctx: &SuiteContext) -> Result<Outcome> {
    let models = gradients::tiny_models()?;
    let mut o = Outcome::new(0.0);
    for seed in seeds(ctx, "best", 3) {
        let (f, x) = gradients::stage2_problem(&models, seed)?;
        let (cd, _) = f.split();
        let cfg = ReconstructionConfig {
            iterations: 15,
            lr: 0.05,
            snapshot_every: 1,
            ..tiny().reconstruct
        };
        let c = Tensor::vector(x.data()[..cd].to_vec());
        let z = Tensor::vector(x.data()[cd..].to_vec());
        let s1 = reconstruct::stage1(&c, &z, &models, &cfg, seed)?;
        let out = reconstruct::stage2(&s1, &f.targets, &models, &cfg)?;
        let min = out.trajectory.iter().copied().fold(f64::INFINITY, f64::min);
        let tape = Tape::new();
        let g = reconstruct::generate(
            &models,
            &s1.chain,
            tape.constant(out.c.clone()),
            tape.constant(out.z.clone()),
            Some((&f.positions, &f.targets)),
        )?;
        let replay = g.loss.expect("targets").value().item() as f64;
        o.measure(format!("{seed}.best_loss"), out.best_loss);
        o.require(out.best_loss == min, seed, || format!("best {} vs trajectory minimum {min}", out.best_loss));
        o.require(replay == out.best_loss && *g.image.value() == out.image, seed, || {
            format!("returned (c, z) replays to loss {replay}, reported {}", out.best_loss)
        });
    }
    Ok(o)
}

pub fn structure_loss_oracle(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-6;
    let mut o = Outcome::new(tol);
    let mut worst = 0.0f64;
    for seed in seeds(ctx, "eq-loss", ctx.trials) {
        let dims = [24usize, 40];
        let phis: Vec<Tensor> = dims.iter().enumerate().map(|(k, &d)| rng::gaussian(seed, "phi", k as u64, vec![1, d])).collect();
        let targets: Vec<TapTarget> = dims
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let mut r = rng::stream(seed, "mask", k as u64);
                TapTarget {
                    values: rng::gaussian(seed, "target", k as u64, vec![d]),
                    mask: (0..d).map(|_| r.random_bool(0.3)).collect(),
                }
            })
            .collect();
        let mut brute = 0.0f64;
        for (phi, t) in phis.iter().zip(&targets) {
            for i in 0..phi.numel() {
                if t.mask[i] {
                    brute += (phi.data()[i] as f64 - t.values.data()[i] as f64).powi(2);
                }
            }
        }
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = phis.iter().map(|p| tape.constant(p.clone())).collect();
        let got = reconstruct::structure_loss(&vars, &targets)?.value().item() as f64;
        let rel = (got - brute).abs() / brute.max(1e-12);
        worst = worst.max(rel);
        o.require(rel <= tol, seed, || format!("loss {got} vs brute force {brute}"));
        let own: Vec<TapTarget> = phis
            .iter()
            .map(|p| TapTarget::dense(p.reshaped(vec![p.numel()]).expect("same size")))
            .collect();
        let zero = reconstruct::structure_loss(&vars, &own)?.value().item();
        o.require(zero == 0.0, seed, || format!("own taps give loss {zero}"));
    }
    o.measure("max_rel_err", worst);
    Ok(o)
}

pub fn ablation_ordering(ctx: &SuiteContext) -> Result<Outcome> {
    let Some(dir) = &ctx.dataset else {
        return Ok(Outcome::skipped("needs a dataset with a report"));
    };
    let path = dir.join("report").join("summary.json");
    if !path.exists() {
        return Ok(Outcome::skipped(format!("no {}", path.display())));
    }
    let summary: commands::ReportSummary = crate::store::read_json(&path)?;
    let get = |v: Variant| summary.variants.iter().find(|r| r.variant == v.name());
    let (Some(full), Some(wc), Some(wz)) = (get(Variant::Full), get(Variant::WithoutControl), get(Variant::WithoutZ)) else {
        return Ok(Outcome::skipped("report lacks a variant"));
    };
    let mut o = Outcome::new(0.0);
    o.measure("seeds", full.seeds as f64)
        .measure("full.ssim", full.ssim.mean)
        .measure("without_control.ssim", wc.ssim.mean)
        .measure("full.pcc", full.pcc.mean)
        .measure("without_z.pcc", wz.pcc.mean)
        .measure("full.clip", full.clip_cosine.mean)
        .measure("without_control.clip", wc.clip_cosine.mean);
    o.require(full.seeds >= 3, ctx.seed, || format!("only {} seeds", full.seeds));
    o.require(full.ssim.above(&wc.ssim), ctx.seed, || "SSIM(full) not above SSIM(without_control)".into());
    o.require(full.pcc.above(&wz.pcc), ctx.seed, || "PCC(full) not above PCC(without_z)".into());
    o.require(full.clip_cosine.above(&wc.clip_cosine), ctx.seed, || "CLIP(full) not above CLIP(without_control)".into());
    Ok(o)
}

// ----------------------------------------------------------------- metrics

fn image_pair(seed: u64) -> (Tensor, Tensor) {
    if seed % 2 == 0 {
        (scene_image(seed), scene_image(seed ^ 1))
    } else {
        (noise_image(seed), scene_image(seed))
    }
}

pub fn metrics_symmetric(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-12;
    let enc = ContrastiveEncoder::new(tiny().train.encoder, ctx.seed)?;
    let mut o = Outcome::new(tol);
    let mut worst = 0.0f64;
    for seed in seeds(ctx, "symmetric", 20) {
        let (a, b) = image_pair(seed);
        let d = [
            metrics::ssim(&a, &b)? - metrics::ssim(&b, &a)?,
            metrics::pixel_correlation(&a, &b)? - metrics::pixel_correlation(&b, &a)?,
            metrics::semantic_similarity(&a, &b, &enc)? - metrics::semantic_similarity(&b, &a, &enc)?,
        ]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(d);
        o.require(d <= tol, seed, || format!("asymmetry {d:.2e}"));
    }
    o.measure("max_asymmetry", worst);
    Ok(o)
}

fn rescaled_projection(enc: &ContrastiveEncoder, s: f32) -> Result<ContrastiveEncoder> {
    let mut p = ParamStore::new();
    for (name, t) in enc.params.names().zip(enc.params.tensors()) {
        let t = if name.starts_with("img_proj.") { t.map(|v| v * s) } else { t.clone() };
        p.add(name, t);
    }
    ContrastiveEncoder::from_params(enc.config.clone(), p)
}

pub fn semantic_scale_invariant(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-5;
    let enc = ContrastiveEncoder::new(tiny().train.encoder, ctx.seed)?;
    let mut o = Outcome::new(tol);
    let mut worst = 0.0f64;
    for s in [0.1f32, 3.7, 100.0] {
        let scaled = rescaled_projection(&enc, s)?;
        for seed in seeds(ctx, "semantic-scale", 5) {
            let (a, b) = image_pair(seed);
            let d = (metrics::semantic_similarity(&a, &b, &enc)? - metrics::semantic_similarity(&a, &b, &scaled)?).abs();
            worst = worst.max(d);
            o.require(d <= tol, seed, || format!("similarity moved by {d:.2e} at scale {s}"));
        }
    }
    o.measure("max_abs_change", worst);
    Ok(o)
}

pub fn self_similarity(ctx: &SuiteContext) -> Result<Outcome> {
    let enc = ContrastiveEncoder::new(tiny().train.encoder, ctx.seed)?;
    let mut o = Outcome::new(1e-5);
    let mut worst = BTreeMap::new();
    for seed in seeds(ctx, "self", 20) {
        let x = if seed % 2 == 0 { scene_image(seed) } else { noise_image(seed) };
        let vals = [
            ("ssim", metrics::ssim(&x, &x)?, 1e-12),
            ("pcc", metrics::pixel_correlation(&x, &x)?, 1e-12),
            ("clip", metrics::semantic_similarity(&x, &x, &enc)?, 1e-5),
        ];
        for (name, v, tol) in vals {
            let e = worst.entry(name).or_insert(0.0f64);
            *e = e.max((v - 1.0).abs());
            o.require((v - 1.0).abs() <= tol, seed, || format!("{name}(x, x) = {v}"));
        }
    }
    for (k, v) in worst {
        o.measure(format!("{k}.max_err"), v);
    }
    Ok(o)
}

/// Pearson r from raw sums, independent of the centred two-pass form.
pub fn pcc_by_sums(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sab = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (saa, sbb) = (a.iter().map(|x| x * x).sum::<f64>(), b.iter().map(|y| y * y).sum::<f64>());
    (n * sab - sa * sb) / ((n * saa - sa * sa) * (n * sbb - sb * sb)).sqrt()
}

pub fn pcc_oracle(ctx: &SuiteContext) -> Result<Outcome> {
    let tol = 1e-6;
    let mut o = Outcome::new(tol);
    let (mut worst, mut affine) = (0.0f64, 0.0f64);
    for seed in seeds(ctx, "pcc", ctx.trials) {
        let (a, b) = image_pair(seed);
        let got = metrics::pixel_correlation(&a, &b)?;
        let want = pcc_by_sums(&a.to_f64_vec(), &b.to_f64_vec());
        worst = worst.max((got - want).abs());
        o.require((got - want).abs() <= tol, seed, || format!("pcc {got} vs oracle {want}"));
        let scale = 0.2 + rng::stream(seed, "affine", 0).random_range(0.0..0.7f32);
        let shifted = a.map(|v| scale * v + 0.1);
        let r = metrics::pixel_correlation(&a, &shifted)?;
        affine = affine.max((r - 1.0).abs());
        o.require((r - 1.0).abs() <= tol, seed, || format!("pcc of a positive affine pair is {r}"));
    }
    o.measure("max_oracle_diff", worst).measure("max_affine_err", affine);
    Ok(o)
}

// -------------------------------------------------------- cli_orchestrator

/// Every file under `root` except wall-clock timings, with its bytes.
fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timing.json") {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.insert(p.strip_prefix(root).expect("under root").to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

/// Runs every command of the tiny configuration into `root`.
pub fn run_tiny_pipeline(root: &Path, cfg: &PipelineConfig) -> Result<()> {
    commands::gen_data(root, &cfg.data)?;
    commands::train(root, &cfg.train, &ALL_STAGES)?;
    commands::fit_decoders(root, &cfg.decode, &[])?;
    for v in [Variant::Full, Variant::WithoutZ] {
        commands::reconstruct(root, 0, v, &cfg.reconstruct, &cfg.metrics, None, cfg.jobs)?;
    }
    commands::report(root, None)?;
    Ok(())
}

/// Byte-level comparison of two pipeline output trees.
pub fn compare_trees(a: &Path, b: &Path) -> Result<(usize, Vec<PathBuf>)> {
    let (sa, sb) = (snapshot(a)?, snapshot(b)?);
    let mut differ: Vec<PathBuf> = sa.iter().filter(|(p, bytes)| sb.get(*p) != Some(bytes)).map(|(p, _)| p.clone()).collect();
    differ.extend(sb.keys().filter(|p| !sa.contains_key(*p)).cloned());
    Ok((sa.len(), differ))
}

pub fn pipeline_reproducible(ctx: &SuiteContext) -> Result<Outcome> {
    let mut cfg = tiny();
    cfg.data.seed = ctx.seed;
    let (a, b) = (Scratch::new("repro-a")?, Scratch::new("repro-b")?);
    run_tiny_pipeline(&a.0, &cfg)?;
    run_tiny_pipeline(&b.0, &cfg)?;
    let (files, differ) = compare_trees(&a.0, &b.0)?;
    let mut o = Outcome::new(0.0);
    o.measure("files", files as f64).measure("differing", differ.len() as f64);
    o.require(differ.is_empty(), ctx.seed, || format!("files differ: {differ:?}"));
    Ok(o)
}

pub fn hash_validation(ctx: &SuiteContext) -> Result<Outcome> {
    let cfg = tiny();
    let dir = Scratch::new("hashes")?;
    let root = &dir.0;
    let layout = crate::artifacts::Layout::new(root);
    let mut o = Outcome::new(0.0);
    commands::gen_data(root, &cfg.data)?;
    let missing = commands::fit_decoders(root, &cfg.decode, &[]);
    o.require(matches!(missing, Err(Error::UpstreamMissing { stage: "train", .. })), ctx.seed, || {
        format!("fit-decoders without models gave {missing:?}")
    });
    let img = layout.image(1);
    let original = std::fs::read(&img).map_err(|e| Error::io(&img, e))?;
    let mut bad = original.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0xff;
    crate::store::write_bytes(&img, &bad)?;
    let r = commands::train(root, &cfg.train, &ALL_STAGES);
    o.require(matches!(r, Err(Error::HashMismatch { .. })), ctx.seed, || format!("tampered image gave {r:?}"));
    crate::store::write_bytes(&img, &original)?;
    commands::train(root, &cfg.train, &ALL_STAGES)?;
    let tensor = layout.models().join("encoder");
    let file = std::fs::read_dir(&tensor)
        .map_err(|e| Error::io(&tensor, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.extension().is_some_and(|x| x == "tnsr"))
        .ok_or_else(|| Error::Format("encoder bundle has no tensors".into()))?;
    let mut bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    crate::store::write_bytes(&file, &bytes)?;
    let r = commands::fit_decoders(root, &cfg.decode, &[]);
    o.require(matches!(r, Err(Error::HashMismatch { .. })), ctx.seed, || format!("tampered weights gave {r:?}"));
    Ok(o)
}

// ---------------------------------------------------------- property_suite

pub fn suite_deterministic(ctx: &SuiteContext) -> Result<Outcome> {
    let picks = ["diffusion.forward_marginals", "decode.topk_oracle", "metrics.pcc_oracle", "decode.cv_folds"];
    let checks: Vec<registry::Check> = registry::registry()
        .into_iter()
        .filter(|c| picks.contains(&c.full_name().as_str()))
        .collect();
    let mut o = Outcome::new(0.0);
    for c in &checks {
        let (a, b) = (registry::run_check(c, ctx), registry::run_check(c, ctx));
        o.require(a == b, ctx.seed, || format!("{} differs between runs", c.full_name()));
    }
    o.measure("checks_repeated", checks.len() as f64);
    Ok(o)
}

pub fn registry_coverage(_ctx: &SuiteContext) -> Result<Outcome> {
    let checks = registry::registry();
    let (missing, extra) = registry::coverage_gaps(&checks);
    let mut o = Outcome::new(0.0);
    o.measure("registered", checks.len() as f64)
        .measure("manifest", registry::INVARIANTS.len() as f64)
        .measure("missing", missing.len() as f64)
        .measure("unexpected", extra.len() as f64);
    o.require(missing.is_empty() && extra.is_empty(), 0, || format!("missing {missing:?}, unexpected {extra:?}"));
    Ok(o)
}
