//! Two-stage reconstruction from decoded features.
//!
//! Stage 1 conditions img2img on the decoded `c`, starting from the decoded
//! `z`. Stage 2 replays the same denoising chain, with the noises it drew
//! frozen, as a differentiable function of `(c, z)` and descends the squared
//! distance between the image's shallow encoder taps and the decoded taps.

use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::decode::Prediction;
use crate::diffusion::{DenoisingChain, Denoiser, DiffusionSchedule};
use crate::encoder::ContrastiveEncoder;
use crate::error::{Error, Result};
use crate::image;
use crate::metrics::pearson;
use crate::neurosim::SceneFeatures;
use crate::rng;
use crate::tensor::{AdamState, Element, Tape, Tensor, Var};

/// The trained generator stack.
#[derive(Clone, Debug)]
pub struct Models {
    pub autoencoder: Autoencoder,
    pub encoder: ContrastiveEncoder,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub t_start_frac: f64,
    pub iterations: usize,
    pub lr: f64,
    /// Overrides `lr` for `c` when set.
    pub lr_c: Option<f64>,
    /// Overrides `lr` for `z` when set.
    pub lr_z: Option<f64>,
    /// 1-based encoder blocks whose taps enter the structure loss.
    pub taps: Vec<usize>,
    pub threshold: f64,
    pub seed: u64,
    pub stride: usize,
    pub snapshot_every: usize,
    pub without_control: bool,
    pub without_z: bool,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            t_start_frac: 0.8,
            iterations: 180,
            lr: 0.01,
            lr_c: None,
            lr_z: None,
            taps: vec![1, 2, 3],
            threshold: 0.3,
            seed: 0,
            stride: 8,
            snapshot_every: 20,
            without_control: false,
            without_z: false,
        }
    }
}

impl ReconstructionConfig {
    pub fn t_start(&self, sched: &DiffusionSchedule) -> Result<usize> {
        if !(0.0..=1.0).contains(&self.t_start_frac) {
            return Err(Error::BadRange(format!("t_start fraction {} not in [0, 1]", self.t_start_frac)));
        }
        Ok((self.t_start_frac * sched.steps() as f64).round() as usize)
    }

    pub fn item_seed(&self, item: usize) -> u64 {
        rng::derive_seed(self.seed, "item", item as u64)
    }
}

/// Decoded tap with its kept dims.
#[derive(Clone, Debug, PartialEq)]
pub struct TapTarget {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl TapTarget {
    pub fn from_prediction(p: &Prediction) -> Self {
        Self {
            values: Tensor::vector(p.values.iter().map(|&v| v as f32).collect()),
            mask: p.present.clone(),
        }
    }

    /// Target equal to `values` on every dim.
    pub fn dense(values: Tensor) -> Self {
        let n = values.numel();
        Self {
            values,
            mask: vec![true; n],
        }
    }
}

/// Decoded features of one test item.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFeatures {
    pub c: Prediction,
    pub z: Prediction,
    pub taps: Vec<Prediction>,
}

impl DecodedFeatures {
    pub fn c_tensor(&self) -> Tensor {
        Tensor::vector(self.c.values.iter().map(|&v| v as f32).collect())
    }

    pub fn z_tensor(&self) -> Tensor {
        Tensor::vector(self.z.values.iter().map(|&v| v as f32).collect())
    }

    pub fn tap_targets(&self) -> Vec<TapTarget> {
        self.taps.iter().map(TapTarget::from_prediction).collect()
    }

    /// Mean over the three feature spaces (c, z, pooled taps) of the Pearson
    /// r between decoded and true values on the decoded dims.
    pub fn accuracy(&self, truth: &SceneFeatures) -> f64 {
        let r = |p: &Prediction, t: &[f32]| {
            let (a, b): (Vec<f64>, Vec<f64>) = p
                .values
                .iter()
                .zip(t)
                .zip(&p.present)
                .filter(|(_, &keep)| keep)
                .map(|((&a, &b), _)| (a, b as f64))
                .unzip();
            pearson(&a, &b)
        };
        let mut tap_pred = Prediction {
            values: Vec::new(),
            present: Vec::new(),
        };
        let mut tap_true = Vec::new();
        for (p, t) in self.taps.iter().zip(&truth.taps) {
            tap_pred.values.extend_from_slice(&p.values);
            tap_pred.present.extend_from_slice(&p.present);
            tap_true.extend_from_slice(t.data());
        }
        (r(&self.c, truth.c.data()) + r(&self.z, truth.z.data()) + r(&tap_pred, &tap_true)) / 3.0
    }
}

/// `sum_i || (phi_i - target_i) * mask_i ||^2` over the given taps.
pub fn structure_loss<'t, E: Element>(taps: &[Var<'t, E>], targets: &[TapTarget]) -> Result<Var<'t, E>> {
    if taps.len() != targets.len() || taps.is_empty() {
        return Err(Error::TapMismatch(format!("{} taps for {} targets", taps.len(), targets.len())));
    }
    let mut total: Option<Var<'t, E>> = None;
    for (phi, target) in taps.iter().zip(targets) {
        let shape = phi.shape();
        let d = target.values.numel();
        if shape.iter().product::<usize>() != d || target.mask.len() != d {
            return Err(Error::TapMismatch(format!(
                "tap of shape {shape:?} vs target of {d} values and mask of {}",
                target.mask.len()
            )));
        }
        let z = phi.constant(target.values.reshaped(shape.clone())?.cast());
        let m: Vec<f32> = target.mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let m = phi.constant(Tensor::new(shape, m)?.cast());
        let term = phi.sub(z)?.mul(m)?.sum_squares()?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Positions of `cfg_taps` among the encoder's taps.
fn tap_positions(enc: &ContrastiveEncoder, cfg_taps: &[usize]) -> Result<Vec<usize>> {
    cfg_taps
        .iter()
        .map(|t| {
            enc.config
                .taps
                .iter()
                .position(|e| e == t)
                .ok_or_else(|| Error::TapMismatch(format!("block {t} is not an encoder tap")))
        })
        .collect()
}

/// Image and loss of the generator at `(c, z)` with the chain's frozen noise.
pub struct Generated<'t, E: Element = f32> {
    pub image: Var<'t, E>,
    pub loss: Option<Var<'t, E>>,
}

/// Records `decode(chain(z, c))` and, with targets, its structure loss.
pub fn generate<'t, E: Element>(
    models: &Models,
    chain: &DenoisingChain,
    c: Var<'t, E>,
    z: Var<'t, E>,
    targets: Option<(&[usize], &[TapTarget])>,
) -> Result<Generated<'t, E>> {
    let tape = c.tape();
    let dv = models.denoiser.params.bind(tape, false);
    let av = models.autoencoder.params.bind(tape, false);
    let cfg = &models.denoiser.config;
    let c = c.reshape(vec![cfg.n_cond, cfg.d_cond])?;
    let z = z.reshape(vec![1, cfg.latent_dim()])?;
    let latent = chain.run(&models.schedule, &models.denoiser, &dv, z, c)?;
    let image = models.autoencoder.decode_var(&av, latent)?;
    let loss = match targets {
        None => None,
        Some((positions, targets)) => {
            let ev = models.encoder.params.bind(tape, false);
            let out = models.encoder.image_var(&ev, image, true)?;
            let taps: Vec<Var<'t, E>> = positions.iter().map(|&p| out.taps[p]).collect();
            Some(structure_loss(&taps, targets)?)
        }
    };
    let image = image.reshape(vec![image::SIZE, image::SIZE, 3])?;
    Ok(Generated { image, loss })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Output {
    pub image: Tensor,
    pub c: Tensor,
    pub z: Tensor,
    pub chain: DenoisingChain,
}

/// Decodes img2img from `(c, z)`. Under `without_z` the decoded `z` is
/// replaced by a unit Gaussian draw.
pub fn stage1(c: &Tensor, z: &Tensor, models: &Models, cfg: &ReconstructionConfig, seed: u64) -> Result<Stage1Output> {
    let dcfg = &models.denoiser.config;
    if c.numel() != dcfg.cond_dim() || z.numel() != dcfg.latent_dim() {
        return Err(Error::DimensionMismatch(format!(
            "stage 1 needs c of {} and z of {} values, got {} and {}",
            dcfg.cond_dim(),
            dcfg.latent_dim(),
            c.numel(),
            z.numel()
        )));
    }
    let z = if cfg.without_z {
        rng::gaussian(seed, "random-z", 0, vec![dcfg.latent_dim()])
    } else {
        z.reshaped(vec![dcfg.latent_dim()])?
    };
    let c = c.reshaped(vec![dcfg.cond_dim()])?;
    let t_start = cfg.t_start(&models.schedule)?;
    let chain = DenoisingChain::new(&models.schedule, t_start, cfg.stride, seed, dcfg.latent_dim())?;
    let tape = Tape::new();
    let g = generate(models, &chain, tape.constant(c.clone()), tape.constant(z.clone()), None)?;
    let image = (*g.image.value()).clone();
    Ok(Stage1Output { image, c, z, chain })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    /// Image at the lowest recorded loss.
    pub image: Tensor,
    pub c: Tensor,
    pub z: Tensor,
    /// Loss before each update, plus the final value.
    pub trajectory: Vec<f64>,
    pub best_iteration: usize,
    pub best_loss: f64,
    pub snapshots: Vec<(usize, Tensor)>,
    /// Iteration at which the loss stopped being finite.
    pub aborted_at: Option<usize>,
}

impl Stage2Output {
    pub fn check(&self) -> Result<()> {
        match self.aborted_at {
            Some(k) => Err(Error::NonFiniteLoss(k)),
            None => Ok(()),
        }
    }
}

/// Loss and image at `(c, z)`, and optionally the gradients.
fn evaluate(
    models: &Models,
    chain: &DenoisingChain,
    positions: &[usize],
    targets: &[TapTarget],
    c: &Tensor,
    z: &Tensor,
    want_grad: bool,
) -> Result<(f64, Tensor, Option<(Tensor, Tensor)>)> {
    let tape = Tape::new();
    let (cv, zv) = (tape.leaf(c.clone()), tape.leaf(z.clone()));
    let g = generate(models, chain, cv, zv, Some((positions, targets)))?;
    let loss = g.loss.expect("targets given");
    let value = loss.value().item() as f64;
    let image = (*g.image.value()).clone();
    if !value.is_finite() || !want_grad {
        return Ok((value, image, None));
    }
    let grads = tape.backward(loss)?;
    Ok((value, image, Some((grads.get(cv), grads.get(zv)))))
}

/// Adam on `(c, z)` against the structure loss, keeping the best iterate.
pub fn stage2(s1: &Stage1Output, targets: &[TapTarget], models: &Models, cfg: &ReconstructionConfig) -> Result<Stage2Output> {
    let positions = tap_positions(&models.encoder, &cfg.taps)?;
    if positions.len() != targets.len() {
        return Err(Error::TapMismatch(format!("{} configured taps, {} targets", positions.len(), targets.len())));
    }
    let iterations = if cfg.without_control { 0 } else { cfg.iterations };
    let (mut c, mut z) = (s1.c.clone(), s1.z.clone());
    let mut adam_c = AdamState::new([&c], cfg.lr_c.unwrap_or(cfg.lr) as f32);
    let mut adam_z = AdamState::new([&z], cfg.lr_z.unwrap_or(cfg.lr) as f32);
    let mut out = Stage2Output {
        image: s1.image.clone(),
        c: c.clone(),
        z: z.clone(),
        trajectory: Vec::with_capacity(iterations + 1),
        best_iteration: 0,
        best_loss: f64::INFINITY,
        snapshots: Vec::new(),
        aborted_at: None,
    };
    for k in 0..=iterations {
        let (loss, image, grads) = evaluate(models, &s1.chain, &positions, targets, &c, &z, k < iterations)?;
        if !loss.is_finite() {
            out.aborted_at = Some(k);
            break;
        }
        out.trajectory.push(loss);
        if cfg.snapshot_every > 0 && k % cfg.snapshot_every == 0 {
            out.snapshots.push((k, image.clone()));
        }
        if loss < out.best_loss {
            out.best_loss = loss;
            out.best_iteration = k;
            out.image = image;
            out.c = c.clone();
            out.z = z.clone();
        }
        if let Some((gc, gz)) = grads {
            if !(gc.is_finite() && gz.is_finite()) {
                out.aborted_at = Some(k);
                break;
            }
            adam_c.step(&mut [&mut c], &[Some(gc)])?;
            adam_z.step(&mut [&mut z], &[Some(gz)])?;
        }
    }
    Ok(out)
}

/// Both stages for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemReconstruction {
    pub item: usize,
    pub stage1: Tensor,
    pub stage2: Stage2Output,
}

pub fn reconstruct_item(
    item: usize,
    decoded: &DecodedFeatures,
    models: &Models,
    cfg: &ReconstructionConfig,
) -> Result<ItemReconstruction> {
    let seed = cfg.item_seed(item);
    let s1 = stage1(&decoded.c_tensor(), &decoded.z_tensor(), models, cfg, seed)?;
    let positions = tap_positions(&models.encoder, &cfg.taps)?;
    let all = decoded.tap_targets();
    let targets: Vec<TapTarget> = positions
        .iter()
        .map(|&p| all.get(p).cloned().ok_or_else(|| Error::TapMismatch(format!("no decoded tap {p}"))))
        .collect::<Result<_>>()?;
    let s2 = stage2(&s1, &targets, models, cfg)?;
    Ok(ItemReconstruction {
        item,
        stage1: s1.image,
        stage2: s2,
    })
}

#[cfg(test)]
mod tests;
