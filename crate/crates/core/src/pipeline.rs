//! End-to-end orchestration: dataset, model training, feature extraction,
//! simulated subjects, decoder fitting, reconstruction and evaluation.
//!
//! Every stage has an in-memory form used by tests and a persisted form
//! (see [`crate::artifacts`]) used by the command line.

use serde::{Deserialize, Serialize};

use crate::autoencoder::{self, Autoencoder, AutoencoderConfig};
use crate::decode::{self, DecodeConfig, FeatureDecoder, Matrix};
use crate::diffusion::{self, make_schedule, Denoiser, DenoiserConfig, DiffusionSchedule};
use crate::encoder::{self, ContrastiveEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsOptions, MetricsRecord};
use crate::neurosim::{self, Dataset, SceneFeatures, SimConfig, SubjectModel};
use crate::nn::{self, TrainHyper};
use crate::reconstruct::{self, DecodedFeatures, ItemReconstruction, Models, ReconstructionConfig};
use crate::rng;
use crate::store::sha256_parts;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_subjects: usize,
    pub seed: u64,
    pub sim: SimConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
            n_subjects: 4,
            seed: 7,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub autoencoder: AutoencoderConfig,
    pub autoencoder_train: TrainHyper,
    pub encoder: EncoderConfig,
    pub encoder_train: TrainHyper,
    pub denoiser: DenoiserConfig,
    pub denoiser_train: TrainHyper,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            autoencoder: AutoencoderConfig::default(),
            autoencoder_train: TrainHyper {
                epochs: 20,
                batch_size: 32,
                lr: 3e-3,
                seed: 0,
            },
            encoder: EncoderConfig::default(),
            encoder_train: TrainHyper {
                epochs: 20,
                batch_size: 32,
                lr: 2e-3,
                seed: 0,
            },
            denoiser: DenoiserConfig::default(),
            denoiser_train: TrainHyper {
                epochs: 80,
                batch_size: 32,
                lr: 2e-3,
                seed: 0,
            },
            schedule: ScheduleConfig::default(),
        }
    }
}

/// Every tunable of a run; the command line overlays flags on this.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub reconstruct: ReconstructionConfig,
    pub metrics: MetricsOptions,
    /// Worker threads for per-item work; 0 picks the default.
    pub jobs: usize,
}

impl PipelineConfig {
    /// A seconds-scale configuration for smoke tests: small models, few
    /// epochs, a short schedule and no item filtering.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.data.n_train = 48;
        c.data.n_test = 4;
        c.data.n_subjects = 2;
        c.data.sim.n_voxels = 96;
        let t = &mut c.train;
        t.autoencoder.enc_hidden = 16;
        t.autoencoder.dec_hidden = 16;
        t.encoder.d_img = 16;
        t.encoder.blocks = 2;
        t.encoder.img_hidden = 32;
        t.encoder.d_emb = 16;
        t.encoder.taps = vec![1];
        t.denoiser.d_model = 16;
        t.denoiser.blocks = 1;
        t.denoiser.mlp_hidden = 32;
        t.schedule.steps = 40;
        for h in [&mut t.autoencoder_train, &mut t.encoder_train, &mut t.denoiser_train] {
            h.epochs = 2;
            h.batch_size = 16;
        }
        c.decode.k_folds = 3;
        c.reconstruct.iterations = 3;
        c.reconstruct.taps = vec![1];
        c.reconstruct.stride = 4;
        c.reconstruct.threshold = -1.0;
        c.jobs = 1;
        c
    }
}

pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    neurosim::build_dataset(cfg.n_train, cfg.n_test, cfg.n_subjects, cfg.seed, cfg.sim.clone())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub autoencoder: Vec<f64>,
    pub encoder_loss: Vec<f64>,
    pub encoder_retrieval: Vec<f64>,
    pub denoiser: Vec<f64>,
}

/// Which models `train_models` should fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Autoencoder,
    Encoder,
    Denoiser,
}

pub const ALL_STAGES: [Stage; 3] = [Stage::Autoencoder, Stage::Encoder, Stage::Denoiser];

fn hyper_for(h: &TrainHyper, seed: u64, label: &str) -> TrainHyper {
    TrainHyper {
        seed: rng::derive_seed(seed, label, h.seed),
        ..h.clone()
    }
}

pub fn schedule(cfg: &ScheduleConfig) -> Result<DiffusionSchedule> {
    make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
}

/// Denoiser config with the extents the other models and schedule dictate.
pub fn denoiser_config(cfg: &TrainConfig) -> DenoiserConfig {
    let mut dcfg = cfg.denoiser.clone();
    dcfg.steps = cfg.schedule.steps;
    dcfg.n_cond = cfg.encoder.k_keep;
    dcfg.d_cond = cfg.encoder.d_txt;
    dcfg.latent_channels = cfg.autoencoder.latent_channels;
    dcfg.latent_side = cfg.autoencoder.latent_side();
    dcfg
}

pub fn fresh_models(cfg: &TrainConfig) -> Result<Models> {
    Ok(Models {
        autoencoder: Autoencoder::new(cfg.autoencoder.clone(), rng::derive_seed(cfg.seed, "init", 0))?,
        encoder: ContrastiveEncoder::new(cfg.encoder.clone(), rng::derive_seed(cfg.seed, "init", 1))?,
        denoiser: Denoiser::new(denoiser_config(cfg), rng::derive_seed(cfg.seed, "init", 2))?,
        schedule: schedule(&cfg.schedule)?,
    })
}

/// Trains the requested models in dependency order on the train split.
/// The denoiser is fit on latents and conditions of the current
/// autoencoder and encoder.
pub fn train_models(ds: &Dataset, cfg: &TrainConfig, models: &mut Models, stages: &[Stage]) -> Result<TrainingCurves> {
    let images = ds.images(&ds.train)?;
    let captions = ds.captions(&ds.train);
    let mut curves = TrainingCurves::default();
    if stages.contains(&Stage::Autoencoder) {
        let h = hyper_for(&cfg.autoencoder_train, cfg.seed, "train-autoencoder");
        curves.autoencoder = autoencoder::train_autoencoder(&mut models.autoencoder, &images, &h)?;
    }
    if stages.contains(&Stage::Encoder) {
        let h = hyper_for(&cfg.encoder_train, cfg.seed, "train-encoder");
        let held_images = ds.images(&ds.test)?;
        let held_captions = ds.captions(&ds.test);
        let report = encoder::train_contrastive(
            &mut models.encoder,
            &images,
            &captions,
            Some((&held_images, &held_captions)),
            &h,
        )?;
        curves.encoder_loss = report.loss;
        curves.encoder_retrieval = report.retrieval;
    }
    if stages.contains(&Stage::Denoiser) {
        let h = hyper_for(&cfg.denoiser_train, cfg.seed, "train-denoiser");
        let latents = encoder::embed_in_chunks(&images, 256, |x| models.autoencoder.encode_batch(x))?;
        let conds: Vec<Tensor> = captions
            .iter()
            .map(|c| models.encoder.condition(c))
            .collect::<Result<_>>()?;
        let conds = nn::stack(&conds)?;
        curves.denoiser = diffusion::train_denoiser(&mut models.denoiser, &latents, &conds, &models.schedule, &h)?;
    }
    Ok(curves)
}

/// Hash identifying the trained weights that produced a feature table.
pub fn models_hash(models: &Models) -> String {
    let hashes = [
        models.autoencoder.params.hash(),
        models.encoder.params.hash(),
        models.denoiser.params.hash(),
    ];
    sha256_parts(hashes.iter().map(|h| h.as_bytes()))
}

/// Ground-truth features of every scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub weights_hash: String,
    pub scenes: Vec<SceneFeatures>,
}

impl FeatureTable {
    pub fn layout(&self) -> neurosim::FeatureLayout {
        self.scenes[0].layout()
    }

    /// Per-dim scales over the train split.
    pub fn scales(&self, ds: &Dataset) -> Result<Vec<f32>> {
        let rows: Vec<Vec<f32>> = ds.train.iter().map(|&i| self.scenes[i].concat()).collect();
        neurosim::feature_scales(&rows)
    }
}

pub fn compute_features(ds: &Dataset, models: &Models) -> Result<FeatureTable> {
    let weights_hash = models_hash(models);
    let all: Vec<usize> = (0..ds.scenes.len()).collect();
    let images = ds.images(&all)?;
    let latents = encoder::embed_in_chunks(&images, 256, |x| models.autoencoder.encode_batch(x))?;
    let mut scenes = Vec::with_capacity(all.len());
    for &i in &all {
        let rec = ds.record(i);
        let feats = models.encoder.image_features(&rec.image)?;
        scenes.push(SceneFeatures {
            c: models.encoder.condition(&rec.tokens)?,
            z: Tensor::vector(latents.row(i).to_vec()),
            taps: feats.taps,
            weights_hash: weights_hash.clone(),
        });
    }
    Ok(FeatureTable { weights_hash, scenes })
}

/// Trial-averaged voxels of every scene for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectVoxels {
    pub subject: u64,
    /// `(n_scenes, n_voxels)`.
    pub averaged: Tensor,
    /// Trial count of each scene.
    pub trials: Vec<usize>,
    /// Every single trial, scene by scene: `(sum of trials, n_voxels)`.
    pub all_trials: Tensor,
}

pub fn subject_model(ds: &Dataset, table: &FeatureTable, subject: u64) -> Result<SubjectModel> {
    SubjectModel::new(subject, &table.layout(), &table.scales(ds)?, &table.weights_hash, &ds.sim)
}

pub fn simulate_subject(ds: &Dataset, table: &FeatureTable, subject: u64) -> Result<SubjectVoxels> {
    let model = subject_model(ds, table, subject)?;
    let n = ds.scenes.len();
    let mut data = Vec::with_capacity(n * model.n_voxels());
    let mut raw = Vec::with_capacity(n * model.n_voxels() * ds.sim.max_trials);
    let mut trials = Vec::with_capacity(n);
    let test: std::collections::HashSet<usize> = ds.test.iter().copied().collect();
    for i in 0..n {
        let mut rec = ds.record(i);
        rec.features = Some(table.scenes[i].clone());
        let k = neurosim::trial_count(ds.master_seed, i, test.contains(&i), ds.sim.max_trials);
        let mut r = rng::stream(subject, "voxel-noise", i as u64);
        let v = neurosim::respond(&rec, &model, k, &mut r)?;
        data.extend_from_slice(v.averaged.data());
        for t in &v.trials {
            raw.extend_from_slice(t.data());
        }
        trials.push(k);
    }
    let total = trials.iter().sum::<usize>();
    Ok(SubjectVoxels {
        subject,
        averaged: Tensor::new(vec![n, model.n_voxels()], data)?,
        trials,
        all_trials: Tensor::new(vec![total, model.n_voxels()], raw)?,
    })
}

/// Decoders of one subject: c, z, and one per encoder tap.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDecoders {
    pub subject: u64,
    pub c: FeatureDecoder,
    pub z: FeatureDecoder,
    pub taps: Vec<FeatureDecoder>,
    /// Mean CV r of each space at its chosen lambda: c, z, taps.
    pub cv_r: Vec<f64>,
}

impl SubjectDecoders {
    pub fn spaces(&self) -> Vec<&FeatureDecoder> {
        let mut v = vec![&self.c, &self.z];
        v.extend(self.taps.iter());
        v
    }

    pub fn decode(&self, x: &[f32]) -> Result<DecodedFeatures> {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(DecodedFeatures {
            c: self.c.predict(&x)?,
            z: self.z.predict(&x)?,
            taps: self.taps.iter().map(|d| d.predict(&x)).collect::<Result<_>>()?,
        })
    }
}

fn matrix_cols(rows: &[&[f32]]) -> Matrix<f64> {
    let d = rows[0].len();
    Matrix::from_fn(d, rows.len(), |i, j| rows[j][i] as f64)
}

/// Fits every feature space on the train split; only taps are masked.
pub fn fit_decoders(ds: &Dataset, table: &FeatureTable, vox: &SubjectVoxels, cfg: &DecodeConfig) -> Result<SubjectDecoders> {
    let x_rows: Vec<&[f32]> = ds.train.iter().map(|&i| vox.averaged.row(i)).collect();
    let x = matrix_cols(&x_rows);
    let space = |f: &dyn Fn(&SceneFeatures) -> &Tensor| -> Matrix<f64> {
        let rows: Vec<&[f32]> = ds.train.iter().map(|&i| f(&table.scenes[i]).data()).collect();
        matrix_cols(&rows)
    };
    let (c, rc) = decode::fit_feature_space(&x, &space(&|s| &s.c), false, cfg)?;
    let (z, rz) = decode::fit_feature_space(&x, &space(&|s| &s.z), false, cfg)?;
    let mut taps = Vec::new();
    let mut cv_r = vec![rc, rz];
    for t in 0..table.scenes[0].taps.len() {
        let (d, r) = decode::fit_feature_space(&x, &space(&|s| &s.taps[t]), true, cfg)?;
        taps.push(d);
        cv_r.push(r);
    }
    Ok(SubjectDecoders {
        subject: vox.subject,
        c,
        z,
        taps,
        cv_r,
    })
}

/// Ablation variants reported side by side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutControl,
    WithoutZ,
}

pub const VARIANTS: [Variant; 3] = [Variant::WithoutControl, Variant::WithoutZ, Variant::Full];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutControl => "without_control",
            Variant::WithoutZ => "without_z",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "without_control" => Ok(Variant::WithoutControl),
            "without_z" => Ok(Variant::WithoutZ),
            _ => Err(Error::Usage(format!("unknown variant `{s}`"))),
        }
    }

    pub fn apply(self, base: &ReconstructionConfig) -> ReconstructionConfig {
        let mut c = base.clone();
        c.without_control = self == Variant::WithoutControl;
        c.without_z = self == Variant::WithoutZ;
        c
    }
}

/// A test item that passed the accuracy filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Selected {
    pub item: usize,
    pub accuracy: f64,
    pub decoded: DecodedFeatures,
}

/// Decodes every test item and keeps those at or above `threshold`.
pub fn select_items(
    ds: &Dataset,
    table: &FeatureTable,
    vox: &SubjectVoxels,
    decoders: &SubjectDecoders,
    threshold: f64,
) -> Result<(Vec<Selected>, Vec<(usize, f64)>)> {
    let mut kept = Vec::new();
    let mut all = Vec::new();
    for &i in &ds.test {
        let decoded = decoders.decode(vox.averaged.row(i))?;
        let accuracy = decoded.accuracy(&table.scenes[i]);
        all.push((i, accuracy));
        if accuracy >= threshold {
            kept.push(Selected {
                item: i,
                accuracy,
                decoded,
            });
        }
    }
    Ok((kept, all))
}

/// Worker pool honouring `jobs` (0 means one per core).
pub fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

/// Reconstructs every selected item under one variant; results come back in
/// item order regardless of scheduling.
pub fn reconstruct_items(
    items: &[Selected],
    models: &Models,
    cfg: &ReconstructionConfig,
    jobs: usize,
) -> Result<Vec<ItemReconstruction>> {
    use rayon::prelude::*;
    let run = || {
        items
            .par_iter()
            .map(|s| reconstruct::reconstruct_item(s.item, &s.decoded, models, cfg))
            .collect::<Result<Vec<_>>>()
    };
    if jobs == 1 {
        items
            .iter()
            .map(|s| reconstruct::reconstruct_item(s.item, &s.decoded, models, cfg))
            .collect()
    } else {
        pool(jobs)?.install(run)
    }
}

pub fn evaluate_items(
    ds: &Dataset,
    recons: &[ItemReconstruction],
    models: &Models,
    opts: &MetricsOptions,
) -> Result<Vec<MetricsRecord>> {
    recons
        .iter()
        .map(|r| {
            let truth = neurosim::render(&ds.scenes[r.item]);
            metrics::evaluate_pair(r.item, &r.stage2.image, &truth, &models.encoder, opts)
        })
        .collect()
}

/// Mean pixel correlation of reconstructions against ground truths of other
/// items (cyclic shift by one), the chance level for the metric.
pub fn shuffled_pcc(ds: &Dataset, recons: &[ItemReconstruction]) -> Result<f64> {
    let n = recons.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (k, r) in recons.iter().enumerate() {
        let other = recons[(k + 1) % n].item;
        total += metrics::pixel_correlation(&r.stage2.image, &neurosim::render(&ds.scenes[other]))?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests;
