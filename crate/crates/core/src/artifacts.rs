//! On-disk form of a run. Everything lives under one dataset directory:
//!
//! ```text
//! manifest.json                 scene specs, captions, splits, subjects, hash
//! vocabulary.json               token -> id
//! images/<id>.ppm
//! timing.json                   wall-clock seconds per command (never hashed)
//! models/manifest.json          train config, weight hashes, dependencies
//! models/<name>/                TNSR bundle per model
//! models/<name>_loss.csv
//! features/                     ground-truth c, z, taps for every scene
//! voxels/<subject>/             trial-averaged and single-trial responses
//! decoders/<subject>/           TNSR bundle of every fitted decoder
//! runs/<subject>/<variant>/     reconstructions, trajectories, metrics
//! report/                       per-variant CSVs and montages
//! ```
//!
//! Each manifest records the hashes of what it was built from, and every
//! reader checks them before use. Missing inputs surface as
//! [`Error::UpstreamMissing`] naming the command that produces them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::decode::{DecodeConfig, FeatureDecoder, FeatureMask, Matrix, Preprocess, RidgeDecoder};
use crate::diffusion::Denoiser;
use crate::encoder::ContrastiveEncoder;
use crate::error::{Error, Result};
use crate::image;
use crate::metrics::{self, Aggregate, MetricsRecord};
use crate::neurosim::{self, Dataset, SceneFeatures, SceneSpec};
use crate::pipeline::{self, DataConfig, FeatureTable, Stage, SubjectDecoders, SubjectVoxels, TrainConfig, TrainingCurves};
use crate::reconstruct::{ItemReconstruction, Models, ReconstructionConfig};
use crate::store::{read_json, sha256_hex, sha256_parts, write_bytes, write_json, ParamStore};
use crate::tensor::{io, Tensor};

pub const DATASET_FORMAT: &str = "mindkit-dataset/1";

/// Paths inside a dataset directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn image(&self, id: usize) -> PathBuf {
        self.root.join("images").join(format!("{id}.ppm"))
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.json")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn voxels(&self, subject: u64) -> PathBuf {
        self.root.join("voxels").join(subject.to_string())
    }

    pub fn decoders(&self, subject: u64) -> PathBuf {
        self.root.join("decoders").join(subject.to_string())
    }

    pub fn run(&self, subject: u64, variant: &str) -> PathBuf {
        self.root.join("runs").join(subject.to_string()).join(variant)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::UpstreamMissing {
            stage,
            path: path.to_path_buf(),
        })
    }
}

fn check_hash(what: impl Into<String>, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::HashMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Adds `seconds` for `command` to `timing.json`.
pub fn record_timing(layout: &Layout, command: &str, seconds: f64) -> Result<()> {
    let path = layout.timing();
    let mut map: BTreeMap<String, f64> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
    map.insert(command.to_string(), seconds);
    write_json(&path, &map)
}

// ---------------------------------------------------------------- dataset

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: usize,
    pub spec: SceneSpec,
    pub caption: Vec<usize>,
    pub image_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    /// SHA-256 of this manifest serialized with an empty `hash`.
    pub hash: String,
    pub config: DataConfig,
    pub subjects: Vec<u64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    fn content_hash(&self) -> Result<String> {
        let mut m = self.clone();
        m.hash.clear();
        json_hash(&m)
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            master_seed: self.config.seed,
            subjects: self.subjects.clone(),
            sim: self.config.sim.clone(),
            scenes: self.scenes.iter().map(|s| s.spec.clone()).collect(),
            train: self.train.clone(),
            test: self.test.clone(),
        }
    }
}

/// A dataset read back from disk together with its verified hash.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub config: DataConfig,
    pub dataset: Dataset,
    pub hash: String,
}

/// Writes images, vocabulary and manifest; returns the dataset hash.
pub fn write_dataset(layout: &Layout, cfg: &DataConfig, ds: &Dataset) -> Result<String> {
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let mut scenes = Vec::with_capacity(ds.scenes.len());
    for (id, spec) in ds.scenes.iter().enumerate() {
        let bytes = image::to_ppm(&neurosim::render(spec))?;
        write_bytes(&layout.image(id), &bytes)?;
        scenes.push(SceneEntry {
            id,
            spec: spec.clone(),
            caption: neurosim::caption(spec),
            image_sha256: sha256_hex(&bytes),
        });
    }
    write_json(&layout.root.join("vocabulary.json"), &neurosim::vocabulary_json())?;
    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        hash: String::new(),
        config: cfg.clone(),
        subjects: ds.subjects.clone(),
        train: ds.train.clone(),
        test: ds.test.clone(),
        scenes,
    };
    manifest.hash = manifest.content_hash()?;
    write_json(&layout.manifest(), &manifest)?;
    Ok(manifest.hash)
}

/// Reads the dataset manifest and verifies it and every image file.
pub fn read_dataset(layout: &Layout) -> Result<LoadedDataset> {
    let path = layout.manifest();
    require(&path, "gen-data")?;
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unknown dataset format `{}`", manifest.format)));
    }
    check_hash(path.display().to_string(), &manifest.hash, &manifest.content_hash()?)?;
    for s in &manifest.scenes {
        let img = layout.image(s.id);
        require(&img, "gen-data")?;
        let bytes = fs::read(&img).map_err(|e| Error::io(&img, e))?;
        check_hash(img.display().to_string(), &s.image_sha256, &sha256_hex(&bytes))?;
    }
    Ok(LoadedDataset {
        config: manifest.config.clone(),
        dataset: manifest.dataset(),
        hash: manifest.hash,
    })
}

// ----------------------------------------------------------------- models

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub hash: String,
    pub epochs: usize,
    /// Hashes of the models this one was trained on top of.
    pub depends_on: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelsManifest {
    pub dataset_hash: String,
    pub config: TrainConfig,
    pub models: BTreeMap<String, ModelEntry>,
}

pub fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Autoencoder => "autoencoder",
        Stage::Encoder => "encoder",
        Stage::Denoiser => "denoiser",
    }
}

fn write_curve(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

fn model_params(models: &Models, s: Stage) -> &ParamStore {
    match s {
        Stage::Autoencoder => &models.autoencoder.params,
        Stage::Encoder => &models.encoder.params,
        Stage::Denoiser => &models.denoiser.params,
    }
}

/// Starting point for `train`: saved bundles where present and compatible,
/// fresh initialisation otherwise.
pub fn models_for_training(layout: &Layout, dataset_hash: &str, cfg: &TrainConfig) -> Result<Models> {
    let mut models = pipeline::fresh_models(cfg)?;
    let path = layout.models().join("manifest.json");
    if !path.exists() {
        return Ok(models);
    }
    let manifest: ModelsManifest = read_json(&path)?;
    if manifest.dataset_hash != dataset_hash || manifest.config != *cfg {
        return Ok(models);
    }
    for name in manifest.models.keys() {
        let (params, _) = ParamStore::load(&layout.models().join(name))?;
        match name.as_str() {
            "autoencoder" => models.autoencoder = Autoencoder::from_params(cfg.autoencoder.clone(), params)?,
            "encoder" => models.encoder = ContrastiveEncoder::from_params(cfg.encoder.clone(), params)?,
            "denoiser" => models.denoiser = Denoiser::from_params(pipeline::denoiser_config(cfg), params)?,
            other => return Err(Error::Format(format!("unknown model `{other}` in models manifest"))),
        }
    }
    Ok(models)
}

/// Saves the bundles of `stages` and their loss curves, and records them in
/// the models manifest.
pub fn save_models(
    layout: &Layout,
    dataset_hash: &str,
    cfg: &TrainConfig,
    models: &Models,
    stages: &[Stage],
    curves: &TrainingCurves,
) -> Result<()> {
    let dir = layout.models();
    let path = dir.join("manifest.json");
    let mut manifest = match path.exists() {
        true => read_json::<ModelsManifest>(&path)?,
        false => ModelsManifest {
            dataset_hash: dataset_hash.to_string(),
            config: cfg.clone(),
            models: BTreeMap::new(),
        },
    };
    if manifest.dataset_hash != dataset_hash || manifest.config != *cfg {
        manifest = ModelsManifest {
            dataset_hash: dataset_hash.to_string(),
            config: cfg.clone(),
            models: BTreeMap::new(),
        };
    }
    for &s in stages {
        let name = stage_name(s);
        let config = match s {
            Stage::Autoencoder => serde_json::to_value(&cfg.autoencoder)?,
            Stage::Encoder => serde_json::to_value(&cfg.encoder)?,
            Stage::Denoiser => serde_json::to_value(pipeline::denoiser_config(cfg))?,
        };
        let hash = model_params(models, s).save(&dir.join(name), &config)?;
        let mut depends_on = BTreeMap::new();
        let epochs = match s {
            Stage::Autoencoder => {
                write_curve(
                    &dir.join("autoencoder_loss.csv"),
                    "epoch,loss",
                    curves.autoencoder.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)),
                )?;
                curves.autoencoder.len()
            }
            Stage::Encoder => {
                write_curve(
                    &dir.join("encoder_loss.csv"),
                    "epoch,loss,retrieval",
                    curves
                        .encoder_loss
                        .iter()
                        .zip(&curves.encoder_retrieval)
                        .enumerate()
                        .map(|(i, (l, r))| format!("{},{l},{r}", i + 1)),
                )?;
                curves.encoder_loss.len()
            }
            Stage::Denoiser => {
                write_curve(
                    &dir.join("denoiser_loss.csv"),
                    "epoch,loss",
                    curves.denoiser.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)),
                )?;
                depends_on.insert("autoencoder".into(), models.autoencoder.params.hash());
                depends_on.insert("encoder".into(), models.encoder.params.hash());
                curves.denoiser.len()
            }
        };
        manifest.models.insert(
            name.to_string(),
            ModelEntry {
                hash,
                epochs,
                depends_on,
            },
        );
    }
    write_json(&path, &manifest)
}

/// Loads all three trained models, checking bundle hashes, the dataset link
/// and that the denoiser was trained on the current autoencoder and encoder.
pub fn load_models(layout: &Layout, dataset_hash: &str) -> Result<(Models, TrainConfig)> {
    let dir = layout.models();
    let path = dir.join("manifest.json");
    require(&path, "train")?;
    let manifest: ModelsManifest = read_json(&path)?;
    check_hash("dataset used by models", &manifest.dataset_hash, dataset_hash)?;
    let cfg = manifest.config.clone();
    let mut stores = BTreeMap::new();
    for s in pipeline::ALL_STAGES {
        let name = stage_name(s);
        let entry = manifest.models.get(name).ok_or_else(|| Error::UpstreamMissing {
            stage: "train",
            path: dir.join(name),
        })?;
        require(&dir.join(name).join("manifest.json"), "train")?;
        let (params, _) = ParamStore::load(&dir.join(name))?;
        check_hash(format!("model {name}"), &entry.hash, &params.hash())?;
        stores.insert(name, params);
    }
    for (dep, hash) in &manifest.models["denoiser"].depends_on {
        let current = stores.get(dep.as_str()).map(|p| p.hash()).unwrap_or_default();
        check_hash(format!("{dep} under the denoiser"), hash, &current)?;
    }
    let models = Models {
        autoencoder: Autoencoder::from_params(cfg.autoencoder.clone(), stores.remove("autoencoder").expect("loaded"))?,
        encoder: ContrastiveEncoder::from_params(cfg.encoder.clone(), stores.remove("encoder").expect("loaded"))?,
        denoiser: Denoiser::from_params(pipeline::denoiser_config(&cfg), stores.remove("denoiser").expect("loaded"))?,
        schedule: pipeline::schedule(&cfg.schedule)?,
    };
    Ok((models, cfg))
}

// --------------------------------------------------------------- features

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FeaturesManifest {
    dataset_hash: String,
    weights_hash: String,
    bundle_hash: String,
    taps: usize,
}

fn features_bundle(table: &FeatureTable) -> Result<ParamStore> {
    let stack = |f: &dyn Fn(&SceneFeatures) -> &Tensor| -> Result<Tensor> {
        let rows: Vec<Tensor> = table.scenes.iter().map(|s| f(s).clone()).collect();
        crate::nn::stack(&rows)
    };
    let mut p = ParamStore::new();
    p.add("c", stack(&|s| &s.c)?);
    p.add("z", stack(&|s| &s.z)?);
    for k in 0..table.scenes[0].taps.len() {
        p.add(format!("tap{}", k + 1), stack(&|s| &s.taps[k])?);
    }
    Ok(p)
}

/// Feature cache for the current models: reused when its weights hash
/// matches, recomputed and rewritten otherwise.
pub fn ensure_features(layout: &Layout, data: &LoadedDataset, models: &Models) -> Result<FeatureTable> {
    let dir = layout.features();
    let path = dir.join("cache.json");
    let weights_hash = pipeline::models_hash(models);
    if path.exists() {
        let m: FeaturesManifest = read_json(&path)?;
        if m.weights_hash == weights_hash && m.dataset_hash == data.hash {
            let (p, _) = ParamStore::load(&dir)?;
            check_hash("feature cache", &m.bundle_hash, &p.hash())?;
            return table_from_bundle(&p, m.taps, weights_hash);
        }
    }
    let table = pipeline::compute_features(&data.dataset, models)?;
    let p = features_bundle(&table)?;
    let bundle_hash = p.save(&dir, &serde_json::json!({ "weights_hash": weights_hash }))?;
    write_json(
        &path,
        &FeaturesManifest {
            dataset_hash: data.hash.clone(),
            weights_hash,
            bundle_hash,
            taps: table.scenes[0].taps.len(),
        },
    )?;
    Ok(table)
}

fn table_from_bundle(p: &ParamStore, taps: usize, weights_hash: String) -> Result<FeatureTable> {
    let n = p.get(0).shape()[0];
    let row = |slot: usize, i: usize| Tensor::vector(p.get(slot).row(i).to_vec());
    let scenes = (0..n)
        .map(|i| SceneFeatures {
            c: row(0, i),
            z: row(1, i),
            taps: (0..taps).map(|k| row(2 + k, i)).collect(),
            weights_hash: weights_hash.clone(),
        })
        .collect();
    Ok(FeatureTable { weights_hash, scenes })
}

// ----------------------------------------------------------------- voxels

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VoxelsManifest {
    subject: u64,
    dataset_hash: String,
    weights_hash: String,
    trials: Vec<usize>,
    averaged_sha256: String,
    trials_sha256: String,
}

pub fn save_voxels(layout: &Layout, dataset_hash: &str, weights_hash: &str, v: &SubjectVoxels) -> Result<()> {
    let dir = layout.voxels(v.subject);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::write(&dir.join("averaged.tnsr"), &v.averaged)?;
    io::write(&dir.join("trials.tnsr"), &v.all_trials)?;
    write_json(
        &dir.join("manifest.json"),
        &VoxelsManifest {
            subject: v.subject,
            dataset_hash: dataset_hash.to_string(),
            weights_hash: weights_hash.to_string(),
            trials: v.trials.clone(),
            averaged_sha256: sha256_hex(&v.averaged.to_le_bytes()),
            trials_sha256: sha256_hex(&v.all_trials.to_le_bytes()),
        },
    )
}

/// Loads a subject's voxels; responses simulated from other weights are
/// rejected as stale.
pub fn load_voxels(layout: &Layout, dataset_hash: &str, weights_hash: &str, subject: u64) -> Result<SubjectVoxels> {
    let dir = layout.voxels(subject);
    require(&dir.join("manifest.json"), "fit-decoders")?;
    let m: VoxelsManifest = read_json(&dir.join("manifest.json"))?;
    check_hash("dataset used by voxels", &m.dataset_hash, dataset_hash)?;
    if m.weights_hash != weights_hash {
        return Err(Error::StaleFeatureCache {
            cached: m.weights_hash,
            current: weights_hash.to_string(),
        });
    }
    let averaged = io::read(&dir.join("averaged.tnsr"))?;
    let all_trials = io::read(&dir.join("trials.tnsr"))?;
    check_hash("averaged voxels", &m.averaged_sha256, &sha256_hex(&averaged.to_le_bytes()))?;
    check_hash("single-trial voxels", &m.trials_sha256, &sha256_hex(&all_trials.to_le_bytes()))?;
    Ok(SubjectVoxels {
        subject,
        averaged,
        trials: m.trials,
        all_trials,
    })
}

// --------------------------------------------------------------- decoders

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceInfo {
    pub name: String,
    pub lambda: f64,
    pub cv_r: f64,
    pub preprocess: Preprocess,
    pub dims: usize,
    pub kept: usize,
    pub keep_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodersInfo {
    pub subject: u64,
    pub dataset_hash: String,
    pub weights_hash: String,
    pub voxels_hash: String,
    pub config: DecodeConfig,
    pub spaces: Vec<SpaceInfo>,
}

fn space_names(n_taps: usize) -> Vec<String> {
    let mut v = vec!["c".to_string(), "z".to_string()];
    v.extend((1..=n_taps).map(|k| format!("tap{k}")));
    v
}

fn f32_tensor(shape: Vec<usize>, v: impl Iterator<Item = f64>) -> Result<Tensor> {
    Tensor::new(shape, v.map(|x| x as f32).collect())
}

fn voxels_hash(v: &SubjectVoxels) -> String {
    sha256_parts([v.averaged.to_le_bytes().as_slice()])
}

/// Saves a subject's decoders as one TNSR bundle; returns its hash.
pub fn save_decoders(
    layout: &Layout,
    dataset_hash: &str,
    weights_hash: &str,
    voxels: &SubjectVoxels,
    cfg: &DecodeConfig,
    d: &SubjectDecoders,
) -> Result<String> {
    let mut p = ParamStore::new();
    let names = space_names(d.taps.len());
    let mut spaces = Vec::new();
    for ((name, fd), &r) in names.iter().zip(d.spaces()).zip(&d.cv_r) {
        let dec = &fd.decoder;
        let (dims, vox) = (dec.weights.nrows(), dec.weights.ncols());
        p.add(
            format!("{name}.weights"),
            f32_tensor(vec![dims, vox], (0..dims).flat_map(|i| (0..vox).map(move |j| dec.weights[(i, j)])))?,
        );
        p.add(format!("{name}.bias"), f32_tensor(vec![dims], dec.bias.iter().copied())?);
        p.add(format!("{name}.voxel_mean"), f32_tensor(vec![vox], dec.voxel_mean.iter().copied())?);
        p.add(format!("{name}.voxel_scale"), f32_tensor(vec![vox], dec.voxel_scale.iter().copied())?);
        p.add(format!("{name}.r"), f32_tensor(vec![fd.mask.r.len()], fd.mask.r.iter().copied())?);
        p.add(
            format!("{name}.keep"),
            f32_tensor(vec![fd.mask.keep.len()], fd.mask.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }))?,
        );
        spaces.push(SpaceInfo {
            name: name.clone(),
            lambda: dec.lambda,
            cv_r: r,
            preprocess: dec.preprocess,
            dims: fd.mask.keep.len(),
            kept: fd.mask.count(),
            keep_fraction: fd.mask.fraction,
        });
    }
    let info = DecodersInfo {
        subject: d.subject,
        dataset_hash: dataset_hash.to_string(),
        weights_hash: weights_hash.to_string(),
        voxels_hash: voxels_hash(voxels),
        config: cfg.clone(),
        spaces,
    };
    p.save(&layout.decoders(d.subject), &serde_json::to_value(&info)?)
}

/// Loads a subject's decoders; they must have been fit on the current
/// dataset and model weights.
pub fn load_decoders(layout: &Layout, dataset_hash: &str, weights_hash: &str, subject: u64) -> Result<(SubjectDecoders, String)> {
    let dir = layout.decoders(subject);
    require(&dir.join("manifest.json"), "fit-decoders")?;
    let (p, info) = ParamStore::load(&dir)?;
    let info: DecodersInfo = serde_json::from_value(info)?;
    check_hash("dataset used by decoders", &info.dataset_hash, dataset_hash)?;
    if info.weights_hash != weights_hash {
        return Err(Error::StaleFeatureCache {
            cached: info.weights_hash,
            current: weights_hash.to_string(),
        });
    }
    let mut by_name: BTreeMap<String, Tensor> = p.names().map(String::from).zip(p.tensors().cloned()).collect();
    let mut take = |k: String| by_name.remove(&k).ok_or_else(|| Error::Format(format!("decoder bundle lacks {k}")));
    let mut decoders = Vec::new();
    for s in &info.spaces {
        let w = take(format!("{}.weights", s.name))?;
        let (dims, vox) = (w.shape()[0], w.shape()[1]);
        let vec64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let decoder = RidgeDecoder {
            weights: Matrix::from_row_slice(dims, vox, &vec64(&w)),
            bias: nalgebra::DVector::from_vec(vec64(&take(format!("{}.bias", s.name))?)),
            lambda: s.lambda,
            preprocess: s.preprocess,
            voxel_mean: nalgebra::DVector::from_vec(vec64(&take(format!("{}.voxel_mean", s.name))?)),
            voxel_scale: nalgebra::DVector::from_vec(vec64(&take(format!("{}.voxel_scale", s.name))?)),
        };
        let mask = FeatureMask {
            r: vec64(&take(format!("{}.r", s.name))?),
            keep: take(format!("{}.keep", s.name))?.data().iter().map(|&v| v > 0.5).collect(),
            fraction: s.keep_fraction,
        };
        if mask.count() != dims || mask.keep.len() != s.dims {
            return Err(Error::Format(format!("decoder {} disagrees with its mask", s.name)));
        }
        decoders.push(FeatureDecoder { decoder, mask });
    }
    if decoders.len() < 3 {
        return Err(Error::Format("decoder bundle needs c, z and at least one tap".into()));
    }
    let mut it = decoders.into_iter();
    let c = it.next().expect("len checked");
    let z = it.next().expect("len checked");
    let d = SubjectDecoders {
        subject,
        c,
        z,
        taps: it.collect(),
        cv_r: info.spaces.iter().map(|s| s.cv_r).collect(),
    };
    Ok((d, p.hash()))
}

// ------------------------------------------------------------------- runs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item: usize,
    pub accuracy: f64,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subject: u64,
    pub variant: String,
    pub config: ReconstructionConfig,
    pub dataset_hash: String,
    pub weights_hash: String,
    pub decoders_hash: String,
    /// Every test item's decoding accuracy, before filtering.
    pub accuracies: Vec<(usize, f64)>,
    pub items: Vec<ItemSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub settings: serde_json::Value,
    pub subject: u64,
    pub variant: String,
    pub records: Vec<MetricsRecord>,
    pub aggregate: Aggregate,
}

pub fn save_run(dir: &Path, manifest: &RunManifest, recons: &[ItemReconstruction]) -> Result<()> {
    for r in recons {
        image::write_ppm(&dir.join("recon").join(format!("{}.ppm", r.item)), &r.stage2.image)?;
        image::write_ppm(&dir.join("stage1").join(format!("{}.ppm", r.item)), &r.stage1)?;
        write_curve(
            &dir.join("trajectory").join(format!("{}.csv", r.item)),
            "iteration,loss",
            r.stage2.trajectory.iter().enumerate().map(|(k, l)| format!("{k},{l}")),
        )?;
    }
    write_json(&dir.join("manifest.json"), manifest)
}

pub fn read_run(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.json");
    require(&path, "reconstruct")?;
    read_json(&path)
}

/// Reconstructed (`recon`) or Stage-1 (`stage1`) image of an item.
pub fn read_run_image(dir: &Path, kind: &str, item: usize) -> Result<Tensor> {
    let path = dir.join(kind).join(format!("{item}.ppm"));
    require(&path, "reconstruct")?;
    image::read_ppm(&path)
}

pub fn save_metrics(dir: &Path, file: &MetricsFile) -> Result<()> {
    write_json(&dir.join("metrics.json"), file)?;
    let a = &file.aggregate;
    let rows = file
        .records
        .iter()
        .map(|r| format!("{},{},{},{}", r.item, r.clip_cosine, r.ssim, r.pcc))
        .chain(std::iter::once(format!("mean,{},{},{}", a.clip_cosine, a.ssim, a.pcc)));
    write_curve(&dir.join("metrics.csv"), "item,clip,ssim,pcc", rows)
}

pub fn read_metrics(dir: &Path) -> Result<MetricsFile> {
    let path = dir.join("metrics.json");
    require(&path, "evaluate")?;
    read_json(&path)
}

pub fn metrics_file(subject: u64, variant: &str, records: Vec<MetricsRecord>) -> MetricsFile {
    MetricsFile {
        settings: metrics::settings_json(),
        subject,
        variant: variant.to_string(),
        aggregate: metrics::aggregate(&records),
        records,
    }
}

/// Writes a CSV with one metrics row per variant of one subject.
pub fn write_table(path: &Path, subject: u64, rows: &[(String, Aggregate)]) -> Result<()> {
    write_curve(
        path,
        "subject,method,n,clip,clip_se,ssim,ssim_se,pcc,pcc_se",
        rows.iter().map(|(name, a)| {
            format!(
                "{subject},{name},{},{},{},{},{},{},{}",
                a.count, a.clip_cosine, a.clip_cosine_se, a.ssim, a.ssim_se, a.pcc, a.pcc_se
            )
        }),
    )
}
