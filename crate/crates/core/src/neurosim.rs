//! Synthetic stimuli and simulated voxel responses.
//!
//! A scene is one flat-coloured shape on a flat background. Its caption is
//! a fixed-order token sequence `[class, colour, background, column, row,
//! size]`; exact position, size and orientation are left to the image
//! features. Each simulated subject responds to a scene with a sparse
//! random linear read-out of the scene's model features plus Gaussian noise.

use std::collections::HashSet;
use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{CHANNELS, SIZE};
use crate::rng;
use crate::tensor::Tensor;

pub const CLASSES: [&str; 8] = ["square", "circle", "triangle", "cross", "ring", "bar", "ell", "half-disc"];
pub const FG_COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("magenta", [0.85, 0.2, 0.8]),
    ("cyan", [0.1, 0.8, 0.85]),
];
pub const BG_COLORS: [(&str, [f32; 3]); 4] = [
    ("on-black", [0.05, 0.05, 0.05]),
    ("on-gray", [0.5, 0.5, 0.5]),
    ("on-white", [0.95, 0.95, 0.95]),
    ("on-olive", [0.4, 0.4, 0.15]),
];
const COLUMNS: [&str; 3] = ["left", "center", "right"];
const ROWS: [&str; 3] = ["top", "middle", "bottom"];
const SIZES: [&str; 2] = ["small", "large"];

pub const POS_RANGE: (f64, f64) = (0.3, 0.7);
pub const SIZE_RANGE: (f64, f64) = (0.2, 0.4);
pub const PAD: usize = 0;
pub const CAPTION_LEN: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class: usize,
    pub x: f64,
    pub y: f64,
    /// Bounding-box edge as a fraction of the frame.
    pub size: f64,
    pub orientation: f64,
    pub fg: usize,
    pub bg: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if self.class >= CLASSES.len() || self.fg >= FG_COLORS.len() || self.bg >= BG_COLORS.len() {
            return Err(Error::OutOfRange(format!("scene category out of range: {self:?}")));
        }
        if !in_range(self.size, SIZE_RANGE) || !self.orientation.is_finite() {
            return Err(Error::OutOfRange(format!("scene geometry out of range: {self:?}")));
        }
        let reach = self.size / std::f64::consts::SQRT_2;
        let fits = |c: f64| c - reach >= 0.0 && c + reach <= 1.0;
        if !fits(self.x) || !fits(self.y) {
            return Err(Error::OutOfRange(format!("shape leaves the frame: {self:?}")));
        }
        Ok(())
    }

    /// Quantized key used to keep splits disjoint.
    pub fn identity(&self) -> (usize, usize, usize, i64, i64, i64, i64) {
        let q = |v: f64| (v * 1e4).round() as i64;
        (self.class, self.fg, self.bg, q(self.x), q(self.y), q(self.size), q(self.orientation))
    }

    pub fn column(&self) -> usize {
        bucket(self.x, POS_RANGE, 3)
    }

    pub fn row(&self) -> usize {
        bucket(self.y, POS_RANGE, 3)
    }
}

fn bucket(v: f64, (lo, hi): (f64, f64), n: usize) -> usize {
    (((v - lo) / (hi - lo) * n as f64).floor().max(0.0) as usize).min(n - 1)
}

pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
    SceneSpec {
        class: rng.random_range(0..CLASSES.len()),
        x: rng.random_range(POS_RANGE.0..POS_RANGE.1),
        y: rng.random_range(POS_RANGE.0..POS_RANGE.1),
        size: rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1),
        orientation: rng.random_range(0.0..TAU),
        fg: rng.random_range(0..FG_COLORS.len()),
        bg: rng.random_range(0..BG_COLORS.len()),
    }
}

/// Membership test in shape-local coordinates scaled to `[-1, 1]^2`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    let within = u.abs() <= 1.0 && v.abs() <= 1.0;
    match class {
        0 => within,
        1 => r2 <= 1.0,
        2 => within && u.abs() <= (v + 1.0) / 2.0,
        3 => within && (u.abs() <= 0.33 || v.abs() <= 0.33),
        4 => (0.3025..=1.0).contains(&r2),
        5 => u.abs() <= 1.0 && v.abs() <= 0.35,
        6 => within && (u <= -0.2 || v >= 0.2),
        _ => r2 <= 1.0 && v <= 0.0,
    }
}

/// Rasterizes at `32 x 32 x 3` by testing each pixel centre; no anti-aliasing.
pub fn render(spec: &SceneSpec) -> Tensor {
    let fg = FG_COLORS[spec.fg].1;
    let bg = BG_COLORS[spec.bg].1;
    let (s, c) = spec.orientation.sin_cos();
    let half = spec.size / 2.0;
    let mut data = Vec::with_capacity(SIZE * SIZE * CHANNELS);
    for i in 0..SIZE {
        for j in 0..SIZE {
            let dx = (j as f64 + 0.5) / SIZE as f64 - spec.x;
            let dy = (i as f64 + 0.5) / SIZE as f64 - spec.y;
            let u = (c * dx + s * dy) / half;
            let v = (-s * dx + c * dy) / half;
            let col = if inside(spec.class, u, v) { fg } else { bg };
            data.extend_from_slice(&col);
        }
    }
    Tensor::new(vec![SIZE, SIZE, CHANNELS], data).expect("image shape")
}

/// Token names in id order; id 0 is padding.
pub fn vocabulary() -> Vec<String> {
    let mut v = vec!["<pad>".to_string()];
    v.extend(CLASSES.iter().map(|s| s.to_string()));
    v.extend(FG_COLORS.iter().map(|(s, _)| s.to_string()));
    v.extend(BG_COLORS.iter().map(|(s, _)| s.to_string()));
    for group in [&COLUMNS[..], &ROWS[..], &SIZES[..]] {
        v.extend(group.iter().map(|s| s.to_string()));
    }
    v
}

pub fn vocabulary_json() -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = vocabulary()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, serde_json::Value::from(i)))
        .collect();
    serde_json::Value::Object(map)
}

pub fn caption(spec: &SceneSpec) -> Vec<usize> {
    let mut base = 1;
    let mut out = Vec::with_capacity(CAPTION_LEN);
    for (value, count) in [
        (spec.class, CLASSES.len()),
        (spec.fg, FG_COLORS.len()),
        (spec.bg, BG_COLORS.len()),
        (spec.column(), COLUMNS.len()),
        (spec.row(), ROWS.len()),
        (usize::from(spec.size >= 0.3), SIZES.len()),
    ] {
        out.push(base + value);
        base += count;
    }
    out
}

pub fn caption_text(tokens: &[usize]) -> String {
    let vocab = vocabulary();
    tokens
        .iter()
        .map(|&t| vocab.get(t).map(String::as_str).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Dimensions of the feature groups a subject reads from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub c_dim: usize,
    pub z_dim: usize,
    pub tap_dims: Vec<usize>,
}

impl FeatureLayout {
    pub fn total(&self) -> usize {
        self.c_dim + self.z_dim + self.tap_dims.iter().sum::<usize>()
    }

    /// `(start, end)` of every group in the concatenation: c, z, taps.
    pub fn groups(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut at = 0;
        for d in [self.c_dim, self.z_dim].into_iter().chain(self.tap_dims.iter().copied()) {
            out.push((at, at + d));
            at += d;
        }
        out
    }
}

/// Model features of one scene, tagged with the weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFeatures {
    /// Kept condition rows, flattened.
    pub c: Tensor,
    pub z: Tensor,
    pub taps: Vec<Tensor>,
    pub weights_hash: String,
}

impl SceneFeatures {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            c_dim: self.c.numel(),
            z_dim: self.z.numel(),
            tap_dims: self.taps.iter().map(Tensor::numel).collect(),
        }
    }

    pub fn concat(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.layout().total());
        v.extend_from_slice(self.c.data());
        v.extend_from_slice(self.z.data());
        for t in &self.taps {
            v.extend_from_slice(t.data());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: usize,
    pub spec: SceneSpec,
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub features: Option<SceneFeatures>,
}

impl SceneRecord {
    pub fn new(id: usize, spec: SceneSpec) -> Self {
        Self {
            id,
            image: render(&spec),
            tokens: caption(&spec),
            spec,
            features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_voxels: usize,
    /// Fraction of feature dims each voxel reads.
    pub sparsity: f64,
    /// Standard deviation of the noiseless response around its mean.
    pub signal_gain: f64,
    pub sigma: f64,
    pub max_trials: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_voxels: 512,
            sparsity: 0.25,
            signal_gain: 0.2,
            sigma: 0.1,
            max_trials: 3,
        }
    }
}

/// Linear read-out of one simulated subject.
///
/// Each voxel reads a random `sparsity` fraction of the feature dims. Every
/// dim is divided by its training-set scale first, and the weights give each
/// of the three feature spaces (c, z, all taps) equal expected share of the
/// voxel variance, which totals `signal_gain^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectModel {
    pub seed: u64,
    pub sigma: f64,
    /// `(n_voxels, n_features)`, already divided by the feature scales.
    pub weights: Tensor,
    pub weights_hash: String,
}

impl SubjectModel {
    pub fn new(seed: u64, layout: &FeatureLayout, scales: &[f32], weights_hash: &str, cfg: &SimConfig) -> Result<Self> {
        let f = layout.total();
        if scales.len() != f {
            return Err(Error::DimensionMismatch(format!("{} feature scales for {f} features", scales.len())));
        }
        if !(cfg.sigma >= 0.0 && cfg.sparsity > 0.0 && cfg.sparsity <= 1.0 && cfg.n_voxels > 0) {
            return Err(Error::BadRange(format!("invalid simulator config {cfg:?}")));
        }
        let groups = layout.groups();
        let space_of = |j: usize| -> usize {
            let g = groups.iter().position(|&(s, e)| (s..e).contains(&j)).expect("dim in a group");
            g.min(2)
        };
        let mut r = rng::stream(seed, "subject-weights", 0);
        let mut w = vec![0.0f32; cfg.n_voxels * f];
        for v in 0..cfg.n_voxels {
            let picks: Vec<usize> = (0..f).filter(|_| r.random_bool(cfg.sparsity)).collect();
            let mut per_space = [0usize; 3];
            for &j in &picks {
                per_space[space_of(j)] += 1;
            }
            for &j in &picks {
                let share = cfg.signal_gain * (1.0 / (3.0 * per_space[space_of(j)] as f64)).sqrt();
                let g: f64 = r.sample(rand_distr::StandardNormal);
                w[v * f + j] = (g * share / scales[j].max(1e-6) as f64) as f32;
            }
        }
        Ok(Self {
            seed,
            sigma: cfg.sigma,
            weights: Tensor::new(vec![cfg.n_voxels, f], w)?,
            weights_hash: weights_hash.to_string(),
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Noise-free response to a concatenated feature vector.
    pub fn project(&self, features: &[f32]) -> Result<Vec<f32>> {
        let f = self.weights.shape()[1];
        if features.len() != f {
            return Err(Error::DimensionMismatch(format!("{} features for a {f}-feature subject", features.len())));
        }
        Ok((0..self.n_voxels())
            .map(|v| {
                let row = self.weights.row(v);
                row.iter().zip(features).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelRecord {
    pub trials: Vec<Tensor>,
    pub averaged: Tensor,
    pub subject_seed: u64,
}

pub fn respond<R: Rng + ?Sized>(
    record: &SceneRecord,
    subject: &SubjectModel,
    n_trials: usize,
    rng: &mut R,
) -> Result<VoxelRecord> {
    if !(1..=3).contains(&n_trials) {
        return Err(Error::BadRange(format!("trial count {n_trials} not in 1..=3")));
    }
    let feats = record
        .features
        .as_ref()
        .ok_or_else(|| Error::UpstreamMissing {
            stage: "train",
            path: format!("features of scene {}", record.id).into(),
        })?;
    if feats.weights_hash != subject.weights_hash {
        return Err(Error::StaleFeatureCache {
            cached: feats.weights_hash.clone(),
            current: subject.weights_hash.clone(),
        });
    }
    let clean = subject.project(&feats.concat())?;
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let x: Vec<f32> = clean
            .iter()
            .map(|&v| {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                (v as f64 + subject.sigma * n) as f32
            })
            .collect();
        trials.push(Tensor::vector(x));
    }
    let averaged = average_trials(&trials)?;
    Ok(VoxelRecord {
        trials,
        averaged,
        subject_seed: subject.seed,
    })
}

pub fn average_trials(trials: &[Tensor]) -> Result<Tensor> {
    let first = trials.first().ok_or(Error::EmptyDataset)?;
    let mut acc = vec![0.0f64; first.numel()];
    for t in trials {
        if t.shape() != first.shape() {
            return Err(Error::DimensionMismatch("trials differ in length".into()));
        }
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v as f64;
        }
    }
    let n = trials.len() as f64;
    Ok(Tensor::vector(acc.into_iter().map(|a| (a / n) as f32).collect()))
}

/// Per-dim scale (standard deviation, floored) of features over a set.
pub fn feature_scales(rows: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = rows.first().ok_or(Error::EmptyDataset)?;
    let n = rows.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for j in 0..first.len() {
        let mean = rows.iter().map(|r| r[j] as f64).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] as f64 - mean).powi(2)).sum::<f64>() / n;
        out.push(if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() as f32 });
    }
    Ok(out)
}

/// Trial count of a scene: test scenes get every trial, train scenes a
/// seeded count in `1..=max_trials`.
pub fn trial_count(master_seed: u64, scene: usize, is_test: bool, max_trials: usize) -> usize {
    if is_test {
        max_trials
    } else {
        rng::stream(master_seed, "trial-count", scene as u64).random_range(1..=max_trials)
    }
}

/// Scene specs and splits of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub master_seed: u64,
    pub subjects: Vec<u64>,
    pub sim: SimConfig,
    pub scenes: Vec<SceneSpec>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws `n_train + n_test` distinct scenes; the test split is shared by all
/// subjects.
pub fn build_dataset(n_train: usize, n_test: usize, n_subjects: usize, master_seed: u64, sim: SimConfig) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 || n_subjects == 0 {
        return Err(Error::Usage("need at least one train scene, test scene and subject".into()));
    }
    let mut seen = HashSet::new();
    let mut scenes = Vec::with_capacity(n_train + n_test);
    let mut draw = 0u64;
    while scenes.len() < n_train + n_test {
        let spec = sample_scene(&mut rng::stream(master_seed, "scene", draw));
        draw += 1;
        if seen.insert(spec.identity()) {
            scenes.push(spec);
        }
    }
    let subjects = (0..n_subjects as u64)
        .map(|i| rng::derive_seed(master_seed, "subject", i) % 1_000_000)
        .collect();
    Ok(Dataset {
        master_seed,
        subjects,
        sim,
        scenes,
        train: (0..n_train).collect(),
        test: (n_train..n_train + n_test).collect(),
    })
}

impl Dataset {
    pub fn record(&self, id: usize) -> SceneRecord {
        SceneRecord::new(id, self.scenes[id].clone())
    }

    pub fn images(&self, ids: &[usize]) -> Result<Tensor> {
        let imgs: Vec<Tensor> = ids.iter().map(|&i| render(&self.scenes[i])).collect();
        crate::nn::stack(&imgs)
    }

    pub fn captions(&self, ids: &[usize]) -> Vec<Vec<usize>> {
        ids.iter().map(|&i| caption(&self.scenes[i])).collect()
    }
}

#[cfg(test)]
mod tests;
