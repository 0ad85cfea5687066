//! Scaled ablation experiment: every variant on every simulated subject,
//! summarised per subject seed and across seeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord};
use crate::neurosim::Dataset;
use crate::pipeline::{self, FeatureTable, PipelineConfig, Variant, VARIANTS};
use crate::reconstruct::{ItemReconstruction, Models};

/// Mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Self {
        let (mean, se) = metrics::mean_se(values);
        Self { mean, se }
    }

    /// `self` above `other` with disjoint one-s.e. intervals.
    pub fn above(&self, other: &Estimate) -> bool {
        self.mean - self.se > other.mean + other.se
    }
}

/// One variant on one subject.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub recons: Vec<ItemReconstruction>,
    pub metrics: Vec<MetricsRecord>,
}

/// Per-subject means of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMeans {
    pub subject: u64,
    pub count: usize,
    pub clip_cosine: f64,
    pub ssim: f64,
    pub pcc: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Items whose returned loss is below their Stage-1 loss.
    pub improved: usize,
    /// Items whose returned loss is exactly the trajectory minimum.
    pub best_is_minimum: usize,
}

impl VariantRun {
    pub fn means(&self, subject: u64) -> SeedMeans {
        let n = self.recons.len().max(1) as f64;
        let agg = metrics::aggregate(&self.metrics);
        let traj_min = |r: &ItemReconstruction| r.stage2.trajectory.iter().copied().fold(f64::INFINITY, f64::min);
        SeedMeans {
            subject,
            count: self.recons.len(),
            clip_cosine: agg.clip_cosine,
            ssim: agg.ssim,
            pcc: agg.pcc,
            initial_loss: self.recons.iter().map(|r| r.stage2.trajectory[0]).sum::<f64>() / n,
            final_loss: self.recons.iter().map(|r| r.stage2.best_loss).sum::<f64>() / n,
            improved: self
                .recons
                .iter()
                .filter(|r| r.stage2.best_loss < r.stage2.trajectory[0])
                .count(),
            best_is_minimum: self
                .recons
                .iter()
                .filter(|r| r.stage2.best_loss == traj_min(r))
                .count(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SubjectRun {
    pub subject: u64,
    pub cv_r: Vec<f64>,
    /// Decoding accuracy of every test item, before filtering.
    pub accuracies: Vec<(usize, f64)>,
    pub variants: Vec<VariantRun>,
    /// Chance-level pixel correlation of the full variant.
    pub shuffled_pcc: f64,
}

impl SubjectRun {
    pub fn variant(&self, v: Variant) -> Option<&VariantRun> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Simulates, decodes, reconstructs and scores one subject under `variants`.
pub fn run_subject(
    ds: &Dataset,
    table: &FeatureTable,
    models: &Models,
    cfg: &PipelineConfig,
    subject: u64,
    variants: &[Variant],
) -> Result<SubjectRun> {
    let vox = pipeline::simulate_subject(ds, table, subject)?;
    let decoders = pipeline::fit_decoders(ds, table, &vox, &cfg.decode)?;
    let threshold = cfg.reconstruct.threshold;
    let (items, accuracies) = pipeline::select_items(ds, table, &vox, &decoders, threshold)?;
    if items.is_empty() {
        return Err(Error::EmptyAfterFilter(threshold));
    }
    let mut runs = Vec::new();
    for &v in variants {
        let recons = pipeline::reconstruct_items(&items, models, &v.apply(&cfg.reconstruct), cfg.jobs)?;
        let metrics = pipeline::evaluate_items(ds, &recons, models, &cfg.metrics)?;
        runs.push(VariantRun {
            variant: v,
            recons,
            metrics,
        });
    }
    let shuffled_pcc = match runs.iter().find(|r| r.variant == Variant::Full) {
        Some(r) => pipeline::shuffled_pcc(ds, &r.recons)?,
        None => 0.0,
    };
    Ok(SubjectRun {
        subject,
        cv_r: decoders.cv_r,
        accuracies,
        variants: runs,
        shuffled_pcc,
    })
}

/// Across-seed summary of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: Vec<SeedMeans>,
    pub clip_cosine: Estimate,
    pub ssim: Estimate,
    pub pcc: Estimate,
    pub final_loss: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: u64,
    pub cv_r: Vec<f64>,
    pub items: usize,
    pub full_pcc: f64,
    pub shuffled_pcc: f64,
}

/// Variant comparison across subject seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub subjects: Vec<SubjectSummary>,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    pub fn from_runs(runs: &[SubjectRun]) -> Self {
        let variants = VARIANTS
            .iter()
            .filter_map(|&v| {
                let seeds: Vec<SeedMeans> = runs
                    .iter()
                    .filter_map(|r| r.variant(v).map(|vr| vr.means(r.subject)))
                    .collect();
                if seeds.is_empty() {
                    return None;
                }
                let col = |f: fn(&SeedMeans) -> f64| Estimate::of(&seeds.iter().map(f).collect::<Vec<_>>());
                Some(VariantSummary {
                    variant: v,
                    clip_cosine: col(|s| s.clip_cosine),
                    ssim: col(|s| s.ssim),
                    pcc: col(|s| s.pcc),
                    final_loss: col(|s| s.final_loss),
                    seeds,
                })
            })
            .collect();
        let subjects = runs
            .iter()
            .map(|r| SubjectSummary {
                subject: r.subject,
                cv_r: r.cv_r.clone(),
                items: r.variants.first().map_or(0, |v| v.recons.len()),
                full_pcc: r.variant(Variant::Full).map_or(0.0, |v| metrics::aggregate(&v.metrics).pcc),
                shuffled_pcc: r.shuffled_pcc,
            })
            .collect();
        Self { subjects, variants }
    }
}

/// Runs all three variants for every subject of the dataset.
pub fn run_ablation_experiment(
    ds: &Dataset,
    table: &FeatureTable,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<(AblationReport, Vec<SubjectRun>)> {
    let runs = ds
        .subjects
        .iter()
        .map(|&s| run_subject(ds, table, models, cfg, s, &VARIANTS))
        .collect::<Result<Vec<_>>>()?;
    Ok((AblationReport::from_runs(&runs), runs))
}
