//! The pipeline stages as operations on a dataset directory. The command
//! line is a thin layer over these; tests drive them directly.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::artifacts::{self as art, ItemSummary, Layout, MetricsFile, RunManifest};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::image;
use crate::metrics::{self, Aggregate, MetricsOptions};
use crate::pipeline::{self, DataConfig, Stage, TrainConfig, Variant, VARIANTS};
use crate::reconstruct::ReconstructionConfig;
use crate::store::write_json;
use crate::suite::Estimate;

fn timed<T>(layout: &Layout, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    art::record_timing(layout, name, start.elapsed().as_secs_f64())?;
    Ok(out)
}

/// Resolves a subject given either as its seed or as its index.
pub fn resolve_subject(subjects: &[u64], given: u64) -> Result<u64> {
    if subjects.contains(&given) {
        return Ok(given);
    }
    subjects
        .get(given as usize)
        .copied()
        .ok_or_else(|| Error::Usage(format!("unknown subject {given}; dataset has {subjects:?}")))
}

pub fn gen_data(out: &Path, cfg: &DataConfig) -> Result<String> {
    let layout = Layout::new(out);
    timed(&layout, "gen-data", || {
        let ds = pipeline::generate_dataset(cfg)?;
        art::write_dataset(&layout, cfg, &ds)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub weights_hash: String,
    pub final_losses: Vec<(String, f64)>,
}

pub fn train(dataset: &Path, cfg: &TrainConfig, stages: &[Stage]) -> Result<TrainSummary> {
    let layout = Layout::new(dataset);
    timed(&layout, "train", || {
        let data = art::read_dataset(&layout)?;
        let mut models = art::models_for_training(&layout, &data.hash, cfg)?;
        let curves = pipeline::train_models(&data.dataset, cfg, &mut models, stages)?;
        art::save_models(&layout, &data.hash, cfg, &models, stages, &curves)?;
        let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
        let mut final_losses = Vec::new();
        for &s in stages {
            let v = match s {
                Stage::Autoencoder => last(&curves.autoencoder),
                Stage::Encoder => last(&curves.encoder_loss),
                Stage::Denoiser => last(&curves.denoiser),
            };
            final_losses.push((art::stage_name(s).to_string(), v));
        }
        Ok(TrainSummary {
            weights_hash: pipeline::models_hash(&models),
            final_losses,
        })
    })
}

/// CV accuracy of every fitted space, per subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderSummary {
    pub subject: u64,
    pub cv_r: Vec<f64>,
    pub hash: String,
}

/// Simulates voxels and fits decoders for `subjects` (all when empty).
pub fn fit_decoders(dataset: &Path, cfg: &DecodeConfig, subjects: &[u64]) -> Result<Vec<DecoderSummary>> {
    let layout = Layout::new(dataset);
    timed(&layout, "fit-decoders", || {
        let data = art::read_dataset(&layout)?;
        let (models, _) = art::load_models(&layout, &data.hash)?;
        let table = art::ensure_features(&layout, &data, &models)?;
        let ds = &data.dataset;
        let chosen: Vec<u64> = if subjects.is_empty() {
            ds.subjects.clone()
        } else {
            subjects.iter().map(|&s| resolve_subject(&ds.subjects, s)).collect::<Result<_>>()?
        };
        let mut out = Vec::new();
        for s in chosen {
            let vox = pipeline::simulate_subject(ds, &table, s)?;
            art::save_voxels(&layout, &data.hash, &table.weights_hash, &vox)?;
            let d = pipeline::fit_decoders(ds, &table, &vox, cfg)?;
            let hash = art::save_decoders(&layout, &data.hash, &table.weights_hash, &vox, cfg, &d)?;
            out.push(DecoderSummary {
                subject: s,
                cv_r: d.cv_r.clone(),
                hash,
            });
        }
        Ok(out)
    })
}

/// Outcome of one `reconstruct` call.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub dir: std::path::PathBuf,
    pub manifest: RunManifest,
    pub metrics: MetricsFile,
}

/// Reconstructs the filtered test items of one subject under one variant and
/// scores them. An empty selection still writes a run with no items.
/// Items whose Stage-2 loss went non-finite are still written
/// with their best snapshot; the call then fails with `NonFiniteLoss`.
pub fn reconstruct(
    dataset: &Path,
    subject: u64,
    variant: Variant,
    cfg: &ReconstructionConfig,
    opts: &MetricsOptions,
    out: Option<&Path>,
    jobs: usize,
) -> Result<RunOutcome> {
    let layout = Layout::new(dataset);
    timed(&layout, &format!("reconstruct:{subject}:{}", variant.name()), || {
        let data = art::read_dataset(&layout)?;
        let ds = &data.dataset;
        let subject = resolve_subject(&ds.subjects, subject)?;
        let (models, _) = art::load_models(&layout, &data.hash)?;
        let table = art::ensure_features(&layout, &data, &models)?;
        let vox = art::load_voxels(&layout, &data.hash, &table.weights_hash, subject)?;
        let (decoders, decoders_hash) = art::load_decoders(&layout, &data.hash, &table.weights_hash, subject)?;
        let cfg = variant.apply(cfg);
        let (selected, accuracies) = pipeline::select_items(ds, &table, &vox, &decoders, cfg.threshold)?;
        let recons = pipeline::reconstruct_items(&selected, &models, &cfg, jobs)?;
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| layout.run(subject, variant.name()));
        let items = recons
            .iter()
            .zip(&selected)
            .map(|(r, s)| ItemSummary {
                item: r.item,
                accuracy: s.accuracy,
                initial_loss: r.stage2.trajectory.first().copied().unwrap_or(f64::NAN),
                best_loss: r.stage2.best_loss,
                best_iteration: r.stage2.best_iteration,
                iterations: r.stage2.trajectory.len().saturating_sub(1),
            })
            .collect();
        let manifest = RunManifest {
            subject,
            variant: variant.name().to_string(),
            config: cfg.clone(),
            dataset_hash: data.hash.clone(),
            weights_hash: table.weights_hash.clone(),
            decoders_hash,
            accuracies,
            items,
        };
        art::save_run(&dir, &manifest, &recons)?;
        let records = pipeline::evaluate_items(ds, &recons, &models, opts)?;
        let metrics = art::metrics_file(subject, variant.name(), records);
        art::save_metrics(&dir, &metrics)?;
        if let Some(r) = recons.iter().find(|r| r.stage2.aborted_at.is_some()) {
            r.stage2.check()?;
        }
        Ok(RunOutcome { dir, manifest, metrics })
    })
}

/// Scores the reconstructions stored in `run` against the dataset images.
pub fn evaluate(dataset: &Path, run: &Path, opts: &MetricsOptions) -> Result<MetricsFile> {
    let layout = Layout::new(dataset);
    timed(&layout, "evaluate", || {
        let data = art::read_dataset(&layout)?;
        let manifest = art::read_run(run)?;
        if manifest.dataset_hash != data.hash {
            return Err(Error::HashMismatch {
                what: format!("dataset used by run {}", run.display()),
                expected: manifest.dataset_hash,
                found: data.hash,
            });
        }
        let (models, _) = art::load_models(&layout, &data.hash)?;
        let current = pipeline::models_hash(&models);
        if manifest.weights_hash != current {
            return Err(Error::HashMismatch {
                what: format!("models used by run {}", run.display()),
                expected: manifest.weights_hash,
                found: current,
            });
        }
        let mut records = Vec::new();
        for it in &manifest.items {
            let recon = art::read_run_image(run, "recon", it.item)?;
            let truth = image::read_ppm(&layout.image(it.item))?;
            records.push(metrics::evaluate_pair(it.item, &recon, &truth, &models.encoder, opts)?);
        }
        let file = art::metrics_file(manifest.subject, &manifest.variant, records);
        art::save_metrics(run, &file)?;
        Ok(file)
    })
}

/// Numbers behind the report, across subject seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub subjects: Vec<SubjectReport>,
    pub variants: Vec<VariantReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject: u64,
    pub rows: Vec<(String, Aggregate)>,
    /// Full-model PCC against ground truths of other items.
    pub shuffled_pcc: Option<f64>,
    pub mean_final_loss: Vec<(String, f64)>,
}

/// One variant summarised over subjects with at least one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub seeds: usize,
    pub clip_cosine: Estimate,
    pub ssim: Estimate,
    pub pcc: Estimate,
    pub final_loss: Estimate,
}

fn shuffled_from_disk(layout: &Layout, run: &Path, items: &[usize]) -> Result<Option<f64>> {
    let n = items.len();
    if n < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for (k, &i) in items.iter().enumerate() {
        let recon = art::read_run_image(run, "recon", i)?;
        let other = image::read_ppm(&layout.image(items[(k + 1) % n]))?;
        total += metrics::pixel_correlation(&recon, &other)?;
    }
    Ok(Some(total / n as f64))
}

/// Writes per-subject CSV tables, comparison montages and `summary.json`.
pub fn report(dataset: &Path, out: Option<&Path>) -> Result<ReportSummary> {
    let layout = Layout::new(dataset);
    timed(&layout, "report", || {
        let data = art::read_dataset(&layout)?;
        let ds = &data.dataset;
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| layout.report());
        let mut subjects = Vec::new();
        let mut per_variant: Vec<(Variant, Vec<[f64; 4]>)> = VARIANTS.iter().map(|&v| (v, Vec::new())).collect();
        for &s in &ds.subjects {
            let mut rows = Vec::new();
            let mut losses = Vec::new();
            let mut shuffled = None;
            for (v, acc) in per_variant.iter_mut() {
                let run = layout.run(s, v.name());
                if !run.join("manifest.json").exists() {
                    continue;
                }
                let manifest = art::read_run(&run)?;
                if manifest.dataset_hash != data.hash {
                    return Err(Error::HashMismatch {
                        what: format!("dataset used by run {}", run.display()),
                        expected: manifest.dataset_hash,
                        found: data.hash.clone(),
                    });
                }
                let m = art::read_metrics(&run)?;
                let n = manifest.items.len();
                let loss = manifest.items.iter().map(|i| i.best_loss).sum::<f64>() / n.max(1) as f64;
                if n > 0 {
                    acc.push([m.aggregate.clip_cosine, m.aggregate.ssim, m.aggregate.pcc, loss]);
                }
                losses.push((v.name().to_string(), loss));
                rows.push((v.name().to_string(), m.aggregate.clone()));
                if *v == Variant::Full {
                    let items: Vec<usize> = manifest.items.iter().map(|i| i.item).collect();
                    shuffled = shuffled_from_disk(&layout, &run, &items)?;
                    montage(&layout, &run, &items, &dir.join(format!("grid_{s}.ppm")))?;
                }
            }
            if rows.is_empty() {
                continue;
            }
            art::write_table(&dir.join(format!("table_{s}.csv")), s, &rows)?;
            subjects.push(SubjectReport {
                subject: s,
                rows,
                shuffled_pcc: shuffled,
                mean_final_loss: losses,
            });
        }
        if subjects.is_empty() {
            return Err(Error::UpstreamMissing {
                stage: "reconstruct",
                path: layout.root.join("runs"),
            });
        }
        let variants = per_variant
            .into_iter()
            .filter(|(_, acc)| !acc.is_empty())
            .map(|(v, acc)| {
                let col = |k: usize| Estimate::of(&acc.iter().map(|r| r[k]).collect::<Vec<_>>());
                VariantReport {
                    variant: v.name().to_string(),
                    seeds: acc.len(),
                    clip_cosine: col(0),
                    ssim: col(1),
                    pcc: col(2),
                    final_loss: col(3),
                }
            })
            .collect();
        let summary = ReportSummary { subjects, variants };
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    })
}

/// Rows of ground truth | full reconstruction | Stage 1 only.
fn montage(layout: &Layout, run: &Path, items: &[usize], path: &Path) -> Result<()> {
    if items.is_empty() {
        return Ok(());
    }
    let mut rows = Vec::new();
    for &i in items.iter().take(8) {
        rows.push(vec![
            image::read_ppm(&layout.image(i))?,
            art::read_run_image(run, "recon", i)?,
            art::read_run_image(run, "stage1", i)?,
        ]);
    }
    image::write_ppm(path, &image::montage(&rows)?)
}

#[cfg(test)]
mod tests;
