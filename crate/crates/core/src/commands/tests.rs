use std::path::Path;

use super::*;
use crate::artifacts::Layout;
use crate::pipeline::{PipelineConfig, ALL_STAGES};

fn run_all(root: &Path, cfg: &PipelineConfig) -> RunOutcome {
    gen_data(root, &cfg.data).unwrap();
    train(root, &cfg.train, &ALL_STAGES).unwrap();
    fit_decoders(root, &cfg.decode, &[]).unwrap();
    let out = reconstruct(root, 0, Variant::Full, &cfg.reconstruct, &cfg.metrics, None, 1).unwrap();
    report(root, None).unwrap();
    out
}

#[test]
fn tiny_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = PipelineConfig::tiny();
    let out = run_all(root, &cfg);
    let layout = Layout::new(root);
    assert_eq!(out.manifest.items.len(), cfg.data.n_test);
    for it in &out.manifest.items {
        assert_eq!(it.iterations, cfg.reconstruct.iterations);
        assert!(out.dir.join("recon").join(format!("{}.ppm", it.item)).exists());
        let traj = std::fs::read_to_string(out.dir.join("trajectory").join(format!("{}.csv", it.item))).unwrap();
        assert_eq!(traj.lines().count(), cfg.reconstruct.iterations + 2);
    }
    let s = out.manifest.subject;
    assert!(layout.report().join(format!("table_{s}.csv")).exists());
    assert!(layout.report().join(format!("grid_{s}.ppm")).exists());
    let curve = std::fs::read_to_string(layout.models().join("autoencoder_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + cfg.train.autoencoder_train.epochs);
}

#[test]
fn reconstruct_without_decoders_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::tiny();
    gen_data(dir.path(), &cfg.data).unwrap();
    let err = reconstruct(dir.path(), 0, Variant::Full, &cfg.reconstruct, &cfg.metrics, None, 1).unwrap_err();
    assert!(matches!(err, Error::UpstreamMissing { stage: "train", .. }), "{err}");
    train(dir.path(), &cfg.train, &ALL_STAGES).unwrap();
    let err = reconstruct(dir.path(), 0, Variant::Full, &cfg.reconstruct, &cfg.metrics, None, 1).unwrap_err();
    assert!(matches!(err, Error::UpstreamMissing { stage: "fit-decoders", .. }), "{err}");
}

#[test]
fn tampered_image_fails_the_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::tiny();
    gen_data(dir.path(), &cfg.data).unwrap();
    let img = Layout::new(dir.path()).image(0);
    let mut bytes = std::fs::read(&img).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&img, bytes).unwrap();
    let err = train(dir.path(), &cfg.train, &ALL_STAGES).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }), "{err}");
}

#[test]
fn subjects_resolve_by_seed_or_index() {
    let s = [412, 77];
    assert_eq!(resolve_subject(&s, 77).unwrap(), 77);
    assert_eq!(resolve_subject(&s, 1).unwrap(), 77);
    assert!(matches!(resolve_subject(&s, 5), Err(Error::Usage(_))));
}

#[test]
fn gen_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = PipelineConfig::tiny();
    assert_eq!(gen_data(a.path(), &cfg.data).unwrap(), gen_data(b.path(), &cfg.data).unwrap());
}
