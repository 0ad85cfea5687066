use super::*;
use crate::pipeline::PipelineConfig;
use crate::suite::gradients::tiny_models;

fn config(models: &Models) -> ReconstructionConfig {
    ReconstructionConfig {
        taps: models.encoder.config.taps.clone(),
        iterations: 6,
        lr: 0.05,
        snapshot_every: 2,
        ..PipelineConfig::tiny().reconstruct
    }
}

fn start(models: &Models, seed: u64) -> (Tensor, Tensor) {
    let d = &models.denoiser.config;
    (
        rng::gaussian(seed, "test-c", 0, vec![d.cond_dim()]),
        rng::gaussian(seed, "test-z", 0, vec![d.latent_dim()]),
    )
}

fn targets_of(models: &Models, image: &Tensor) -> Vec<TapTarget> {
    models.encoder.image_features(image).unwrap().taps.into_iter().map(TapTarget::dense).collect()
}

fn other_targets(models: &Models, seed: u64) -> Vec<TapTarget> {
    let img = Tensor::uniform(vec![image::SIZE, image::SIZE, 3], 0.0, 1.0, &mut rng::stream(seed, "other", 0));
    targets_of(models, &img)
}

#[test]
fn zero_iterations_return_the_stage1_image() {
    let models = tiny_models().unwrap();
    let cfg = ReconstructionConfig {
        iterations: 0,
        ..config(&models)
    };
    let (c, z) = start(&models, 1);
    let s1 = stage1(&c, &z, &models, &cfg, 1).unwrap();
    let out = stage2(&s1, &other_targets(&models, 1), &models, &cfg).unwrap();
    assert_eq!(out.trajectory.len(), 1);
    assert_eq!(out.best_iteration, 0);
    assert_eq!(out.image, s1.image);
    assert_eq!((out.c, out.z), (s1.c, s1.z));
}

#[test]
fn without_control_skips_the_updates() {
    let models = tiny_models().unwrap();
    let cfg = ReconstructionConfig {
        without_control: true,
        ..config(&models)
    };
    let (c, z) = start(&models, 2);
    let s1 = stage1(&c, &z, &models, &cfg, 2).unwrap();
    let out = stage2(&s1, &other_targets(&models, 2), &models, &cfg).unwrap();
    assert_eq!(out.trajectory.len(), 1);
    assert_eq!(out.image, s1.image);
}

#[test]
fn own_taps_give_zero_loss() {
    let models = tiny_models().unwrap();
    let cfg = ReconstructionConfig {
        iterations: 0,
        ..config(&models)
    };
    let (c, z) = start(&models, 3);
    let s1 = stage1(&c, &z, &models, &cfg, 3).unwrap();
    let out = stage2(&s1, &targets_of(&models, &s1.image), &models, &cfg).unwrap();
    assert!(out.trajectory[0] < 1e-8, "{}", out.trajectory[0]);
}

#[test]
fn doubling_the_residual_quadruples_the_loss() {
    let tape = Tape::<f64>::new();
    let phi = rng::gaussian(4, "phi", 0, vec![2, 5]);
    let t = rng::gaussian(4, "t", 0, vec![10]);
    let far: Vec<f32> = phi.data().iter().zip(t.data()).map(|(p, q)| p - 2.0 * (p - q)).collect();
    let mask: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
    let near = TapTarget {
        values: t,
        mask: mask.clone(),
    };
    let far = TapTarget {
        values: Tensor::vector(far),
        mask,
    };
    let v = tape.constant(phi.cast());
    let a = structure_loss(&[v], &[near]).unwrap().value().item();
    let b = structure_loss(&[v], &[far]).unwrap().value().item();
    assert!(a > 0.0);
    assert!((b - 4.0 * a).abs() < 1e-6 * b, "{a} {b}");
}

#[test]
fn masked_dims_do_not_count() {
    let tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).cast());
    let t = TapTarget {
        values: Tensor::vector(vec![0.0, 2.0, 100.0]),
        mask: vec![true, true, false],
    };
    assert_eq!(structure_loss(&[v], &[t]).unwrap().value().item(), 1.0);
}

#[test]
fn reconstruction_is_deterministic() {
    let models = tiny_models().unwrap();
    let cfg = config(&models);
    let (c, z) = start(&models, 5);
    let targets = other_targets(&models, 5);
    let run = || {
        let s1 = stage1(&c, &z, &models, &cfg, 5).unwrap();
        stage2(&s1, &targets, &models, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.trajectory.len(), cfg.iterations + 1);
    assert_eq!(a.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    assert!(a.best_loss <= a.trajectory[0]);
    a.check().unwrap();
}

#[test]
fn without_z_ignores_the_decoded_latent() {
    let models = tiny_models().unwrap();
    let cfg = ReconstructionConfig {
        without_z: true,
        ..config(&models)
    };
    let (c, z) = start(&models, 6);
    let (_, z2) = start(&models, 7);
    let a = stage1(&c, &z, &models, &cfg, 6).unwrap();
    let b = stage1(&c, &z2, &models, &cfg, 6).unwrap();
    assert_eq!(a.image, b.image);
    assert_ne!(a.z, z);
}

#[test]
fn mismatched_taps_are_rejected() {
    let models = tiny_models().unwrap();
    let cfg = config(&models);
    let (c, z) = start(&models, 8);
    let s1 = stage1(&c, &z, &models, &cfg, 8).unwrap();
    let mut targets = other_targets(&models, 8);
    targets.pop();
    assert!(matches!(stage2(&s1, &targets, &models, &cfg), Err(Error::TapMismatch(_))));
    let bad = ReconstructionConfig {
        taps: vec![99],
        ..cfg.clone()
    };
    assert!(matches!(stage2(&s1, &other_targets(&models, 8), &models, &bad), Err(Error::TapMismatch(_))));
    let tape = Tape::<f32>::new();
    let v = tape.constant(Tensor::zeros(vec![3]));
    assert!(matches!(structure_loss(&[v], &[]), Err(Error::TapMismatch(_))));
    let wrong = TapTarget::dense(Tensor::zeros(vec![4]));
    assert!(matches!(structure_loss(&[v], &[wrong]), Err(Error::TapMismatch(_))));
}

#[test]
fn stage1_checks_its_inputs() {
    let models = tiny_models().unwrap();
    let cfg = config(&models);
    let (c, z) = start(&models, 9);
    assert!(matches!(
        stage1(&Tensor::zeros(vec![3]), &z, &models, &cfg, 0),
        Err(Error::DimensionMismatch(_))
    ));
    let bad = ReconstructionConfig {
        t_start_frac: 1.5,
        ..cfg
    };
    assert!(matches!(stage1(&c, &z, &models, &bad, 0), Err(Error::BadRange(_))));
}

#[test]
fn aborted_runs_report_the_iteration() {
    let out = Stage2Output {
        image: Tensor::zeros(vec![1]),
        c: Tensor::zeros(vec![1]),
        z: Tensor::zeros(vec![1]),
        trajectory: vec![1.0],
        best_iteration: 0,
        best_loss: 1.0,
        snapshots: Vec::new(),
        aborted_at: Some(4),
    };
    assert!(matches!(out.check(), Err(Error::NonFiniteLoss(4))));
}
