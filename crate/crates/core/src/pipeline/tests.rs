use super::*;

struct Tiny {
    cfg: PipelineConfig,
    ds: Dataset,
    models: Models,
    table: FeatureTable,
    vox: SubjectVoxels,
    decoders: SubjectDecoders,
}

fn tiny_run() -> Tiny {
    let cfg = PipelineConfig::tiny();
    let ds = generate_dataset(&cfg.data).unwrap();
    let mut models = fresh_models(&cfg.train).unwrap();
    train_models(&ds, &cfg.train, &mut models, &ALL_STAGES).unwrap();
    let table = compute_features(&ds, &models).unwrap();
    let vox = simulate_subject(&ds, &table, ds.subjects[0]).unwrap();
    let decoders = fit_decoders(&ds, &table, &vox, &cfg.decode).unwrap();
    Tiny {
        cfg,
        ds,
        models,
        table,
        vox,
        decoders,
    }
}

#[test]
fn config_round_trips_and_fills_defaults() {
    let cfg = PipelineConfig::tiny();
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
    let partial: PipelineConfig = serde_json::from_str(r#"{"jobs": 3, "reconstruct": {"iterations": 7}}"#).unwrap();
    assert_eq!(partial.jobs, 3);
    assert_eq!(partial.reconstruct.iterations, 7);
    assert_eq!(partial.reconstruct.taps, ReconstructionConfig::default().taps);
    assert_eq!(partial.data, PipelineConfig::default().data);
}

#[test]
fn variants_parse_and_apply() {
    for v in VARIANTS {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
    }
    assert!(matches!(Variant::parse("none"), Err(Error::Usage(_))));
    let base = ReconstructionConfig::default();
    assert!(Variant::WithoutControl.apply(&base).without_control);
    assert!(Variant::WithoutZ.apply(&base).without_z);
    let full = Variant::Full.apply(&Variant::WithoutZ.apply(&base));
    assert!(!full.without_z && !full.without_control);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let t = tiny_run();
    let layout = t.table.layout();
    assert_eq!(t.table.scenes.len(), t.cfg.data.n_train + t.cfg.data.n_test);
    assert_eq!(t.vox.averaged.shape(), &[t.ds.scenes.len(), t.cfg.data.sim.n_voxels]);
    assert_eq!(t.vox.all_trials.shape()[0], t.vox.trials.iter().sum::<usize>());
    for &i in &t.ds.test {
        assert_eq!(t.vox.trials[i], t.cfg.data.sim.max_trials);
    }
    assert_eq!(t.decoders.taps.len(), layout.tap_dims.len());
    assert_eq!(t.decoders.cv_r.len(), 2 + layout.tap_dims.len());
    for d in &t.decoders.taps {
        let want = (t.cfg.decode.keep_fraction * d.dims() as f64).round() as usize;
        assert_eq!(d.mask.count(), want);
    }
    assert_eq!(t.decoders.c.mask.count(), layout.c_dim);

    let (kept, all) = select_items(&t.ds, &t.table, &t.vox, &t.decoders, -1.0).unwrap();
    assert_eq!(kept.len(), t.ds.test.len());
    assert_eq!(all.len(), t.ds.test.len());
    let (none, _) = select_items(&t.ds, &t.table, &t.vox, &t.decoders, 2.0).unwrap();
    assert!(none.is_empty());

    let serial = reconstruct_items(&kept, &t.models, &t.cfg.reconstruct, 1).unwrap();
    let parallel = reconstruct_items(&kept, &t.models, &t.cfg.reconstruct, 2).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.iter().map(|r| r.item).collect::<Vec<_>>(), t.ds.test);

    let records = evaluate_items(&t.ds, &serial, &t.models, &t.cfg.metrics).unwrap();
    assert_eq!(records.len(), serial.len());
    assert!(records.iter().all(|r| r.ssim.is_finite() && r.pcc.abs() <= 1.0));
    assert!(shuffled_pcc(&t.ds, &serial).unwrap().abs() <= 1.0);
    assert_eq!(shuffled_pcc(&t.ds, &serial[..1]).unwrap(), 0.0);
}

#[test]
fn features_carry_the_model_hash() {
    let cfg = PipelineConfig::tiny();
    let ds = generate_dataset(&cfg.data).unwrap();
    let models = fresh_models(&cfg.train).unwrap();
    let table = compute_features(&ds, &models).unwrap();
    assert_eq!(table.weights_hash, models_hash(&models));
    assert!(table.scenes.iter().all(|s| s.weights_hash == table.weights_hash));
    let other = fresh_models(&TrainConfig {
        seed: cfg.train.seed + 1,
        ..cfg.train.clone()
    })
    .unwrap();
    assert_ne!(models_hash(&other), table.weights_hash);
    let mut rec = ds.record(0);
    rec.features = Some(table.scenes[0].clone());
    let mut model = subject_model(&ds, &table, ds.subjects[0]).unwrap();
    model.weights_hash = models_hash(&other);
    let err = neurosim::respond(&rec, &model, 1, &mut rng::stream(0, "t", 0)).unwrap_err();
    assert!(matches!(err, Error::StaleFeatureCache { .. }));
}

#[test]
fn subjects_get_different_voxels() {
    let cfg = PipelineConfig::tiny();
    let ds = generate_dataset(&cfg.data).unwrap();
    let models = fresh_models(&cfg.train).unwrap();
    let table = compute_features(&ds, &models).unwrap();
    let a = simulate_subject(&ds, &table, ds.subjects[0]).unwrap();
    let b = simulate_subject(&ds, &table, ds.subjects[1]).unwrap();
    assert_ne!(a.averaged, b.averaged);
    assert_eq!(a, simulate_subject(&ds, &table, ds.subjects[0]).unwrap());
}
