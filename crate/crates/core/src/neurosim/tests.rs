use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn features(seed: u64, hash: &str) -> SceneFeatures {
    let g = |label, n: usize| rng::gaussian(seed, label, 0, vec![n]);
    SceneFeatures {
        c: g("c", 6),
        z: g("z", 5),
        taps: vec![g("t0", 4), g("t1", 3)],
        weights_hash: hash.into(),
    }
}

fn subject(seed: u64, sigma: f64, layout: &FeatureLayout) -> SubjectModel {
    let cfg = SimConfig {
        n_voxels: 40,
        sigma,
        ..SimConfig::default()
    };
    SubjectModel::new(seed, layout, &vec![1.0; layout.total()], "h", &cfg).unwrap()
}

fn record(seed: u64) -> SceneRecord {
    let mut r = SceneRecord::new(0, sample_scene(&mut rng::stream(seed, "scene", 0)));
    r.features = Some(features(seed, "h"));
    r
}

#[test]
fn sampling_covers_every_category() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut classes = [0usize; CLASSES.len()];
    let mut fg = [0usize; FG_COLORS.len()];
    let mut bg = [0usize; BG_COLORS.len()];
    for _ in 0..10_000 {
        let s = sample_scene(&mut rng);
        s.validate().unwrap();
        classes[s.class] += 1;
        fg[s.fg] += 1;
        bg[s.bg] += 1;
    }
    assert!(classes.iter().chain(&fg).chain(&bg).all(|&n| n > 0));
}

#[test]
fn positions_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bins = 10;
    let n = 10_000;
    let (mut hx, mut hy) = (vec![0f64; bins], vec![0f64; bins]);
    for _ in 0..n {
        let s = sample_scene(&mut rng);
        let b = |v: f64| (((v - POS_RANGE.0) / (POS_RANGE.1 - POS_RANGE.0) * bins as f64) as usize).min(bins - 1);
        hx[b(s.x)] += 1.0;
        hy[b(s.y)] += 1.0;
    }
    let expect = n as f64 / bins as f64;
    let chi2 = |h: &[f64]| h.iter().map(|o| (o - expect).powi(2) / expect).sum::<f64>();
    // 9 degrees of freedom, p = 0.001
    assert!(chi2(&hx) < 27.88, "{}", chi2(&hx));
    assert!(chi2(&hy) < 27.88, "{}", chi2(&hy));
}

#[test]
fn rendering_is_deterministic_and_in_range() {
    let spec = sample_scene(&mut ChaCha8Rng::seed_from_u64(5));
    let (a, b) = (render(&spec), render(&spec));
    assert_eq!(a.data(), b.data());
    assert_eq!(a.shape(), &[SIZE, SIZE, CHANNELS]);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn moving_by_one_bucket_changes_image_and_caption() {
    let spec = SceneSpec {
        class: 0,
        x: 0.35,
        y: 0.5,
        size: 0.3,
        orientation: 0.0,
        fg: 0,
        bg: 1,
    };
    let moved = SceneSpec { x: 0.5, ..spec.clone() };
    moved.validate().unwrap();
    assert_ne!(render(&spec).data(), render(&moved).data());
    let (a, b) = (caption(&spec), caption(&moved));
    assert_eq!(a.len(), CAPTION_LEN);
    assert_ne!(a[3], b[3]);
    assert_eq!(a[..3], b[..3]);
}

#[test]
fn captions_use_known_tokens() {
    let vocab = vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let toks = caption(&sample_scene(&mut rng));
        assert!(toks.iter().all(|&t| t != PAD && t < vocab.len()));
        assert!(!caption_text(&toks).contains('?'));
    }
    assert_eq!(vocabulary_json()["<pad>"], 0);
}

#[test]
fn invalid_specs_are_rejected() {
    let ok = SceneSpec {
        class: 1,
        x: 0.5,
        y: 0.5,
        size: 0.3,
        orientation: 1.0,
        fg: 2,
        bg: 0,
    };
    ok.validate().unwrap();
    for bad in [
        SceneSpec { class: 8, ..ok.clone() },
        SceneSpec { size: 0.9, ..ok.clone() },
        SceneSpec { x: 0.05, ..ok.clone() },
        SceneSpec {
            orientation: f64::NAN,
            ..ok.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::OutOfRange(_))));
    }
}

#[test]
fn noiseless_trials_are_identical() {
    let rec = record(1);
    let layout = rec.features.as_ref().unwrap().layout();
    let s = subject(4, 0.0, &layout);
    let out = respond(&rec, &s, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.trials.len(), 3);
    let clean = s.project(&rec.features.as_ref().unwrap().concat()).unwrap();
    for t in &out.trials {
        assert_eq!(t.data(), &clean[..]);
    }
    assert_eq!(out.averaged.data(), &clean[..]);
}

#[test]
fn averaging_reduces_noise_variance() {
    let rec = record(2);
    let layout = rec.features.as_ref().unwrap().layout();
    let s = subject(8, 0.5, &layout);
    let clean = s.project(&rec.features.as_ref().unwrap().concat()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut var = [0.0f64; 2];
    for (slot, n) in [(0, 1), (1, 3)] {
        let mut acc = 0.0;
        let mut count = 0.0;
        for _ in 0..200 {
            let r = respond(&rec, &s, n, &mut rng).unwrap();
            for (a, c) in r.averaged.data().iter().zip(&clean) {
                acc += ((a - c) as f64).powi(2);
                count += 1.0;
            }
        }
        var[slot] = acc / count;
    }
    assert!((var[0] - 0.25).abs() < 0.02, "{var:?}");
    assert!((var[1] - 0.25 / 3.0).abs() < 0.01, "{var:?}");
}

#[test]
fn subjects_differ_by_seed() {
    let layout = features(0, "h").layout();
    let (a, b) = (subject(1, 0.1, &layout), subject(2, 0.1, &layout));
    assert_ne!(a.weights.data(), b.weights.data());
    assert_eq!(subject(1, 0.1, &layout), a);
}

#[test]
fn response_contracts() {
    let mut rec = record(3);
    let layout = rec.features.as_ref().unwrap().layout();
    let s = subject(1, 0.1, &layout);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(respond(&rec, &s, 0, &mut rng), Err(Error::BadRange(_))));
    assert!(matches!(respond(&rec, &s, 4, &mut rng), Err(Error::BadRange(_))));
    rec.features.as_mut().unwrap().weights_hash = "old".into();
    assert!(matches!(respond(&rec, &s, 1, &mut rng), Err(Error::StaleFeatureCache { .. })));
    rec.features = None;
    assert!(matches!(respond(&rec, &s, 1, &mut rng), Err(Error::UpstreamMissing { .. })));
    assert!(matches!(s.project(&[0.0; 3]), Err(Error::DimensionMismatch(_))));
    let bad = SimConfig {
        sparsity: 0.0,
        ..SimConfig::default()
    };
    assert!(SubjectModel::new(0, &layout, &vec![1.0; layout.total()], "h", &bad).is_err());
    assert!(matches!(average_trials(&[]), Err(Error::EmptyDataset)));
}

#[test]
fn feature_scales_floor_constant_dims() {
    let rows = vec![vec![1.0, 0.0, 5.0], vec![3.0, 0.0, 5.0]];
    assert_eq!(feature_scales(&rows).unwrap(), vec![1.0, 1.0, 1.0]);
    let rows = vec![vec![0.0], vec![4.0]];
    assert_eq!(feature_scales(&rows).unwrap(), vec![2.0]);
}

#[test]
fn trial_counts() {
    assert_eq!(trial_count(1, 5, true, 3), 3);
    let counts: HashSet<usize> = (0..200).map(|i| trial_count(1, i, false, 3)).collect();
    assert_eq!(counts, HashSet::from([1, 2, 3]));
    assert_eq!(trial_count(1, 7, false, 3), trial_count(1, 7, false, 3));
}

#[test]
fn dataset_splits_are_disjoint_and_reproducible() {
    let a = build_dataset(60, 10, 3, 42, SimConfig::default()).unwrap();
    assert_eq!(a, build_dataset(60, 10, 3, 42, SimConfig::default()).unwrap());
    assert_ne!(a.scenes, build_dataset(60, 10, 3, 43, SimConfig::default()).unwrap().scenes);
    let ids: HashSet<_> = a.scenes.iter().map(SceneSpec::identity).collect();
    assert_eq!(ids.len(), 70);
    assert!(a.train.iter().all(|i| !a.test.contains(i)));
    assert_eq!(a.subjects.len(), 3);
    assert_eq!(a.images(&a.test).unwrap().shape(), &[10, SIZE, SIZE, CHANNELS]);
    assert_eq!(a.captions(&a.test[..2]).len(), 2);
    assert!(matches!(build_dataset(0, 1, 1, 0, SimConfig::default()), Err(Error::Usage(_))));
}

#[test]
fn layout_groups_partition_the_concatenation() {
    let f = features(5, "h");
    let layout = f.layout();
    assert_eq!(layout.groups(), vec![(0, 6), (6, 11), (11, 15), (15, 18)]);
    assert_eq!(f.concat().len(), layout.total());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn response_is_linear(seed in 0u64..1000, a in -3.0f32..3.0, b in -3.0f32..3.0) {
        let layout = features(0, "h").layout();
        let s = subject(seed, 0.0, &layout);
        let x = features(seed, "h").concat();
        let y = features(seed + 1, "h").concat();
        let mix: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = s.project(&mix).unwrap();
        let (px, py) = (s.project(&x).unwrap(), s.project(&y).unwrap());
        for i in 0..lhs.len() {
            let rhs = a * px[i] + b * py[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-4 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn sampled_scenes_always_validate(seed in any::<u64>()) {
        let s = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(s.validate().is_ok());
        prop_assert_eq!(caption(&s).len(), CAPTION_LEN);
    }
}
