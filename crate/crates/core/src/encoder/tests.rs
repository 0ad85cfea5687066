use proptest::prelude::*;

use super::*;
use crate::tensor::{grad_check, GradCheck, ScalarFn};

fn scene(seed: u64) -> Tensor {
    neurosim::render(&neurosim::sample_scene(&mut rng::stream(seed, "scene", 0)))
}

fn small() -> EncoderConfig {
    EncoderConfig {
        d_img: 16,
        img_hidden: 32,
        blocks: 2,
        taps: vec![1],
        d_emb: 16,
        ..EncoderConfig::default()
    }
}

#[test]
fn default_dimensions() {
    let c = EncoderConfig::default();
    assert_eq!(c.tap_dim(), 768);
    assert_eq!((c.k_keep, c.max_tokens), (6, 8));
    assert_eq!(c.c_dim(), 96);
    assert_eq!(c.taps, vec![1, 2, 3]);
    assert_eq!(c.blocks, 6);
    assert_eq!(c.temperature, 0.07);
    let wide = EncoderConfig { max_tokens: 77, k_keep: 15, d_txt: 768, ..c };
    assert_eq!(wide.c_dim(), 11520);
}

#[test]
fn text_embedding_contracts() {
    let enc = ContrastiveEncoder::new(EncoderConfig::default(), 0).unwrap();
    let caption = neurosim::caption(&neurosim::sample_scene(&mut rng::stream(1, "scene", 0)));
    let c = enc.embed_text(&caption).unwrap();
    assert_eq!(c.shape(), &[8, 16]);
    assert_eq!(c, enc.embed_text(&caption).unwrap());
    let kept = enc.condition(&caption).unwrap();
    assert_eq!(kept.data(), &c.data()[..96]);

    let empty = enc.embed_text(&[]).unwrap();
    assert_eq!(empty, enc.embed_text(&[PAD; 8]).unwrap());
    assert!(empty.data().iter().all(|v| v.is_finite()));

    assert!(matches!(enc.embed_text(&[1; 9]), Err(Error::TooLong { len: 9, max: 8 })));
    let vocab = enc.config.vocab;
    assert!(matches!(enc.embed_text(&[vocab]), Err(Error::UnknownToken(v)) if v == vocab));
}

#[test]
fn invalid_configs_are_rejected() {
    for taps in [vec![], vec![0], vec![7]] {
        let c = EncoderConfig { taps, ..EncoderConfig::default() };
        assert!(matches!(ContrastiveEncoder::new(c, 0), Err(Error::BadRange(_))));
    }
    let c = EncoderConfig { k_keep: 9, ..EncoderConfig::default() };
    assert!(ContrastiveEncoder::new(c, 0).is_err());
}

#[test]
fn image_features_reject_bad_resolution() {
    let enc = ContrastiveEncoder::new(small(), 0).unwrap();
    let r = enc.image_features(&Tensor::zeros(vec![32, 16, 3]));
    assert!(matches!(r, Err(Error::BadResolution { .. })));
}

struct TapEnergy<'a>(&'a ContrastiveEncoder);

impl ScalarFn for TapEnergy<'_> {
    fn eval<'t, E: Element>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let vars = self.0.params.bind(tape, false);
        let out = self.0.image_var(&vars, x.reshape(vec![1, 32, 32, 3])?, true)?;
        let mut total = out.taps[0].sum_squares()?;
        for t in &out.taps[1..] {
            total = total.add(t.sum_squares()?)?;
        }
        Ok(total)
    }
}

#[test]
fn tap_energy_gradient_matches_finite_differences() {
    let enc = ContrastiveEncoder::new(EncoderConfig::default(), 3).unwrap();
    let x = scene(3);
    let cfg = GradCheck { tol: 1e-3, max_coords: Some(40), seed: 3, ..GradCheck::default() };
    let r = grad_check(&TapEnergy(&enc), &x, &cfg);
    assert!(r.passed, "rel err {}", r.max_rel_err);
}

fn constant_rows(b: usize, d: usize) -> Tensor {
    let mut v = vec![0.0; d];
    v[0] = 1.0;
    Tensor::new(vec![b, d], v.repeat(b)).unwrap()
}

#[test]
fn info_nce_of_indistinguishable_pairs_is_log_batch() {
    let tape = Tape::new();
    let e = tape.constant(constant_rows(6, 4));
    let loss = info_nce(e, e, 0.07).unwrap().value().item() as f64;
    assert!((loss - 6f64.ln()).abs() < 1e-5, "{loss}");
}

#[test]
fn info_nce_at_infinite_temperature_is_log_batch() {
    let tape = Tape::new();
    let a = tape.constant(rng::gaussian(1, "a", 0, vec![5, 8])).normalize().unwrap();
    let b = tape.constant(rng::gaussian(1, "b", 0, vec![5, 8])).normalize().unwrap();
    let loss = info_nce(a, b, 1e9).unwrap().value().item() as f64;
    assert!((loss - 5f64.ln()).abs() < 1e-5, "{loss}");
}

#[test]
fn contrastive_training_input_contracts() {
    let mut enc = ContrastiveEncoder::new(small(), 0).unwrap();
    let images = nn::stack(&(0..6).map(scene).collect::<Vec<_>>()).unwrap();
    let caps: Vec<Vec<usize>> = (0..6).map(|_| vec![1, 2]).collect();
    let hyper = TrainHyper { epochs: 1, batch_size: 3, lr: 1e-3, seed: 0 };
    assert!(matches!(train_contrastive(&mut enc, &images, &caps, None, &hyper), Err(Error::BatchTooSmall(3))));
    let hyper = TrainHyper { batch_size: 4, ..hyper };
    assert!(matches!(train_contrastive(&mut enc, &images, &[], None, &hyper), Err(Error::EmptyDataset)));
}

#[test]
fn short_training_improves_retrieval_over_chance() {
    let mut enc = ContrastiveEncoder::new(small(), 0).unwrap();
    let specs: Vec<_> = (0..160).map(|i| neurosim::sample_scene(&mut rng::stream(11, "scene", i))).collect();
    let images = nn::stack(&specs.iter().map(neurosim::render).collect::<Vec<_>>()).unwrap();
    let caps: Vec<Vec<usize>> = specs.iter().map(neurosim::caption).collect();
    let hyper = TrainHyper { epochs: 6, batch_size: 32, lr: 2e-3, seed: 0 };
    let rep = train_contrastive(&mut enc, &images, &caps, None, &hyper).unwrap();
    assert!(rep.loss[5] < rep.loss[0], "{:?}", rep.loss);
    assert!(rep.retrieval.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn final_embedding_is_unit_and_features_are_pure(seed in any::<u64>()) {
        let enc = ContrastiveEncoder::new(small(), seed % 5).unwrap();
        let x = scene(seed);
        let f = enc.image_features(&x).unwrap();
        let norm = f.embedding.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-5);
        prop_assert_eq!(f.taps.len(), 1);
        prop_assert_eq!(f.taps[0].numel(), enc.config.tap_dim());
        prop_assert_eq!(&f, &enc.image_features(&x).unwrap());
    }

    #[test]
    fn caption_embeddings_are_unit(seed in any::<u64>()) {
        let enc = ContrastiveEncoder::new(small(), 2).unwrap();
        let cap = neurosim::caption(&neurosim::sample_scene(&mut rng::stream(seed, "scene", 0)));
        let e = enc.embed_captions(&[cap]).unwrap();
        let norm = e.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-5);
    }
}
