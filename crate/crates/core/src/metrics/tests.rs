use proptest::prelude::*;

use super::*;
use crate::encoder::EncoderConfig;
use crate::image::CHANNELS;
use crate::rng;

fn random_image(seed: u64) -> Tensor {
    let g = rng::gaussian(seed, "metrics-test", 0, vec![SIZE, SIZE, CHANNELS]);
    g.map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
}

fn noisy(img: &Tensor, seed: u64, amp: f32) -> Tensor {
    let n = rng::gaussian(seed, "metrics-noise", 0, vec![SIZE, SIZE, CHANNELS]);
    Tensor::new(
        img.shape().to_vec(),
        img.data().iter().zip(n.data()).map(|(a, b)| (a + amp * b).clamp(0.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Direct sum-of-products Pearson r in its textbook form.
fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

#[test]
fn ssim_of_an_image_with_itself_is_one() {
    let x = random_image(1);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_ranks_inversion_below_mild_noise() {
    let x = random_image(2);
    let inverted = x.map(|v| 1.0 - v);
    let mild = noisy(&x, 3, 0.02);
    assert!(ssim(&x, &inverted).unwrap() < ssim(&x, &mild).unwrap());
}

#[test]
fn pcc_is_one_under_positive_affine_maps() {
    let x = random_image(4);
    let y = x.map(|v| 0.5 * v + 0.1);
    assert!((pixel_correlation(&x, &y).unwrap() - 1.0).abs() < 1e-6);
    let neg = x.map(|v| 1.0 - v);
    assert!((pixel_correlation(&x, &neg).unwrap() + 1.0).abs() < 1e-6);
}

#[test]
fn constant_image_has_zero_correlation() {
    let x = random_image(5);
    let flat = Tensor::full(vec![SIZE, SIZE, CHANNELS], 0.3);
    assert_eq!(pixel_correlation(&x, &flat).unwrap(), 0.0);
    assert_eq!(pixel_correlation_per_channel(&x, &flat).unwrap(), 0.0);
    assert_eq!(pearson(&[], &[]), 0.0);
}

#[test]
fn wrong_resolution_is_rejected() {
    let x = random_image(6);
    let small = Tensor::zeros(vec![16, 16, 3]);
    assert!(matches!(ssim(&x, &small), Err(Error::BadResolution { .. })));
    assert!(matches!(pixel_correlation(&small, &x), Err(Error::BadResolution { .. })));
}

#[test]
fn semantic_similarity_of_identical_images_is_one() {
    let enc = ContrastiveEncoder::new(EncoderConfig::default(), 0).unwrap();
    let x = random_image(7);
    assert!((semantic_similarity(&x, &x, &enc).unwrap() - 1.0).abs() < 1e-5);
    let rec = evaluate_pair(
        3,
        &x,
        &x,
        &enc,
        &MetricsOptions {
            clip_cosine: true,
            per_channel_pcc: true,
        },
    )
    .unwrap();
    assert_eq!(rec.item, 3);
    assert!(rec.clip_cosine <= 1.0 && (rec.pcc - 1.0).abs() < 1e-9 && (rec.ssim - 1.0).abs() < 1e-12);
}

#[test]
fn aggregate_reports_mean_and_standard_error() {
    let rec = |v: f64| MetricsRecord {
        item: 0,
        clip_cosine: v,
        ssim: 2.0 * v,
        pcc: 0.0,
    };
    let a = aggregate(&[rec(1.0), rec(2.0), rec(3.0)]);
    assert_eq!(a.count, 3);
    assert!((a.clip_cosine - 2.0).abs() < 1e-12);
    assert!((a.clip_cosine_se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((a.ssim - 4.0).abs() < 1e-12);
    assert_eq!(a.pcc_se, 0.0);
    assert_eq!(mean_se(&[5.0]), (5.0, 0.0));
    assert_eq!(aggregate(&[]).count, 0);
}

#[test]
fn embedding_cosine_of_zero_is_zero() {
    let z = Tensor::zeros(vec![4]);
    let v = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(embedding_cosine(&z, &v), 0.0);
    assert!((embedding_cosine(&v, &v) - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn measures_are_symmetric(a in 0u64..1000, b in 0u64..1000) {
        let (x, y) = (random_image(a), noisy(&random_image(b), a, 0.1));
        prop_assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        prop_assert!((pixel_correlation(&x, &y).unwrap() - pixel_correlation(&y, &x).unwrap()).abs() < 1e-12);
        let s = ssim(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn pearson_matches_the_sum_form(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..60)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let oracle = pearson_oracle(&a, &b);
        prop_assume!(oracle.is_finite());
        prop_assert!((pearson(&a, &b) - oracle).abs() < 1e-8);
    }
}
