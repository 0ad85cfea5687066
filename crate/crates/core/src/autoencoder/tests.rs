use proptest::prelude::*;

use super::*;
use crate::neurosim;
use crate::tensor::{grad_check, GradCheck, ScalarFn};

fn scene(seed: u64) -> Tensor {
    neurosim::render(&neurosim::sample_scene(&mut rng::stream(seed, "scene", 0)))
}

fn small() -> AutoencoderConfig {
    AutoencoderConfig {
        enc_hidden: 16,
        dec_hidden: 16,
        ..AutoencoderConfig::default()
    }
}

#[test]
fn default_latent_is_four_by_eight_by_eight() {
    let c = AutoencoderConfig::default();
    assert_eq!((c.latent_channels, c.latent_side()), (4, 8));
    assert_eq!(c.latent_dim(), 256);
    let ae = Autoencoder::new(c, 0).unwrap();
    assert_eq!(ae.encode(&scene(1)).unwrap().shape(), &[256]);
}

#[test]
fn encode_is_deterministic() {
    let ae = Autoencoder::new(AutoencoderConfig::default(), 3).unwrap();
    let x = scene(4);
    assert_eq!(ae.encode(&x).unwrap(), ae.encode(&x).unwrap());
}

#[test]
fn input_contracts() {
    let ae = Autoencoder::new(small(), 0).unwrap();
    let wrong = Tensor::zeros(vec![16, 16, 3]);
    assert!(matches!(ae.encode(&wrong), Err(Error::BadResolution { .. })));
    let mut hot = scene(0);
    hot.data_mut()[5] = 1.5;
    assert!(matches!(ae.encode(&hot), Err(Error::OutOfRange(_))));
    assert!(matches!(ae.decode(&Tensor::zeros(vec![255])), Err(Error::ShapeMismatch { .. })));
    let bad = AutoencoderConfig { patch: 5, ..small() };
    assert!(Autoencoder::new(bad, 0).is_err());
}

struct MeanPixel<'a>(&'a Autoencoder);

impl ScalarFn for MeanPixel<'_> {
    fn eval<'t, E: Element>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let vars = self.0.params.bind(tape, false);
        let d = self.0.config.latent_dim();
        let img = self.0.decode_var(&vars, x.reshape(vec![1, d])?)?;
        let n = img.value().numel() as f64;
        img.sum()?.scale(1.0 / n)
    }
}

#[test]
fn mean_pixel_gradient_matches_finite_differences() {
    let ae = Autoencoder::new(AutoencoderConfig::default(), 5).unwrap();
    let z = rng::gaussian(5, "z", 0, vec![256]);
    let r = grad_check(&MeanPixel(&ae), &z, &GradCheck { tol: 1e-3, max_coords: Some(48), ..GradCheck::default() });
    assert!(r.passed, "rel err {}", r.max_rel_err);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut ae = Autoencoder::new(small(), 1).unwrap();
    let before = ae.params.clone();
    let images = nn::stack(&(0..8).map(scene).collect::<Vec<_>>()).unwrap();
    let hyper = TrainHyper { epochs: 1, batch_size: 4, lr: 0.0, seed: 0 };
    train_autoencoder(&mut ae, &images, &hyper).unwrap();
    assert_eq!(ae.params.hash(), before.hash());
}

#[test]
fn empty_training_set_is_rejected() {
    let mut ae = Autoencoder::new(small(), 1).unwrap();
    let hyper = TrainHyper { epochs: 1, batch_size: 4, lr: 1e-3, seed: 0 };
    let none = Tensor::zeros(vec![0, 32, 32, 3]);
    assert!(matches!(train_autoencoder(&mut ae, &none, &hyper), Err(Error::EmptyDataset)));
}

#[test]
fn single_image_is_memorised() {
    let mut ae = Autoencoder::new(AutoencoderConfig::default(), 2).unwrap();
    let x = scene(9);
    let images = x.reshaped(vec![1, 32, 32, 3]).unwrap();
    let hyper = TrainHyper { epochs: 1000, batch_size: 1, lr: 3e-3, seed: 0 };
    let curve = train_autoencoder(&mut ae, &images, &hyper).unwrap();
    assert!(*curve.last().unwrap() < 1e-3, "final loss {}", curve.last().unwrap());
    let y = ae.decode(&ae.encode(&x).unwrap()).unwrap();
    assert!(psnr(&x, &y).unwrap() > 30.0);
}

#[test]
fn training_halves_the_loss_and_separates_latents() {
    let mut ae = Autoencoder::new(AutoencoderConfig::default(), 0).unwrap();
    let images = nn::stack(&(0..128).map(scene).collect::<Vec<_>>()).unwrap();
    let hyper = TrainHyper { epochs: 8, batch_size: 32, lr: 3e-3, seed: 0 };
    let curve = train_autoencoder(&mut ae, &images, &hyper).unwrap();
    assert_eq!(curve.len(), 8);
    assert!(curve[7] <= 0.5 * curve[0], "{curve:?}");
    let (a, b) = (ae.encode(&scene(0)).unwrap(), ae.encode(&scene(1)).unwrap());
    assert!(a.l2_distance(&b) > 0.0);
    let z = ae.encode_batch(&images).unwrap();
    let m = z.sum() / z.numel() as f64;
    let var = z.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / z.numel() as f64;
    assert!((var - 1.0).abs() < 1e-3, "latent variance {var}");
}

#[test]
fn psnr_of_identical_images_is_infinite() {
    let x = scene(2);
    assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    let y = x.map(|v| (v + 0.1).min(1.0));
    assert!(psnr(&x, &y).unwrap() >= 20.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn roundtrip_keeps_shape_and_range(seed in any::<u64>(), gain in 0.1f32..50.0) {
        let ae = Autoencoder::new(small(), seed % 7).unwrap();
        let x = scene(seed);
        let y = ae.decode(&ae.encode(&x).unwrap()).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        let z = rng::gaussian(seed, "z", 0, vec![256]).map(|v| v * gain);
        let img = ae.decode(&z).unwrap();
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batch_and_single_paths_agree(seed in any::<u64>()) {
        let ae = Autoencoder::new(small(), 1).unwrap();
        let xs: Vec<Tensor> = (0..3).map(|i| scene(seed.wrapping_add(i))).collect();
        let z = ae.encode_batch(&nn::stack(&xs).unwrap()).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let zi = ae.encode(x).unwrap();
            prop_assert_eq!(&z.data()[i * 256..(i + 1) * 256], zi.data());
        }
    }
}
