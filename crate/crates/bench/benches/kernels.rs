use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mindkit::diffusion::{Denoiser, DenoiserConfig};
use mindkit::encoder::{ContrastiveEncoder, EncoderConfig};
use mindkit::{metrics, rng, Tape, Tensor};

fn image(seed: u64) -> Tensor {
    Tensor::uniform(vec![32, 32, 3], 0.0, 1.0, &mut rng::stream(seed, "bench-image", 0))
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let a = rng::gaussian(1, "a", 0, vec![n, n]);
        let b = rng::gaussian(1, "b", 0, vec![n, n]);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
                black_box(out.value().numel())
            })
        });
    }
    g.finish();
}

fn denoiser_step(c: &mut Criterion) {
    let cfg = DenoiserConfig::default();
    let model = Denoiser::new(cfg.clone(), 0).unwrap();
    let z = rng::gaussian(2, "z", 0, vec![cfg.latent_dim()]);
    let cond = rng::gaussian(2, "c", 0, vec![cfg.cond_dim()]);
    c.bench_function("denoiser_predict_eps", |b| b.iter(|| black_box(model.predict_eps(&z, 150, &cond).unwrap())));
}

fn ssim(c: &mut Criterion) {
    let (a, b) = (image(3), image(4));
    c.bench_function("ssim", |bench| bench.iter(|| black_box(metrics::ssim(&a, &b).unwrap())));
}

fn encoder_features(c: &mut Criterion) {
    let enc = ContrastiveEncoder::new(EncoderConfig::default(), 0).unwrap();
    let img = image(5);
    c.bench_function("encoder_image_features", |b| b.iter(|| black_box(enc.image_features(&img).unwrap())));
}

criterion_group!(benches, matmul, denoiser_step, ssim, encoder_features);
criterion_main!(benches);
