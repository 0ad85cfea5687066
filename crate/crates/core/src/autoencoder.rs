//! Continuous latent autoencoder between `32 x 32 x 3` images and a
//! `4 x 8 x 8` latent.
//!
//! The encoder maps each `4 x 4` pixel patch to 4 latent channels with a
//! small MLP. The decoder rebuilds each patch from the 3 x 3 neighbourhood of
//! latent cells around it (zero padded at the border) and squashes through a
//! sigmoid.
//!
//! Flattened latents are channel-major: index `ch * 64 + y * 8 + x`. They are
//! multiplied by a stored `latent_scale`, fixed after training so the
//! training latents have unit variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image;
use crate::nn::{self, index, Linear, TrainHyper};
use crate::rng;
use crate::store::ParamStore;
use crate::tensor::{AdamState, Element, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub image_side: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_side: image::SIZE,
            patch: 4,
            latent_channels: 4,
            enc_hidden: 64,
            dec_hidden: 96,
        }
    }
}

impl AutoencoderConfig {
    pub fn latent_side(&self) -> usize {
        self.image_side / self.patch
    }

    pub fn cells(&self) -> usize {
        self.latent_side().pow(2)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.cells()
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub params: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    scale: usize,
    /// Pixel feeding each position of the patch-major layout.
    to_patches: Vec<usize>,
    from_patches: Vec<usize>,
    /// Latent cell feeding each of the 9 neighbourhood slots of each cell.
    neighbours: Vec<Option<usize>>,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        if config.patch == 0 || config.image_side % config.patch != 0 {
            return Err(Error::BadRange(format!("invalid autoencoder config {config:?}")));
        }
        let mut rng = rng::stream(seed, "autoencoder-init", 0);
        let mut p = ParamStore::new();
        let lc = config.latent_channels;
        let enc1 = Linear::new(&mut p, "enc1", config.patch_dim(), config.enc_hidden, 2.0, &mut rng);
        let enc2 = Linear::new(&mut p, "enc2", config.enc_hidden, lc, 1.0, &mut rng);
        let dec1 = Linear::new(&mut p, "dec1", 9 * lc, config.dec_hidden, 2.0, &mut rng);
        let dec2 = Linear::new(&mut p, "dec2", config.dec_hidden, config.patch_dim(), 1.0, &mut rng);
        let scale = p.add("latent_scale", Tensor::scalar(1.0));

        let (side, patch, ls) = (config.image_side, config.patch, config.latent_side());
        let mut to_patches = Vec::with_capacity(config.pixels());
        for py in 0..ls {
            for px in 0..ls {
                for dy in 0..patch {
                    for dx in 0..patch {
                        to_patches.push((py * patch + dy) * side + px * patch + dx);
                    }
                }
            }
        }
        let mut from_patches = vec![0; config.pixels()];
        for (i, &pix) in to_patches.iter().enumerate() {
            from_patches[pix] = i;
        }
        let mut neighbours = Vec::with_capacity(config.cells() * 9);
        for y in 0..ls as isize {
            for x in 0..ls as isize {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        let inside = (0..ls as isize).contains(&ny) && (0..ls as isize).contains(&nx);
                        neighbours.push(inside.then(|| (ny * ls as isize + nx) as usize));
                    }
                }
            }
        }
        Ok(Self {
            config,
            params: p,
            enc1,
            enc2,
            dec1,
            dec2,
            scale,
            to_patches,
            from_patches,
            neighbours,
        })
    }

    pub fn from_params(config: AutoencoderConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        fresh.params.check_layout(&params, "autoencoder")?;
        Ok(Self { params, ..fresh })
    }

    pub fn latent_scale(&self) -> f32 {
        self.params.get(self.scale).item()
    }

    fn layout(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: ParamStore::new(),
            enc1: self.enc1,
            enc2: self.enc2,
            dec1: self.dec1,
            dec2: self.dec2,
            scale: self.scale,
            to_patches: self.to_patches.clone(),
            from_patches: self.from_patches.clone(),
            neighbours: self.neighbours.clone(),
        }
    }

    /// Latents `(batch, latent_dim)` of images `(batch, side, side, 3)`.
    pub fn encode_var<'t, E: Element>(&self, vars: &[Var<'t, E>], images: Var<'t, E>) -> Result<Var<'t, E>> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1..] != [cfg.image_side, cfg.image_side, 3] {
            return Err(Error::BadResolution {
                expected: vec![cfg.image_side, cfg.image_side, 3],
                got: s,
            });
        }
        let (b, np, cells, lc) = (s[0], cfg.pixels(), cfg.cells(), cfg.latent_channels);
        let idx = index((0..b).flat_map(|i| self.to_patches.iter().map(move |&p| i * np + p)));
        let patches = images
            .reshape(vec![b * np, 3])?
            .gather(idx)?
            .reshape(vec![b * cells, cfg.patch_dim()])?;
        let h = self.enc1.apply(vars, patches)?.silu()?;
        let cell_codes = self.enc2.apply(vars, h)?;
        let scale = vars[self.scale].value().item().as_f64();
        cell_codes
            .reshape(vec![b, cells, lc])?
            .transpose()?
            .reshape(vec![b, lc * cells])?
            .scale(scale)
    }

    /// Images `(batch, side, side, 3)` of latents `(batch, latent_dim)`.
    pub fn decode_var<'t, E: Element>(&self, vars: &[Var<'t, E>], z: Var<'t, E>) -> Result<Var<'t, E>> {
        let cfg = &self.config;
        let s = z.shape();
        if s.len() != 2 || s[1] != cfg.latent_dim() {
            return Err(Error::shape("decode", format!("latent {s:?}, expected (batch, {})", cfg.latent_dim())));
        }
        let (b, cells, lc, np) = (s[0], cfg.cells(), cfg.latent_channels, cfg.pixels());
        let nb = &self.neighbours;
        let idx = std::sync::Arc::new(
            (0..b)
                .flat_map(|i| nb.iter().map(move |n| n.map(|c| i * cells + c)))
                .collect::<Vec<_>>(),
        );
        let ctx = z
            .scale(1.0 / vars[self.scale].value().item().as_f64())?
            .reshape(vec![b, lc, cells])?
            .transpose()?
            .reshape(vec![b * cells, lc])?
            .gather(idx)?
            .reshape(vec![b * cells, 9 * lc])?;
        let h = self.dec1.apply(vars, ctx)?.silu()?;
        let patches = self.dec2.apply(vars, h)?.sigmoid()?;
        let back = index((0..b).flat_map(|i| self.from_patches.iter().map(move |&p| i * np + p)));
        patches
            .reshape(vec![b * np, 3])?
            .gather(back)?
            .reshape(vec![b, cfg.image_side, cfg.image_side, 3])
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        image::check_image(image)?;
        image::check_range(image)?;
        let out = self.encode_batch(&image.reshaped(vec![1, image::SIZE, image::SIZE, 3])?)?;
        out.reshaped(vec![self.config.latent_dim()])
    }

    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let z = self.encode_var(&vars, tape.constant(images.clone()))?;
        let v = z.value();
        Ok((*v).clone())
    }

    /// Image of a flattened latent.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let d = self.config.latent_dim();
        if z.numel() != d {
            return Err(Error::shape("decode", format!("latent {:?}, expected {d} values", z.shape())));
        }
        let out = self.decode_batch(&z.reshaped(vec![1, d])?)?;
        out.reshaped(vec![self.config.image_side, self.config.image_side, 3])
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let img = self.decode_var(&vars, tape.constant(z.clone()))?;
        let v = img.value();
        Ok((*v).clone())
    }
}

/// Pixel-MSE training on images `(n, side, side, 3)`; returns per-epoch mean
/// loss. Afterwards `latent_scale` is set so the training latents have unit
/// variance.
pub fn train_autoencoder(ae: &mut Autoencoder, images: &Tensor, hyper: &TrainHyper) -> Result<Vec<f64>> {
    if images.rank() != 4 || images.shape()[0] == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = images.shape()[0];
    let layout = ae.layout();
    let old_scale = ae.latent_scale();
    *ae.params.tensors_mut()[ae.scale] = Tensor::scalar(1.0);
    let mut adam = AdamState::new(ae.params.tensors(), hyper.lr);
    let mut curve = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut r = rng::stream(hyper.seed, "autoencoder-epoch", epoch as u64);
        let mut losses = Vec::new();
        for batch in nn::epoch_batches(n, hyper.batch_size, &mut r) {
            let x = nn::take_rows(images, &batch)?;
            let loss = nn::train_step(&mut ae.params, &mut adam, |tape, vars| {
                let x = tape.constant(x);
                let z = layout.encode_var(vars, x)?;
                layout.decode_var(vars, z)?.mse(x)
            })?;
            losses.push(loss);
        }
        curve.push(nn::mean(&losses));
    }
    let scale = if hyper.epochs == 0 || hyper.lr == 0.0 {
        old_scale
    } else {
        let z = ae.encode_batch(images)?;
        let mean = z.sum() / z.numel() as f64;
        let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / z.numel() as f64;
        (1.0 / var.sqrt().max(1e-6)) as f32
    };
    *ae.params.tensors_mut()[ae.scale] = Tensor::scalar(scale);
    Ok(curve)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.l2_distance(b).powi(2) / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[cfg(test)]
mod tests;
