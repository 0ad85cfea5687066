//! Contrastive image/caption dual encoder.
//!
//! Text: each token id is looked up in an embedding table, a positional row
//! is added and a residual MLP is applied row-wise, giving `c` of shape
//! `(max_tokens, d_txt)`. The text embedding is a linear map of the
//! flattened `c`, normalized.
//!
//! Image: `8 x 8` patches (16 tokens of 192 values, pixel-major within a
//! patch) are projected to `d_img` and passed through residual blocks of
//! token mixing and an MLP. Tap `i` is the residual stream after block `i`,
//! flattened token-major to `16 * d_img` values. The image embedding is a
//! linear map of the normalized final stream, normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image;
use crate::neurosim::{self, PAD};
use crate::nn::{self, index, Linear, TrainHyper};
use crate::rng;
use crate::store::ParamStore;
use crate::tensor::{AdamState, Element, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub max_tokens: usize,
    pub d_txt: usize,
    pub k_keep: usize,
    pub txt_hidden: usize,
    pub patch: usize,
    pub d_img: usize,
    pub blocks: usize,
    pub img_hidden: usize,
    pub d_emb: usize,
    /// 1-based blocks whose output feeds the structure loss.
    pub taps: Vec<usize>,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab: neurosim::vocabulary().len(),
            max_tokens: 8,
            d_txt: 16,
            k_keep: 6,
            txt_hidden: 32,
            patch: 8,
            d_img: 48,
            blocks: 6,
            img_hidden: 96,
            d_emb: 32,
            taps: vec![1, 2, 3],
            temperature: 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        (image::SIZE / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn tap_dim(&self) -> usize {
        self.patches() * self.d_img
    }

    /// Length of the kept, flattened condition.
    pub fn c_dim(&self) -> usize {
        self.k_keep * self.d_txt
    }
}

#[derive(Clone, Debug)]
struct ImageBlock {
    mix: usize,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Clone, Debug)]
pub struct ContrastiveEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    tok: usize,
    tok_pos: usize,
    txt1: Linear,
    txt2: Linear,
    txt_proj: Linear,
    patch_proj: Linear,
    patch_pos: usize,
    blocks: Vec<ImageBlock>,
    img_proj: Linear,
    to_patches: Vec<usize>,
}

/// Image-side outputs on a tape.
pub struct ImageOutputs<'t, E: Element = f32> {
    /// `(batch, tap_dim)` per configured tap.
    pub taps: Vec<Var<'t, E>>,
    /// `(batch, d_emb)`, unit rows; absent when only taps were requested.
    pub embedding: Option<Var<'t, E>>,
}

/// Plain-tensor image features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub taps: Vec<Tensor>,
    pub embedding: Tensor,
}

impl ContrastiveEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let bad_taps = config.taps.is_empty() || config.taps.iter().any(|&t| t == 0 || t > config.blocks);
        if bad_taps || config.k_keep > config.max_tokens || image::SIZE % config.patch != 0 {
            return Err(Error::BadRange(format!("invalid encoder config {config:?}")));
        }
        let mut r = rng::stream(seed, "encoder-init", 0);
        let mut p = ParamStore::new();
        let tok = p.add("tok", Tensor::randn(vec![config.vocab, config.d_txt], 1.0, &mut r));
        let tok_pos = p.add("tok_pos", Tensor::randn(vec![config.max_tokens, config.d_txt], 0.3, &mut r));
        let txt1 = Linear::new(&mut p, "txt1", config.d_txt, config.txt_hidden, 2.0, &mut r);
        let txt2 = Linear::new(&mut p, "txt2", config.txt_hidden, config.d_txt, 0.5, &mut r);
        let txt_proj = Linear::new(&mut p, "txt_proj", config.max_tokens * config.d_txt, config.d_emb, 1.0, &mut r);
        let n = config.patches();
        let patch_proj = Linear::new(&mut p, "patch_proj", config.patch_dim(), config.d_img, 1.0, &mut r);
        let patch_pos = p.add("patch_pos", Tensor::randn(vec![n, config.d_img], 0.3, &mut r));
        let mut blocks = Vec::new();
        for i in 0..config.blocks {
            let mix = p.add(
                format!("block{i}.mix"),
                Tensor::randn(vec![n, n], 0.5 / (n as f32).sqrt(), &mut r),
            );
            let mlp1 = Linear::new(&mut p, &format!("block{i}.mlp1"), config.d_img, config.img_hidden, 2.0, &mut r);
            let mlp2 = Linear::new(&mut p, &format!("block{i}.mlp2"), config.img_hidden, config.d_img, 0.5, &mut r);
            blocks.push(ImageBlock { mix, mlp1, mlp2 });
        }
        let img_proj = Linear::new(&mut p, "img_proj", config.tap_dim(), config.d_emb, 1.0, &mut r);

        let (side, ps) = (image::SIZE, config.patch);
        let g = side / ps;
        let mut to_patches = Vec::with_capacity(side * side);
        for py in 0..g {
            for px in 0..g {
                for dy in 0..ps {
                    for dx in 0..ps {
                        to_patches.push((py * ps + dy) * side + px * ps + dx);
                    }
                }
            }
        }
        Ok(Self {
            config,
            params: p,
            tok,
            tok_pos,
            txt1,
            txt2,
            txt_proj,
            patch_proj,
            patch_pos,
            blocks,
            img_proj,
            to_patches,
        })
    }

    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        fresh.params.check_layout(&params, "encoder")?;
        Ok(Self { params, ..fresh })
    }

    fn layout(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: ParamStore::new(),
            blocks: self.blocks.clone(),
            to_patches: self.to_patches.clone(),
            ..*self
        }
    }

    /// Token ids padded to `max_tokens`, validated.
    pub fn pad_tokens(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if tokens.len() > self.config.max_tokens {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: self.config.max_tokens,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::UnknownToken(t));
        }
        let mut v = tokens.to_vec();
        v.resize(self.config.max_tokens, PAD);
        Ok(v)
    }

    /// `c` for a batch of padded captions: `(batch * max_tokens, d_txt)`.
    pub fn text_var<'t, E: Element>(&self, vars: &[Var<'t, E>], padded: &[Vec<usize>]) -> Result<Var<'t, E>> {
        let m = self.config.max_tokens;
        let ids = index(padded.iter().flat_map(|p| p.iter().copied()));
        let pos = index((0..padded.len()).flat_map(|_| 0..m));
        let e = vars[self.tok].gather(ids)?.add(vars[self.tok_pos].gather(pos)?)?;
        let h = self.txt1.apply(vars, e.layer_norm()?)?.silu()?;
        e.add(self.txt2.apply(vars, h)?)
    }

    /// Unit text embeddings `(batch, d_emb)` from `c`.
    pub fn text_embedding_var<'t, E: Element>(&self, vars: &[Var<'t, E>], c: Var<'t, E>, batch: usize) -> Result<Var<'t, E>> {
        let flat = c.reshape(vec![batch, self.config.max_tokens * self.config.d_txt])?;
        self.txt_proj.apply(vars, flat)?.normalize()
    }

    /// Full `c` of shape `(max_tokens, d_txt)`.
    pub fn embed_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let padded = self.pad_tokens(tokens)?;
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let c = self.text_var(&vars, &[padded])?;
        let v = c.value();
        Ok((*v).clone())
    }

    /// First `k_keep` rows of `c`, flattened.
    pub fn condition(&self, tokens: &[usize]) -> Result<Tensor> {
        let c = self.embed_text(tokens)?;
        Tensor::new(vec![self.config.c_dim()], c.data()[..self.config.c_dim()].to_vec())
    }

    /// Runs the image branch on `(batch, 32, 32, 3)`. With `taps_only` it
    /// stops after the deepest tap.
    pub fn image_var<'t, E: Element>(
        &self,
        vars: &[Var<'t, E>],
        images: Var<'t, E>,
        taps_only: bool,
    ) -> Result<ImageOutputs<'t, E>> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1..] != [image::SIZE, image::SIZE, 3] {
            return Err(Error::BadResolution {
                expected: vec![image::SIZE, image::SIZE, 3],
                got: s,
            });
        }
        let (b, n, d, np) = (s[0], cfg.patches(), cfg.d_img, image::SIZE * image::SIZE);
        let idx = index((0..b).flat_map(|i| self.to_patches.iter().map(move |&p| i * np + p)));
        let patches = images
            .reshape(vec![b * np, 3])?
            .gather(idx)?
            .reshape(vec![b * n, cfg.patch_dim()])?;
        let pos = vars[self.patch_pos].gather(index((0..b).flat_map(|_| 0..n)))?;
        let mut h = self.patch_proj.apply(vars, patches)?.add(pos)?;
        let last = if taps_only {
            *cfg.taps.iter().max().expect("taps nonempty")
        } else {
            cfg.blocks
        };
        let mut taps = Vec::with_capacity(cfg.taps.len());
        for (i, blk) in self.blocks.iter().take(last).enumerate() {
            let mixed = vars[blk.mix]
                .matmul(h.layer_norm()?.reshape(vec![b, n, d])?)?
                .reshape(vec![b * n, d])?;
            h = h.add(mixed)?;
            let m = blk.mlp1.apply(vars, h.layer_norm()?)?.silu()?;
            h = h.add(blk.mlp2.apply(vars, m)?)?;
            if cfg.taps.contains(&(i + 1)) {
                taps.push(h.reshape(vec![b, n * d])?);
            }
        }
        let embedding = if taps_only {
            None
        } else {
            let flat = h.layer_norm()?.reshape(vec![b, n * d])?;
            Some(self.img_proj.apply(vars, flat)?.normalize()?)
        };
        Ok(ImageOutputs { taps, embedding })
    }

    pub fn image_features(&self, image: &Tensor) -> Result<ImageFeatures> {
        image::check_image(image)?;
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let x = tape.constant(image.reshaped(vec![1, image::SIZE, image::SIZE, 3])?);
        let out = self.image_var(&vars, x, false)?;
        let flat = |v: Var<'_>| -> Result<Tensor> {
            let t = v.value();
            t.reshaped(vec![t.numel()])
        };
        Ok(ImageFeatures {
            taps: out.taps.into_iter().map(flat).collect::<Result<_>>()?,
            embedding: flat(out.embedding.expect("full pass"))?,
        })
    }

    /// Unit image embeddings `(batch, d_emb)` of a batch of images.
    pub fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let out = self.image_var(&vars, tape.constant(images.clone()), false)?;
        let v = out.embedding.expect("full pass").value();
        Ok((*v).clone())
    }

    pub fn embed_captions(&self, captions: &[Vec<usize>]) -> Result<Tensor> {
        let padded: Vec<Vec<usize>> = captions.iter().map(|c| self.pad_tokens(c)).collect::<Result<_>>()?;
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let c = self.text_var(&vars, &padded)?;
        let v = self.text_embedding_var(&vars, c, padded.len())?.value();
        Ok((*v).clone())
    }
}

/// Symmetric InfoNCE over the in-batch pairs of unit embeddings.
pub fn info_nce<'t, E: Element>(img: Var<'t, E>, txt: Var<'t, E>, temperature: f64) -> Result<Var<'t, E>> {
    let b = img.shape()[0];
    let logits = img.matmul(txt.transpose()?)?.scale(1.0 / temperature)?;
    let eye = img.constant(crate::tensor::TensorOf::eye(b));
    let rows = logits.log_softmax()?.mul(eye)?.sum()?;
    let cols = logits.transpose()?.log_softmax()?.mul(eye)?.sum()?;
    rows.add(cols)?.scale(-0.5 / b as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastiveReport {
    pub loss: Vec<f64>,
    /// Image-to-caption top-1 accuracy on the held-out pairs after each epoch.
    pub retrieval: Vec<f64>,
}

/// Trains on `(images, captions)` pairs; retrieval accuracy is measured on
/// `held_out` after every epoch.
pub fn train_contrastive(
    enc: &mut ContrastiveEncoder,
    images: &Tensor,
    captions: &[Vec<usize>],
    held_out: Option<(&Tensor, &[Vec<usize>])>,
    hyper: &TrainHyper,
) -> Result<ContrastiveReport> {
    let n = captions.len();
    if n == 0 || images.rank() != 4 || images.shape()[0] != n {
        return Err(Error::EmptyDataset);
    }
    if hyper.batch_size < 4 {
        return Err(Error::BatchTooSmall(hyper.batch_size));
    }
    let padded: Vec<Vec<usize>> = captions.iter().map(|c| enc.pad_tokens(c)).collect::<Result<_>>()?;
    let layout = enc.layout();
    let tau = enc.config.temperature;
    let mut adam = AdamState::new(enc.params.tensors(), hyper.lr);
    let mut report = ContrastiveReport::default();
    for epoch in 0..hyper.epochs {
        let mut r = rng::stream(hyper.seed, "contrastive-epoch", epoch as u64);
        let mut losses = Vec::new();
        for batch in nn::epoch_batches(n, hyper.batch_size, &mut r) {
            if batch.len() < 4 {
                continue;
            }
            let x = nn::take_rows(images, &batch)?;
            let caps: Vec<Vec<usize>> = batch.iter().map(|&i| padded[i].clone()).collect();
            let loss = nn::train_step(&mut enc.params, &mut adam, |tape, vars| {
                let img = layout.image_var(vars, tape.constant(x), false)?.embedding.expect("full pass");
                let c = layout.text_var(vars, &caps)?;
                let txt = layout.text_embedding_var(vars, c, caps.len())?;
                info_nce(img, txt, tau)
            })?;
            losses.push(loss);
        }
        report.loss.push(nn::mean(&losses));
        if let Some((hi, hc)) = held_out {
            report.retrieval.push(retrieval_accuracy(enc, hi, hc)?);
        }
    }
    Ok(report)
}

/// Fraction of images whose own caption is the most similar one in the set.
pub fn retrieval_accuracy(enc: &ContrastiveEncoder, images: &Tensor, captions: &[Vec<usize>]) -> Result<f64> {
    let sims = similarity_matrix(enc, images, captions)?;
    let n = captions.len();
    let hits = (0..n)
        .filter(|&i| {
            let row = &sims[i * n..(i + 1) * n];
            (0..n).all(|j| j == i || row[j] < row[i])
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Row-major `(images x captions)` cosine similarities.
pub fn similarity_matrix(enc: &ContrastiveEncoder, images: &Tensor, captions: &[Vec<usize>]) -> Result<Vec<f64>> {
    let img = embed_in_chunks(images, 64, |chunk| enc.embed_images(chunk))?;
    let txt = enc.embed_captions(captions)?;
    let (n, m, d) = (img.shape()[0], txt.shape()[0], enc.config.d_emb);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push((0..d).map(|k| img.row(i)[k] as f64 * txt.row(j)[k] as f64).sum());
        }
    }
    Ok(out)
}

/// Applies `f` to consecutive chunks of rows and stacks the results.
pub fn embed_in_chunks(x: &Tensor, chunk: usize, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        parts.push(f(&nn::take_rows(x, &rows)?)?);
        start = end;
    }
    let cols = parts[0].numel() / parts[0].shape()[0];
    let data: Vec<f32> = parts.into_iter().flat_map(|p| p.into_data()).collect();
    Tensor::new(vec![n, cols], data)
}

#[cfg(test)]
mod tests;
