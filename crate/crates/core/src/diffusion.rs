//! Noise schedule, forward diffusion, the conditional noise predictor and
//! image-to-image sampling.
//!
//! The denoiser cuts the `4 x 8 x 8` latent into 16 tokens of `2 x 2`
//! spatial cells (16 values each, channel-major within a token), lifts them
//! to `d_model`, and runs blocks of cross-attention on the condition rows,
//! a learned token-mixing matrix and an MLP, each pre-normed and residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::nn::TrainHyper;
use crate::nn::{self, index, Linear};
use crate::rng;
use crate::store::ParamStore;
use crate::tensor::{AdamState, Element, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear betas between `beta_start` and `beta_end`, `t` in `1..=steps`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::BadRange("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::BadRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut beta = vec![0.0];
    let mut alpha_bar = vec![1.0];
    for t in 1..=steps {
        let b = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
        };
        beta.push(b);
        alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
    }
    Ok(DiffusionSchedule { beta, alpha_bar })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    /// Product of `alpha` over `1..=t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(300, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// `sqrt(abar_t) z + sqrt(1 - abar_t) eps`.
pub fn forward_noise(z: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// Noise-prediction objective: mean squared error against the true noise.
pub fn denoising_loss<'t, E: Element>(pred: Var<'t, E>, eps: Var<'t, E>) -> Result<Var<'t, E>> {
    pred.mse(eps)
}

/// Projection weights of one cross-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t, E: Element = f32> {
    pub wq: Var<'t, E>,
    pub wk: Var<'t, E>,
    pub wv: Var<'t, E>,
    pub wo: Var<'t, E>,
}

pub struct Attention<'t, E: Element = f32> {
    pub out: Var<'t, E>,
    /// `(batch, n_tokens, n_cond)`; every row sums to 1.
    pub weights: Var<'t, E>,
}

/// `softmax(Q K^T / sqrt(d)) V W_o` with `Q = phi W_q`, `K = c W_k`, `V = c W_v`.
///
/// `phi` is `(batch * n_tokens, d_model)` and `c` is `(batch * n_cond, d_cond)`;
/// `batch` splits both.
pub fn cross_attention<'t, E: Element>(
    phi: Var<'t, E>,
    c: Var<'t, E>,
    w: &AttentionWeights<'t, E>,
    batch: usize,
) -> Result<Attention<'t, E>> {
    let (ps, cs) = (phi.shape(), c.shape());
    if ps.len() != 2 || cs.len() != 2 || batch == 0 || ps[0] % batch != 0 || cs[0] % batch != 0 {
        return Err(Error::shape(
            "cross_attention",
            format!("phi {ps:?}, c {cs:?}, batch {batch}"),
        ));
    }
    let (n_tok, n_cond) = (ps[0] / batch, cs[0] / batch);
    let q = phi.matmul(w.wq)?;
    let d = q.shape()[1];
    let q = q.reshape(vec![batch, n_tok, d])?;
    let k = c.matmul(w.wk)?.reshape(vec![batch, n_cond, d])?;
    let v = c.matmul(w.wv)?.reshape(vec![batch, n_cond, d])?;
    let weights = q.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?.softmax()?;
    let out = weights.matmul(v)?.reshape(vec![batch * n_tok, d])?.matmul(w.wo)?;
    Ok(Attention { out, weights })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_side: usize,
    pub patch: usize,
    pub d_model: usize,
    pub d_cond: usize,
    pub n_cond: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_side: 8,
            patch: 2,
            d_model: 64,
            d_cond: 16,
            n_cond: 6,
            blocks: 3,
            mlp_hidden: 128,
            steps: 300,
        }
    }
}

impl DenoiserConfig {
    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_side * self.latent_side
    }

    pub fn tokens(&self) -> usize {
        (self.latent_side / self.patch).pow(2)
    }

    pub fn token_dim(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn cond_dim(&self) -> usize {
        self.n_cond * self.d_cond
    }

    /// Latent index feeding position `j` of token `k`.
    fn token_source(&self, k: usize, j: usize) -> usize {
        let g = self.latent_side / self.patch;
        let (ty, tx) = (k / g, k % g);
        let pp = self.patch * self.patch;
        let (ch, within) = (j / pp, j % pp);
        let (dy, dx) = (within / self.patch, within % self.patch);
        let (y, x) = (ty * self.patch + dy, tx * self.patch + dx);
        ch * self.latent_side * self.latent_side + y * self.latent_side + x
    }
}

#[derive(Clone, Debug)]
struct Block {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    mix: usize,
    mlp1: Linear,
    mlp2: Linear,
}

/// The noise predictor and its parameters.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    time_table: usize,
    time_proj: Linear,
    pos: usize,
    input: Linear,
    blocks: Vec<Block>,
    output: Linear,
    to_tokens: Vec<usize>,
    from_tokens: Vec<usize>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.latent_side % config.patch != 0 || config.d_model == 0 || config.blocks == 0 {
            return Err(Error::BadRange(format!("invalid denoiser config {config:?}")));
        }
        let mut rng = rng::stream(seed, "denoiser-init", 0);
        let mut p = ParamStore::new();
        let (dm, n_tok) = (config.d_model, config.tokens());
        let time_table = p.add("time_table", sinusoidal(config.steps, dm));
        let time_proj = Linear::new(&mut p, "time_proj", dm, dm, 1.0, &mut rng);
        let pos = p.add("pos", Tensor::randn(vec![n_tok, dm], 0.1, &mut rng));
        let input = Linear::new(&mut p, "input", config.token_dim(), dm, 1.0, &mut rng);
        let mut blocks = Vec::new();
        for i in 0..config.blocks {
            let std_m = (1.0 / dm as f32).sqrt();
            let std_c = (1.0 / config.d_cond as f32).sqrt();
            let wq = p.add(format!("block{i}.wq"), Tensor::randn(vec![dm, dm], std_m, &mut rng));
            let wk = p.add(format!("block{i}.wk"), Tensor::randn(vec![config.d_cond, dm], std_c, &mut rng));
            let wv = p.add(format!("block{i}.wv"), Tensor::randn(vec![config.d_cond, dm], std_c, &mut rng));
            let wo = p.add(format!("block{i}.wo"), Tensor::randn(vec![dm, dm], 0.5 * std_m, &mut rng));
            let mix = p.add(
                format!("block{i}.mix"),
                Tensor::randn(vec![n_tok, n_tok], 0.5 / (n_tok as f32).sqrt(), &mut rng),
            );
            let mlp1 = Linear::new(&mut p, &format!("block{i}.mlp1"), dm, config.mlp_hidden, 2.0, &mut rng);
            let mlp2 = Linear::new(&mut p, &format!("block{i}.mlp2"), config.mlp_hidden, dm, 0.5, &mut rng);
            blocks.push(Block {
                wq,
                wk,
                wv,
                wo,
                mix,
                mlp1,
                mlp2,
            });
        }
        let output = Linear::new(&mut p, "output", dm, config.token_dim(), 0.5, &mut rng);
        Self::assemble(config, p, time_table, time_proj, pos, input, blocks, output)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: DenoiserConfig,
        params: ParamStore,
        time_table: usize,
        time_proj: Linear,
        pos: usize,
        input: Linear,
        blocks: Vec<Block>,
        output: Linear,
    ) -> Result<Self> {
        let (n_tok, td) = (config.tokens(), config.token_dim());
        let to_tokens: Vec<usize> = (0..n_tok * td).map(|i| config.token_source(i / td, i % td)).collect();
        let mut from_tokens = vec![0; config.latent_dim()];
        for (i, &src) in to_tokens.iter().enumerate() {
            from_tokens[src] = i;
        }
        Ok(Self {
            config,
            params,
            time_table,
            time_proj,
            pos,
            input,
            blocks,
            output,
            to_tokens,
            from_tokens,
        })
    }

    /// Rebuilds a denoiser from saved parameters.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        fresh.params.check_layout(&params, "denoiser")?;
        Ok(Self { params, ..fresh })
    }

    /// Noise prediction for latents `(batch, latent_dim)` at steps `t`
    /// (one per row) conditioned on `c` of shape `(batch * n_cond, d_cond)`.
    pub fn forward<'t, E: Element>(
        &self,
        vars: &[Var<'t, E>],
        z_t: Var<'t, E>,
        t: &[usize],
        c: Var<'t, E>,
    ) -> Result<Var<'t, E>> {
        let cfg = &self.config;
        let zs = z_t.shape();
        let batch = t.len();
        if zs != [batch, cfg.latent_dim()] {
            return Err(Error::shape("denoiser", format!("latent {zs:?} for batch {batch}")));
        }
        if c.shape() != [batch * cfg.n_cond, cfg.d_cond] {
            return Err(Error::shape("denoiser", format!("condition {:?}", c.shape())));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > cfg.steps) {
            return Err(Error::StepOutOfRange {
                step: bad,
                max: cfg.steps,
            });
        }
        let (n_tok, dm, ld) = (cfg.tokens(), cfg.d_model, cfg.latent_dim());
        let rows = batch * n_tok;
        let gather_tokens = index((0..batch).flat_map(|b| self.to_tokens.iter().map(move |&s| b * ld + s)));
        let tokens = z_t
            .reshape(vec![batch * ld, 1])?
            .gather(gather_tokens)?
            .reshape(vec![rows, cfg.token_dim()])?;
        let temb = vars[self.time_table]
            .gather(index(t.iter().map(|&s| s - 1)))?;
        let temb = self.time_proj.apply(vars, temb)?.silu()?;
        let per_token = |m: usize| index((0..batch).flat_map(move |b| std::iter::repeat_n(b, m)));
        let temb = temb.gather(per_token(n_tok))?;
        let pos = vars[self.pos].gather(index((0..batch).flat_map(|_| 0..n_tok)))?;
        let mut h = self.input.apply(vars, tokens)?.add(temb)?.add(pos)?;
        for blk in &self.blocks {
            let w = AttentionWeights {
                wq: vars[blk.wq],
                wk: vars[blk.wk],
                wv: vars[blk.wv],
                wo: vars[blk.wo],
            };
            h = h.add(cross_attention(h.layer_norm()?, c, &w, batch)?.out)?;
            let mixed = vars[blk.mix]
                .matmul(h.layer_norm()?.reshape(vec![batch, n_tok, dm])?)?
                .reshape(vec![rows, dm])?;
            h = h.add(mixed)?;
            let m = blk.mlp1.apply(vars, h.layer_norm()?)?.silu()?;
            h = h.add(blk.mlp2.apply(vars, m)?)?;
        }
        let out = self.output.apply(vars, h.layer_norm()?)?;
        let scatter = index((0..batch).flat_map(|b| self.from_tokens.iter().map(move |&i| b * ld + i)));
        out.reshape(vec![batch * ld, 1])?.gather(scatter)?.reshape(vec![batch, ld])
    }

    /// Noise prediction for one latent outside any tape.
    pub fn predict_eps(&self, z_t: &Tensor, t: usize, c: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let cfg = &self.config;
        let z = tape.constant(z_t.reshaped(vec![1, cfg.latent_dim()])?);
        let c = tape.constant(c.reshaped(vec![cfg.n_cond, cfg.d_cond]).map_err(|_| {
            Error::shape("predict_eps", format!("condition {:?}", c.shape()))
        })?);
        let out = self.forward(&vars, z, &[t], c)?;
        let v = out.value();
        v.reshaped(z_t.shape().to_vec())
    }
}

/// Fixed sinusoidal table, row `t - 1` for step `t`.
fn sinusoidal(steps: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(steps * dim);
    for t in 1..=steps {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let freq = (-(k * 2.0 / dim as f64) * 10000f64.ln()).exp();
            let a = t as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() } as f32);
        }
    }
    Tensor::new(vec![steps, dim], data).expect("table shape")
}

/// Fits the noise predictor on latents `(n, latent_dim)` with conditions
/// `(n, n_cond * d_cond)`; returns the mean loss of every epoch.
pub fn train_denoiser(
    den: &mut Denoiser,
    latents: &Tensor,
    conds: &Tensor,
    sched: &DiffusionSchedule,
    hyper: &TrainHyper,
) -> Result<Vec<f64>> {
    let cfg = den.config.clone();
    if latents.rank() != 2 || latents.numel() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = latents.shape()[0];
    if latents.shape()[1] != cfg.latent_dim() || conds.shape() != [n, cfg.cond_dim()] {
        return Err(Error::shape(
            "train_denoiser",
            format!("latents {:?}, conditions {:?}", latents.shape(), conds.shape()),
        ));
    }
    if sched.steps() != cfg.steps {
        return Err(Error::BadRange(format!("schedule has {} steps, denoiser {}", sched.steps(), cfg.steps)));
    }
    let mut adam = AdamState::new(den.params.tensors(), hyper.lr);
    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut step = 0u64;
    for epoch in 0..hyper.epochs {
        let mut order_rng = rng::stream(hyper.seed, "denoiser-epoch", epoch as u64);
        let mut losses = Vec::new();
        for batch in nn::epoch_batches(n, hyper.batch_size, &mut order_rng) {
            let b = batch.len();
            let mut r = rng::stream(hyper.seed, "denoiser-step", step);
            step += 1;
            let ts: Vec<usize> = (0..b).map(|_| rand::Rng::random_range(&mut r, 1..=cfg.steps)).collect();
            let eps = Tensor::randn(vec![b, cfg.latent_dim()], 1.0, &mut r);
            let z0 = nn::take_rows(latents, &batch)?;
            let mut zt = Vec::with_capacity(z0.numel());
            for (i, &t) in ts.iter().enumerate() {
                let ab = sched.alpha_bar(t);
                let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
                zt.extend(z0.row(i).iter().zip(eps.row(i)).map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32));
            }
            let zt = Tensor::new(vec![b, cfg.latent_dim()], zt)?;
            let c = nn::take_rows(conds, &batch)?.reshaped(vec![b * cfg.n_cond, cfg.d_cond])?;
            let model = den.clone_structure();
            let loss = nn::train_step(&mut den.params, &mut adam, |tape, vars| {
                let pred = model.forward(vars, tape.constant(zt), &ts, tape.constant(c))?;
                denoising_loss(pred, tape.constant(eps))
            })?;
            losses.push(loss);
        }
        curve.push(nn::mean(&losses));
    }
    Ok(curve)
}

impl Denoiser {
    /// Same layout with no parameters, for use while `params` is borrowed.
    fn clone_structure(&self) -> Self {
        Self {
            params: ParamStore::new(),
            config: self.config.clone(),
            time_table: self.time_table,
            time_proj: self.time_proj,
            pos: self.pos,
            input: self.input,
            blocks: self.blocks.clone(),
            output: self.output,
            to_tokens: self.to_tokens.clone(),
            from_tokens: self.from_tokens.clone(),
        }
    }
}

/// The frozen randomness of one img2img run: which steps are visited and
/// the noise drawn for each, so the chain can be replayed exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingChain {
    pub t_start: usize,
    /// Visited steps in descending order; each moves to the next entry, the
    /// last one to 0.
    pub steps: Vec<usize>,
    pub init_noise: Tensor,
    pub step_noise: Vec<Option<Tensor>>,
}

impl DenoisingChain {
    pub fn new(sched: &DiffusionSchedule, t_start: usize, stride: usize, seed: u64, latent_dim: usize) -> Result<Self> {
        sched.check(t_start)?;
        if stride == 0 {
            return Err(Error::BadRange("stride must be at least 1".into()));
        }
        let steps: Vec<usize> = (1..=t_start).rev().step_by(stride).collect();
        let step_noise = steps
            .iter()
            .enumerate()
            .map(|(k, _)| {
                let has_next = k + 1 < steps.len();
                has_next.then(|| rng::gaussian(seed, "img2img-step", k as u64, vec![1, latent_dim]))
            })
            .collect();
        Ok(Self {
            t_start,
            init_noise: rng::gaussian(seed, "img2img-init", 0, vec![1, latent_dim]),
            steps,
            step_noise,
        })
    }

    fn prev(&self, k: usize) -> usize {
        self.steps.get(k + 1).copied().unwrap_or(0)
    }

    /// Noises `z0` (`(1, latent_dim)`) to `t_start` and denoises back to step
    /// 0 under condition `c` (`(n_cond, d_cond)`).
    pub fn run<'t, E: Element>(
        &self,
        sched: &DiffusionSchedule,
        den: &Denoiser,
        vars: &[Var<'t, E>],
        z0: Var<'t, E>,
        c: Var<'t, E>,
    ) -> Result<Var<'t, E>> {
        if self.t_start == 0 {
            return Ok(z0);
        }
        let ab = sched.alpha_bar(self.t_start);
        let noise = z0.constant(self.init_noise.map(|v| v * (1.0 - ab).sqrt() as f32).cast());
        let mut z = z0.scale(ab.sqrt())?.add(noise)?;
        for (k, &t) in self.steps.iter().enumerate() {
            let tp = self.prev(k);
            let (ab_t, ab_p) = (sched.alpha_bar(t), sched.alpha_bar(tp));
            let alpha = ab_t / ab_p;
            let beta = 1.0 - alpha;
            let eps = den.forward(vars, z, &[t], c)?;
            z = z.sub(eps.scale(beta / (1.0 - ab_t).sqrt())?)?.scale(1.0 / alpha.sqrt())?;
            if let Some(n) = &self.step_noise[k] {
                let sigma = (beta * (1.0 - ab_p) / (1.0 - ab_t)).sqrt();
                z = z.add(z.constant(n.map(|v| v * sigma as f32).cast()))?;
            }
        }
        Ok(z)
    }
}

/// Partially noises `z_decoded` to `t_start`, then runs the ancestral
/// sampler back to step 0 every `stride` steps under condition `c`.
pub fn sample_img2img(
    z_decoded: &Tensor,
    c: &Tensor,
    t_start: usize,
    sched: &DiffusionSchedule,
    den: &Denoiser,
    seed: u64,
    stride: usize,
) -> Result<Tensor> {
    let cfg = &den.config;
    let chain = DenoisingChain::new(sched, t_start, stride, seed, cfg.latent_dim())?;
    let tape = Tape::new();
    let vars = den.params.bind(&tape, false);
    let z = tape.constant(z_decoded.reshaped(vec![1, cfg.latent_dim()])?);
    let c = tape.constant(c.reshaped(vec![cfg.n_cond, cfg.d_cond])?);
    let out = chain.run(sched, den, &vars, z, c)?;
    let v = out.value();
    v.reshaped(z_decoded.shape().to_vec())
}
