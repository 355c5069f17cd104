//! Toy latent-diffusion prior: linear noise schedule, a small UNet epsilon
//! predictor with timestep embedding and a learned null-conditioning token,
//! and the one-step clean-latent estimate
//! z0 = z_t / sqrt(ab) - sqrt(1-ab) eps(z_t) / sqrt(ab).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::{hash_weights, Container};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::lora::{adapted_weight_g, LoraAdapter, LoraSet};
use crate::nn::{const_binder, Binder, Conv2d, Linear};
use crate::optim::AdamW;
use crate::seeds;
use crate::tensor::Tensor;
use crate::vae::{sample_latent, split_moments, AutoencoderModel, Moments, LATENT_CHANNELS};

pub const TEMB_DIM: usize = 64;

// ---------------------------------------------------------------------------
// Noise schedule

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub betas: Vec<f32>,
    pub alpha_bar: Vec<f32>,
}

impl NoiseSchedule {
    /// Linear beta schedule; cumulative products computed in f64.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidArg("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArg(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        let mut alpha_bar = Vec::with_capacity(t_steps);
        let mut prod = 1.0f64;
        for t in 0..t_steps {
            let frac = if t_steps == 1 { 0.0 } else { t as f64 / (t_steps - 1) as f64 };
            let beta = beta_start + frac * (beta_end - beta_start);
            prod *= 1.0 - beta;
            betas.push(beta as f32);
            alpha_bar.push(prod as f32);
        }
        Ok(NoiseSchedule {
            t_steps,
            betas,
            alpha_bar,
        })
    }

    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).expect("valid defaults")
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f32> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArg(format!("t {t} outside [0,{})", self.t_steps)))
    }
}

/// Sinusoidal timestep embedding.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        v[i] = arg.sin() as f32;
        v[half + i] = arg.cos() as f32;
    }
    Tensor::new(vec![dim], v)
}

// ---------------------------------------------------------------------------
// UNet

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    tproj: Linear,
}

impl ResBlock {
    fn init(ch: usize, rng: &mut impl rand::Rng) -> Self {
        ResBlock {
            conv1: Conv2d::init(ch, ch, 3, 1, 1, rng),
            conv2: Conv2d::init(ch, ch, 3, 1, 1, rng),
            tproj: Linear::init(TEMB_DIM, ch, rng),
        }
    }

    fn forward_g(
        &self,
        g: &mut Graph,
        x: NodeId,
        temb: NodeId,
        name: &str,
        lora: Option<&LoraSet>,
        bind: &mut Binder,
    ) -> NodeId {
        let mut h = conv_lora_g(g, x, &self.conv1, &format!("{name}.conv1"), lora, bind);
        h = g.silu(h);
        let bias = linear_lora_g(g, temb, &self.tproj, &format!("{name}.tproj"), lora, bind);
        h = g.add_ch_bias(h, bias);
        h = g.silu(h);
        h = conv_lora_g(g, h, &self.conv2, &format!("{name}.conv2"), lora, bind);
        g.add(x, h)
    }

    fn push_params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv1.push_params(&format!("{name}.conv1"), out);
        self.conv2.push_params(&format!("{name}.conv2"), out);
        self.tproj.push_params(&format!("{name}.tproj"), out);
    }

    fn push_params_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv1.push_params_mut(&format!("{name}.conv1"), out);
        self.conv2.push_params_mut(&format!("{name}.conv2"), out);
        self.tproj.push_params_mut(&format!("{name}.tproj"), out);
    }
}

fn conv_lora_g(
    g: &mut Graph,
    x: NodeId,
    conv: &Conv2d,
    name: &str,
    lora: Option<&LoraSet>,
    bind: &mut Binder,
) -> NodeId {
    let w = bind(g, &format!("{name}.w"), &conv.w);
    let b = bind(g, &format!("{name}.b"), &conv.b);
    let w_eff = match lora.and_then(|s| s.get(name)) {
        Some(ad) => adapted_weight_g(g, w, conv.w.shape(), name, ad, bind),
        None => w,
    };
    g.conv2d(x, w_eff, Some(b), conv.stride, conv.pad)
}

fn linear_lora_g(
    g: &mut Graph,
    x: NodeId,
    lin: &Linear,
    name: &str,
    lora: Option<&LoraSet>,
    bind: &mut Binder,
) -> NodeId {
    let w = bind(g, &format!("{name}.w"), &lin.w);
    let b = bind(g, &format!("{name}.b"), &lin.b);
    let w_eff = match lora.and_then(|s| s.get(name)) {
        Some(ad) => adapted_weight_g(g, w, lin.w.shape(), name, ad, bind),
        None => w,
    };
    g.linear(x, w_eff, b)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: 48,
            iters: 2500,
            batch: 4,
            lr: 1e-3,
        }
    }
}

/// Small UNet epsilon predictor with a frozen base after pretraining.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub channels: usize,
    pub frozen: bool,
    null_token: Tensor,
    mlp1: Linear,
    mlp2: Linear,
    conv_in: Conv2d,
    rb1: ResBlock,
    down: Conv2d,
    rb2: ResBlock,
    rb_mid: ResBlock,
    up_conv: Conv2d,
    fuse: Conv2d,
    rb3: ResBlock,
    conv_out: Conv2d,
    forward_count: Arc<AtomicU64>,
}

impl DenoiserModel {
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "denoiser.init", 0);
        let c = channels;
        DenoiserModel {
            channels: c,
            frozen: false,
            null_token: Tensor::randn(vec![TEMB_DIM], 0.02, &mut rng),
            mlp1: Linear::init(TEMB_DIM, TEMB_DIM, &mut rng),
            mlp2: Linear::init(TEMB_DIM, TEMB_DIM, &mut rng),
            conv_in: Conv2d::init(LATENT_CHANNELS, c, 3, 1, 1, &mut rng),
            rb1: ResBlock::init(c, &mut rng),
            down: Conv2d::init(c, 2 * c, 3, 2, 1, &mut rng),
            rb2: ResBlock::init(2 * c, &mut rng),
            rb_mid: ResBlock::init(2 * c, &mut rng),
            up_conv: Conv2d::init(2 * c, c, 3, 1, 1, &mut rng),
            fuse: Conv2d::init(2 * c, c, 3, 1, 1, &mut rng),
            rb3: ResBlock::init(c, &mut rng),
            conv_out: Conv2d::zeros(c, LATENT_CHANNELS, 3, 1, 1),
            forward_count: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Epsilon prediction on the tape; conditioning is the learned null token.
    pub fn forward_g(
        &self,
        g: &mut Graph,
        z: NodeId,
        t: usize,
        lora: Option<&LoraSet>,
        bind: &mut Binder,
    ) -> NodeId {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let emb = g.constant_owned(timestep_embedding(t, TEMB_DIM));
        let null = bind(g, "unet.cond.null", &self.null_token);
        let e = g.add(emb, null);
        let mut temb = linear_lora_g(g, e, &self.mlp1, "unet.mlp1", lora, bind);
        temb = g.silu(temb);
        temb = linear_lora_g(g, temb, &self.mlp2, "unet.mlp2", lora, bind);

        let x0 = conv_lora_g(g, z, &self.conv_in, "unet.conv_in", lora, bind);
        let r1 = self.rb1.forward_g(g, x0, temb, "unet.rb1", lora, bind);
        let mut d = conv_lora_g(g, r1, &self.down, "unet.down", lora, bind);
        d = g.silu(d);
        let r2 = self.rb2.forward_g(g, d, temb, "unet.rb2", lora, bind);
        let m = self.rb_mid.forward_g(g, r2, temb, "unet.mid", lora, bind);
        let mut u = g.upsample2(m);
        u = conv_lora_g(g, u, &self.up_conv, "unet.up", lora, bind);
        u = g.silu(u);
        let cat = g.concat_ch(u, r1);
        let mut f = conv_lora_g(g, cat, &self.fuse, "unet.fuse", lora, bind);
        f = g.silu(f);
        let r3 = self.rb3.forward_g(g, f, temb, "unet.rb3", lora, bind);
        conv_lora_g(g, r3, &self.conv_out, "unet.conv_out", lora, bind)
    }

    /// Frozen-weight prediction, optionally through adapters.
    pub fn predict(&self, z: &Tensor, t: usize, lora: Option<&LoraSet>) -> Result<Tensor> {
        let (c, h, w) = z.dim3();
        if c != LATENT_CHANNELS {
            return Err(Error::shape(format!("{LATENT_CHANNELS} channels"), format!("{c} channels")));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArg(format!("latent dims {h}x{w} must be even")));
        }
        let mut g = Graph::new();
        let zn = g.constant(z);
        let out = self.forward_g(&mut g, zn, t, lora, &mut const_binder);
        Ok(g.val(out).clone())
    }

    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    /// Names of every conv and projection layer, in forward order.
    pub fn adaptable_layers(&self) -> Vec<(String, usize, usize)> {
        // (name, in_features, out_features) where in_features flattens conv kernels
        let conv_dims = |c: &Conv2d| {
            let s = c.w.shape();
            (s[1] * s[2] * s[3], s[0])
        };
        let lin_dims = |l: &Linear| {
            let s = l.w.shape();
            (s[1], s[0])
        };
        let mut out = Vec::new();
        let mut push_conv = |name: &str, c: &Conv2d| {
            let (i, o) = conv_dims(c);
            out.push((name.to_string(), i, o));
        };
        push_conv("unet.conv_in", &self.conv_in);
        push_conv("unet.rb1.conv1", &self.rb1.conv1);
        push_conv("unet.rb1.conv2", &self.rb1.conv2);
        push_conv("unet.down", &self.down);
        push_conv("unet.rb2.conv1", &self.rb2.conv1);
        push_conv("unet.rb2.conv2", &self.rb2.conv2);
        push_conv("unet.mid.conv1", &self.rb_mid.conv1);
        push_conv("unet.mid.conv2", &self.rb_mid.conv2);
        push_conv("unet.up", &self.up_conv);
        push_conv("unet.fuse", &self.fuse);
        push_conv("unet.rb3.conv1", &self.rb3.conv1);
        push_conv("unet.rb3.conv2", &self.rb3.conv2);
        push_conv("unet.conv_out", &self.conv_out);
        for (name, l) in [
            ("unet.mlp1", &self.mlp1),
            ("unet.mlp2", &self.mlp2),
            ("unet.rb1.tproj", &self.rb1.tproj),
            ("unet.rb2.tproj", &self.rb2.tproj),
            ("unet.mid.tproj", &self.rb_mid.tproj),
            ("unet.rb3.tproj", &self.rb3.tproj),
        ] {
            let (i, o) = lin_dims(l);
            out.push((name.to_string(), i, o));
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("unet.cond.null".to_string(), &self.null_token));
        self.mlp1.push_params("unet.mlp1", &mut out);
        self.mlp2.push_params("unet.mlp2", &mut out);
        self.conv_in.push_params("unet.conv_in", &mut out);
        self.rb1.push_params("unet.rb1", &mut out);
        self.down.push_params("unet.down", &mut out);
        self.rb2.push_params("unet.rb2", &mut out);
        self.rb_mid.push_params("unet.mid", &mut out);
        self.up_conv.push_params("unet.up", &mut out);
        self.fuse.push_params("unet.fuse", &mut out);
        self.rb3.push_params("unet.rb3", &mut out);
        self.conv_out.push_params("unet.conv_out", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("unet.cond.null".to_string(), &mut self.null_token));
        self.mlp1.push_params_mut("unet.mlp1", &mut out);
        self.mlp2.push_params_mut("unet.mlp2", &mut out);
        self.conv_in.push_params_mut("unet.conv_in", &mut out);
        self.rb1.push_params_mut("unet.rb1", &mut out);
        self.down.push_params_mut("unet.down", &mut out);
        self.rb2.push_params_mut("unet.rb2", &mut out);
        self.rb_mid.push_params_mut("unet.mid", &mut out);
        self.up_conv.push_params_mut("unet.up", &mut out);
        self.fuse.push_params_mut("unet.fuse", &mut out);
        self.rb3.push_params_mut("unet.rb3", &mut out);
        self.conv_out.push_params_mut("unet.conv_out", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn weights_hash(&self) -> String {
        let params = self.named_params();
        hash_weights(params.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("denoiser");
        c.meta = serde_json::json!({
            "channels": self.channels,
            "temb_dim": TEMB_DIM,
            "latent_channels": LATENT_CHANNELS,
        });
        for (name, t) in self.named_params() {
            c.insert(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "denoiser" {
            return Err(Error::Checkpoint(format!(
                "expected denoiser checkpoint, got {:?}",
                c.kind
            )));
        }
        let channels = c.meta_u64("channels")? as usize;
        let mut model = DenoiserModel::init(channels, 0);
        crate::nn::params_from_container(model.named_params_mut(), c)?;
        model.frozen = true;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        DenoiserModel::from_container(&Container::load(path)?)
    }
}

// ---------------------------------------------------------------------------
// LoRA injection / merging

/// Creates zero-impact adapters for every conv and projection layer.
pub fn inject_lora(model: &DenoiserModel, rank: usize, alpha: f32, seed: u64) -> Result<LoraSet> {
    if rank == 0 {
        return Err(Error::InvalidArg("lora rank must be positive".into()));
    }
    let mut set = LoraSet::default();
    for (i, (name, in_f, out_f)) in model.adaptable_layers().into_iter().enumerate() {
        let ad = LoraAdapter::init(in_f, out_f, rank, alpha, seeds::derive(seed, &name, i as u64));
        set.adapters.insert(name, ad);
    }
    Ok(set)
}

/// Folds adapters into flat weights: W += (alpha/r) B A. Layers without an
/// adapter are copied unchanged, so merging an empty set is the identity.
pub fn merge_lora(model: &DenoiserModel, lora: &LoraSet) -> DenoiserModel {
    let mut merged = model.clone();
    merged.forward_count = Arc::new(AtomicU64::new(0));
    let mut params = merged.named_params_mut();
    for (layer, ad) in &lora.adapters {
        let wname = format!("{layer}.w");
        if let Some((_, w)) = params.iter_mut().find(|(n, _)| *n == wname) {
            let delta = ad.delta_matrix();
            let wd = w.data_mut();
            for (x, d) in wd.iter_mut().zip(delta.data()) {
                *x += *d;
            }
        }
    }
    merged
}

// ---------------------------------------------------------------------------
// One-step denoising

/// Epsilon predictor abstraction so oracles can stand in for the UNet.
pub trait EpsPredictor {
    fn predict_eps(&self, z: &Tensor, t: usize) -> Result<Tensor>;
}

impl EpsPredictor for DenoiserModel {
    fn predict_eps(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        self.predict(z, t, None)
    }
}

/// Base model plus adapters, predicting through the adapted weights.
pub struct AdaptedDenoiser<'a> {
    pub base: &'a DenoiserModel,
    pub lora: &'a LoraSet,
}

impl EpsPredictor for AdaptedDenoiser<'_> {
    fn predict_eps(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        self.base.predict(z, t, Some(self.lora))
    }
}

/// Single-forward clean-latent estimate at a fixed timestep.
pub fn one_step_denoise(
    pred: &dyn EpsPredictor,
    z: &Tensor,
    t_fix: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar_at(t_fix)? as f64;
    let eps = pred.predict_eps(z, t_fix)?;
    let inv = 1.0 / ab.sqrt();
    let k = ((1.0 - ab).sqrt() * inv) as f32;
    Ok(z.scale(inv as f32).sub(&eps.scale(k)))
}

/// Tape version given a predicted-epsilon node.
pub fn one_step_denoise_g(
    g: &mut Graph,
    z: NodeId,
    eps: NodeId,
    t_fix: usize,
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    let ab = schedule.alpha_bar_at(t_fix)? as f64;
    let inv = 1.0 / ab.sqrt();
    let k = ((1.0 - ab).sqrt() * inv) as f32;
    let zs = g.mul_scalar(z, inv as f32);
    let es = g.mul_scalar(eps, k);
    Ok(g.sub(zs, es))
}

// ---------------------------------------------------------------------------
// Pretraining

/// Encodes every image to posterior moments through the frozen VAE.
pub fn encode_moments(vae: &AutoencoderModel, images: &[Image]) -> Result<Vec<Moments>> {
    images
        .iter()
        .map(|img| split_moments(&vae.encode_manifold(img)?))
        .collect()
}

/// Trains the epsilon predictor on latents of HQ images; returns the frozen
/// base model and the loss curve.
pub fn pretrain_denoiser(
    vae: &AutoencoderModel,
    images: &[Image],
    schedule: &NoiseSchedule,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<(DenoiserModel, Vec<(usize, f64)>)> {
    if images.len() < 200 {
        return Err(Error::DatasetTooSmall {
            needed: 200,
            got: images.len(),
        });
    }
    let moments = encode_moments(vae, images)?;
    let mut model = DenoiserModel::init(cfg.channels, seed);
    let mut opt = AdamW::new(cfg.lr, 1e-2);
    let mut curve = Vec::new();

    for iter in 0..cfg.iters {
        let mut data_rng = seeds::rng(seed, "denoiser.data", iter as u64);
        let picks: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| {
                let idx = rand::Rng::random_range(&mut data_rng, 0..moments.len());
                let t = rand::Rng::random_range(&mut data_rng, 0..schedule.t_steps);
                (idx, t)
            })
            .collect();

        let results: Vec<(f64, Vec<Tensor>)> = picks
            .par_iter()
            .enumerate()
            .map(|(bi, &(idx, t))| {
                let draw_seed = seeds::derive(seed, "denoiser.draw", (iter * 1024 + bi) as u64);
                let z0 = sample_latent(&moments[idx], draw_seed, false);
                let mut eps_rng = seeds::rng(draw_seed, "denoiser.eps", 0);
                let eps = Tensor::randn(z0.shape().to_vec(), 1.0, &mut eps_rng);
                let ab = schedule.alpha_bar[t] as f64;
                let zt = z0.scale(ab.sqrt() as f32).add(&eps.scale((1.0 - ab).sqrt() as f32));
                denoiser_step(&model, &zt, &eps, t)
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut grad_acc: Option<Vec<Tensor>> = None;
        for (loss, grads) in results {
            loss_sum += loss;
            match &mut grad_acc {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        let ad = a.data_mut();
                        for (x, y) in ad.iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
                slot => *slot = Some(grads),
            }
        }
        let loss = loss_sum / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                context: "denoiser pretraining".into(),
            });
        }
        let inv = 1.0 / cfg.batch as f32;
        let mut grads = grad_acc.expect("non-empty batch");
        for gt in &mut grads {
            *gt = gt.scale(inv);
        }
        let mut params = model.named_params_mut();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        opt.step(&mut refs, &grads);
        if iter % 25 == 0 || iter + 1 == cfg.iters {
            curve.push((iter, loss));
        }
    }
    model.frozen = true;
    Ok((model, curve))
}

fn denoiser_step(model: &DenoiserModel, zt: &Tensor, eps: &Tensor, t: usize) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let mut leaf_ids: Vec<NodeId> = Vec::new();
    let mut binder = |g: &mut Graph, _name: &str, t: &Tensor| {
        let id = g.leaf(t);
        leaf_ids.push(id);
        id
    };
    let zn = g.constant(zt);
    let pred = model.forward_g(&mut g, zn, t, None, &mut binder);
    let target = g.constant(eps);
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let loss = g.mean_all(sq);
    let mut grads = g.backward(loss);
    let out = leaf_ids
        .iter()
        .map(|&id| {
            let shape = g.val(id).shape().to_vec();
            grads.take(id, &shape)
        })
        .collect();
    (g.val(loss).data()[0] as f64, out)
}

/// Average epsilon-prediction MSE over a fixed (image, t) validation grid.
pub fn validation_ldm_loss(
    model: &DenoiserModel,
    lora: Option<&LoraSet>,
    moments: &[Moments],
    schedule: &NoiseSchedule,
    ts: &[usize],
    seed: u64,
) -> Result<f64> {
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for (i, m) in moments.iter().enumerate() {
        for (j, &t) in ts.iter().enumerate() {
            let draw_seed = seeds::derive(seed, "denoiser.val", (i * 4096 + j) as u64);
            let z0 = sample_latent(m, draw_seed, false);
            let mut eps_rng = seeds::rng(draw_seed, "denoiser.val.eps", 0);
            let eps = Tensor::randn(z0.shape().to_vec(), 1.0, &mut eps_rng);
            let ab = schedule.alpha_bar[t] as f64;
            let zt = z0.scale(ab.sqrt() as f32).add(&eps.scale((1.0 - ab).sqrt() as f32));
            let pred = model.predict(&zt, t, lora)?;
            let d = pred.sub(&eps);
            acc += d.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d.numel() as f64;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}
