//! Manifold information bottleneck: per-channel normalization statistics,
//! the information filter lambda, stochastic compression, and the
//! closed-form information loss.
//!
//! The loss is the KL divergence between the per-element compressed
//! distribution N(lambda*R + (1-lambda)*mu, (1-lambda)^2 sigma^2) and the
//! manifold prior N(mu, sigma^2); after normalizing by (mu, sigma) it
//! reduces to KL[N(m, s^2) || N(0,1)] with m = lambda*(R-mu)/sigma and
//! s = 1-lambda.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{const_binder, Binder, Conv2d};
use crate::seeds;
use crate::tensor::Tensor;
use crate::vae::{AutoencoderModel, MANIFOLD_CHANNELS};

/// Minimal std floor `o`.
pub const SIGMA_FLOOR: f32 = 0.01;
/// Upper cap keeping log(1-lambda)^2 finite.
pub const LAMBDA_CAP: f32 = 1.0 - 1e-6;

/// Per-channel manifold statistics over a set of HQ manifolds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldStats {
    pub mu_qc: Vec<f32>,
    pub sigma_qc: Vec<f32>,
    pub sample_count: usize,
    /// Hash of the VAE weights that produced the manifolds, so stale stats
    /// are detectable.
    pub vae_weights_hash: String,
}

impl ManifoldStats {
    /// Standard-normal stats, used when the bottleneck is ablated.
    pub fn standard() -> Self {
        ManifoldStats {
            mu_qc: vec![0.0; MANIFOLD_CHANNELS],
            sigma_qc: vec![1.0; MANIFOLD_CHANNELS],
            sample_count: 1,
            vae_weights_hash: String::new(),
        }
    }

    pub fn floored_sigma(&self) -> Vec<f32> {
        self.sigma_qc.iter().map(|&s| s.max(SIGMA_FLOOR)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("stats encode: {e}")))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::Config(format!("stats decode: {e}")))
    }
}

/// 1x1 conv + sigmoid producing the information filter lambda in (0, cap].
#[derive(Clone, Debug)]
pub struct FilterHead {
    pub conv: Conv2d,
}

impl FilterHead {
    /// Zero-initialized: lambda = 0.5 everywhere before training.
    pub fn init() -> Self {
        FilterHead {
            conv: Conv2d::zeros(MANIFOLD_CHANNELS, MANIFOLD_CHANNELS, 1, 1, 0),
        }
    }

    pub fn forward_g(&self, g: &mut Graph, f_r: NodeId, bind: &mut Binder) -> NodeId {
        let pre = self.conv.forward_g(g, f_r, "filter.conv", bind);
        let sig = g.sigmoid(pre);
        g.clamp_max(sig, LAMBDA_CAP)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.conv.push_params("filter.conv", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.conv.push_params_mut("filter.conv", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

/// Per-channel mean/std over all spatial positions of the given manifolds;
/// std floored at `o`. Result is invariant to input ordering.
pub fn stats_from_manifolds(manifolds: &[Tensor], vae_weights_hash: String) -> Result<ManifoldStats> {
    if manifolds.len() < 2 {
        return Err(Error::DatasetTooSmall {
            needed: 2,
            got: manifolds.len(),
        });
    }
    // per-manifold partial sums, then an order-canonical reduction
    let mut partials: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::with_capacity(manifolds.len());
    for r in manifolds {
        let (c, h, w) = r.dim3();
        if c != MANIFOLD_CHANNELS {
            return Err(Error::shape(
                format!("{MANIFOLD_CHANNELS} channels"),
                format!("{c} channels"),
            ));
        }
        let hw = h * w;
        let mut sums = vec![0.0f64; c];
        let mut sqs = vec![0.0f64; c];
        for ci in 0..c {
            for p in 0..hw {
                let v = r.data()[ci * hw + p] as f64;
                sums[ci] += v;
                sqs[ci] += v * v;
            }
        }
        partials.push((sums, sqs, hw));
    }
    partials.sort_by(|a, b| {
        a.0[0]
            .partial_cmp(&b.0[0])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1[0].partial_cmp(&b.1[0]).unwrap_or(std::cmp::Ordering::Equal))
    });
    let c = MANIFOLD_CHANNELS;
    let mut sums = vec![0.0f64; c];
    let mut sqs = vec![0.0f64; c];
    let mut count = 0usize;
    for (s, q, hw) in partials {
        for ci in 0..c {
            sums[ci] += s[ci];
            sqs[ci] += q[ci];
        }
        count += hw;
    }
    let mut mu = vec![0.0f32; c];
    let mut sigma = vec![0.0f32; c];
    for ci in 0..c {
        let m = sums[ci] / count as f64;
        let var = (sqs[ci] / count as f64 - m * m).max(0.0);
        mu[ci] = m as f32;
        sigma[ci] = (var.sqrt() as f32).max(SIGMA_FLOOR);
    }
    Ok(ManifoldStats {
        mu_qc: mu,
        sigma_qc: sigma,
        sample_count: manifolds.len(),
        vae_weights_hash,
    })
}

/// Stats over the first `n` HQ images encoded through the frozen VAE.
pub fn compute_manifold_stats(
    model: &AutoencoderModel,
    images: &[Image],
    n: usize,
) -> Result<ManifoldStats> {
    let n = n.min(images.len());
    if n < 2 {
        return Err(Error::DatasetTooSmall { needed: 2, got: n });
    }
    let manifolds: Vec<Tensor> = images[..n]
        .iter()
        .map(|img| model.encode_manifold(img))
        .collect::<Result<_>>()?;
    stats_from_manifolds(&manifolds, model.weights_hash())
}

/// (R - mu) / max(sigma, o) with per-channel broadcast.
pub fn normalize(r: &Tensor, stats: &ManifoldStats) -> Result<Tensor> {
    let (c, h, w) = r.dim3();
    if c != stats.mu_qc.len() {
        return Err(Error::shape(format!("{} channels", stats.mu_qc.len()), format!("{c} channels")));
    }
    let sigma = stats.floored_sigma();
    let hw = h * w;
    let mut out = r.clone();
    let d = out.data_mut();
    for ci in 0..c {
        let mu = stats.mu_qc[ci];
        let s = sigma[ci];
        for p in 0..hw {
            d[ci * hw + p] = (d[ci * hw + p] - mu) / s;
        }
    }
    Ok(out)
}

/// Tape version of [`normalize`] with constant stats.
pub fn normalize_g(g: &mut Graph, r: NodeId, stats: &ManifoldStats) -> NodeId {
    let sigma = stats.floored_sigma();
    let scale: Vec<f32> = sigma.iter().map(|&s| 1.0 / s).collect();
    let shift: Vec<f32> = stats.mu_qc.iter().map(|&m| -m).collect();
    g.affine_ch(r, scale, shift)
}

/// Frozen-weight information filter.
pub fn info_filter(head: &FilterHead, f_r: &Tensor) -> Result<Tensor> {
    let (c, _, _) = f_r.dim3();
    if c != MANIFOLD_CHANNELS {
        return Err(Error::shape(
            format!("{MANIFOLD_CHANNELS} channels"),
            format!("{c} channels"),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(f_r);
    let l = head.forward_g(&mut g, x, &mut const_binder);
    Ok(g.val(l).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompressMode {
    /// Z = lambda R + (1 - lambda) eps, eps ~ N(mu_QC, sigma_QC^2).
    Train,
    /// Z = lambda R (inherited information only).
    Infer,
}

fn check_lambda(lambda: &Tensor, allow_zero: bool) -> Result<()> {
    let lo_ok = |v: f32| if allow_zero { v >= 0.0 } else { v > 0.0 };
    if lambda.data().iter().any(|&v| !lo_ok(v) || v > 1.0) {
        return Err(Error::InvalidArg("lambda outside (0,1]".into()));
    }
    Ok(())
}

/// Per-channel prior noise draw for train-mode compression.
pub fn prior_noise(shape: (usize, usize, usize), stats: &ManifoldStats, seed: u64) -> Tensor {
    let (c, h, w) = shape;
    let sigma = stats.floored_sigma();
    let mut rng = seeds::rng(seed, "mib.noise", 0);
    let mut t = Tensor::randn(vec![c, h, w], 1.0, &mut rng);
    let hw = h * w;
    let d = t.data_mut();
    for ci in 0..c {
        for p in 0..hw {
            d[ci * hw + p] = d[ci * hw + p] * sigma[ci] + stats.mu_qc[ci];
        }
    }
    t
}

/// Stochastic (train) or deterministic (infer) manifold compression.
pub fn compress(
    r: &Tensor,
    lambda: &Tensor,
    stats: &ManifoldStats,
    mode: CompressMode,
    seed: u64,
) -> Result<Tensor> {
    if r.shape() != lambda.shape() {
        return Err(Error::shape(
            format!("{:?}", r.shape()),
            format!("{:?}", lambda.shape()),
        ));
    }
    check_lambda(lambda, false)?;
    match mode {
        CompressMode::Infer => Ok(r.mul(lambda)),
        CompressMode::Train => {
            let eps = prior_noise(r.dim3(), stats, seed);
            let mut out = r.mul(lambda);
            let od = out.data_mut();
            for i in 0..od.len() {
                od[i] += (1.0 - lambda.data()[i]) * eps.data()[i];
            }
            Ok(out)
        }
    }
}

/// Tape version of compression. Train mode takes the pre-drawn noise tensor.
pub fn compress_g(g: &mut Graph, r: NodeId, lambda: NodeId, noise: Option<&Tensor>) -> NodeId {
    let inherited = g.mul(lambda, r);
    match noise {
        None => inherited,
        Some(eps) => {
            let en = g.constant(eps);
            let neg = g.mul_scalar(lambda, -1.0);
            let one_minus = g.add_scalar(neg, 1.0);
            let replaced = g.mul(one_minus, en);
            g.add(inherited, replaced)
        }
    }
}

/// Closed-form information loss, elementwise mean of
/// -1/2 [ log(1-l)^2 - (1-l)^2 - (l (R-mu)/sigma)^2 + 1 ].
pub fn info_loss(r: &Tensor, lambda: &Tensor, stats: &ManifoldStats) -> Result<f64> {
    if r.shape() != lambda.shape() {
        return Err(Error::shape(
            format!("{:?}", r.shape()),
            format!("{:?}", lambda.shape()),
        ));
    }
    check_lambda(lambda, true)?;
    if lambda.data().iter().any(|&v| v > LAMBDA_CAP) {
        return Err(Error::InvalidArg(format!(
            "lambda above cap {LAMBDA_CAP}; the filter head enforces this"
        )));
    }
    let (c, h, w) = r.dim3();
    let sigma = stats.floored_sigma();
    let hw = h * w;
    let mut acc = 0.0f64;
    for ci in 0..c {
        let mu = stats.mu_qc[ci] as f64;
        let s = sigma[ci] as f64;
        for p in 0..hw {
            let i = ci * hw + p;
            let l = lambda.data()[i] as f64;
            let m = l * ((r.data()[i] as f64 - mu) / s);
            let u = 1.0 - l;
            acc += -0.5 * ((u * u).ln() - u * u - m * m + 1.0);
        }
    }
    Ok(acc / (c * hw) as f64)
}

/// KL[N(m, s^2) || N(0,1)] = -1/2 [ log(s^2) - s^2 - m^2 + 1 ].
pub fn kl_gauss_vs_std(m: f64, s: f64) -> f64 {
    -0.5 * ((s * s).ln() - s * s - m * m + 1.0)
}

/// Tape version of the information loss; `normalized` is (R-mu)/sigma.
pub fn info_loss_g(g: &mut Graph, normalized: NodeId, lambda: NodeId) -> NodeId {
    let m = g.mul(lambda, normalized);
    let m2 = g.square(m);
    let negl = g.mul_scalar(lambda, -1.0);
    let u = g.add_scalar(negl, 1.0);
    let u2 = g.square(u);
    let lnu = g.ln(u);
    let log_u2 = g.mul_scalar(lnu, 2.0);
    // 0.5 * (u^2 + m^2 - log(u^2) - 1)
    let s1 = g.add(u2, m2);
    let s2 = g.sub(s1, log_u2);
    let s3 = g.add_scalar(s2, -1.0);
    let half = g.mul_scalar(s3, 0.5);
    g.mean_all(half)
}
