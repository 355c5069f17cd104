//! Toy stand-in for the frozen SD-style VAE: encoder, 1x1 quant-conv
//! producing the 8-channel manifold, diagonal-Gaussian sampling, decoder.
//!
//! The manifold R = QC(E(x)) is the substrate every downstream module
//! (attention, bottleneck, denoiser) operates on. After pretraining the
//! model is frozen; nothing downstream ever mutates its weights.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::{hash_weights, Container};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{const_binder, Binder, Conv2d};
use crate::optim::AdamW;
use crate::seeds;
use crate::tensor::Tensor;

pub const MANIFOLD_CHANNELS: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
pub const LOGVAR_MIN: f32 = -30.0;
pub const LOGVAR_MAX: f32 = 20.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Per-scale channel plan; downsampling factor is 2^(len-1).
    pub channels: Vec<usize>,
    pub iters: usize,
    pub batch: usize,
    pub lr: f32,
    pub kl_weight: f32,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            channels: vec![24, 32, 48],
            iters: 3000,
            batch: 4,
            lr: 1e-3,
            kl_weight: 1e-3,
        }
    }
}

/// Frozen convolutional autoencoder with an 8-channel moments manifold.
#[derive(Clone, Debug)]
pub struct AutoencoderModel {
    pub factor: usize,
    pub frozen: bool,
    channels: Vec<usize>,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    enc_refine: Conv2d,
    enc_out: Conv2d,
    quant: Conv2d,
    post_quant: Conv2d,
    dec_in: Conv2d,
    dec_refine: Conv2d,
    ups: Vec<Conv2d>,
    dec_out: Conv2d,
}

/// Mean / log-variance halves of the manifold.
#[derive(Clone, Debug)]
pub struct Moments {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl AutoencoderModel {
    pub fn init(channels: &[usize], seed: u64) -> Self {
        assert!(channels.len() >= 2, "need at least one downsampling stage");
        let mut rng = seeds::rng(seed, "vae.init", 0);
        let n = channels.len();
        let stem = Conv2d::init(3, channels[0], 3, 1, 1, &mut rng);
        let mut downs = Vec::new();
        for i in 0..n - 1 {
            downs.push(Conv2d::init(channels[i], channels[i + 1], 3, 2, 1, &mut rng));
        }
        let top = channels[n - 1];
        let enc_refine = Conv2d::init(top, top, 3, 1, 1, &mut rng);
        let enc_out = Conv2d::init(top, MANIFOLD_CHANNELS, 3, 1, 1, &mut rng);
        let mut quant = Conv2d::init(MANIFOLD_CHANNELS, MANIFOLD_CHANNELS, 1, 1, 0, &mut rng);
        // start the posterior noise small: bias the log-variance half down
        for c in LATENT_CHANNELS..MANIFOLD_CHANNELS {
            quant.b.data_mut()[c] = -4.0;
        }
        let post_quant = Conv2d::init(LATENT_CHANNELS, LATENT_CHANNELS, 1, 1, 0, &mut rng);
        let dec_in = Conv2d::init(LATENT_CHANNELS, top, 3, 1, 1, &mut rng);
        let dec_refine = Conv2d::init(top, top, 3, 1, 1, &mut rng);
        let mut ups = Vec::new();
        for i in (0..n - 1).rev() {
            ups.push(Conv2d::init(channels[i + 1], channels[i], 3, 1, 1, &mut rng));
        }
        let dec_out = Conv2d::init(channels[0], 3, 3, 1, 1, &mut rng);
        AutoencoderModel {
            factor: 1 << (n - 1),
            frozen: false,
            channels: channels.to_vec(),
            stem,
            downs,
            enc_refine,
            enc_out,
            quant,
            post_quant,
            dec_in,
            dec_refine,
            ups,
            dec_out,
        }
    }

    // -- graph forwards ----------------------------------------------------

    /// Encoder + quant-conv on the tape: image tensor node -> 8-channel manifold node.
    pub fn encode_g(&self, g: &mut Graph, x: NodeId, bind: &mut Binder) -> NodeId {
        let mut h = self.stem.forward_g(g, x, "enc.stem", bind);
        h = g.silu(h);
        for (i, d) in self.downs.iter().enumerate() {
            h = d.forward_g(g, h, &format!("enc.down{i}"), bind);
            h = g.silu(h);
        }
        h = self.enc_refine.forward_g(g, h, "enc.refine", bind);
        h = g.silu(h);
        h = self.enc_out.forward_g(g, h, "enc.out", bind);
        self.quant.forward_g(g, h, "enc.quant", bind)
    }

    /// Decoder on the tape: 4-channel latent node -> image tensor node in (0,1).
    pub fn decode_g(&self, g: &mut Graph, z: NodeId, bind: &mut Binder) -> NodeId {
        let mut h = self.post_quant.forward_g(g, z, "dec.post_quant", bind);
        h = self.dec_in.forward_g(g, h, "dec.in", bind);
        h = g.silu(h);
        h = self.dec_refine.forward_g(g, h, "dec.refine", bind);
        h = g.silu(h);
        for (i, u) in self.ups.iter().enumerate() {
            h = g.upsample2(h);
            h = u.forward_g(g, h, &format!("dec.up{i}"), bind);
            h = g.silu(h);
        }
        h = self.dec_out.forward_g(g, h, "dec.out", bind);
        g.sigmoid(h)
    }

    // -- frozen inference ----------------------------------------------------

    /// R = QC(E(img)): the 8-channel manifold.
    pub fn encode_manifold(&self, img: &Image) -> Result<Tensor> {
        if img.channels() != 3 {
            return Err(Error::shape("3-channel image", format!("{} channels", img.channels())));
        }
        if img.height() % self.factor != 0 || img.width() % self.factor != 0 {
            return Err(Error::InvalidArg(format!(
                "image {}x{} not divisible by downsampling factor {}",
                img.height(),
                img.width(),
                self.factor
            )));
        }
        let mut g = Graph::new();
        let x = g.constant_owned(img.to_tensor());
        let r = self.encode_g(&mut g, x, &mut const_binder);
        Ok(g.val(r).clone())
    }

    /// D(z): latent to image.
    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        let (c, _, _) = z.dim3();
        if c != LATENT_CHANNELS {
            return Err(Error::shape(format!("{LATENT_CHANNELS} channels"), format!("{c} channels")));
        }
        let mut g = Graph::new();
        let zn = g.constant(z);
        let out = self.decode_g(&mut g, zn, &mut const_binder);
        Image::from_tensor(g.val(out))
    }

    // -- parameters ----------------------------------------------------------

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.stem.push_params("enc.stem", &mut out);
        for (i, d) in self.downs.iter().enumerate() {
            d.push_params(&format!("enc.down{i}"), &mut out);
        }
        self.enc_refine.push_params("enc.refine", &mut out);
        self.enc_out.push_params("enc.out", &mut out);
        self.quant.push_params("enc.quant", &mut out);
        self.post_quant.push_params("dec.post_quant", &mut out);
        self.dec_in.push_params("dec.in", &mut out);
        self.dec_refine.push_params("dec.refine", &mut out);
        for (i, u) in self.ups.iter().enumerate() {
            u.push_params(&format!("dec.up{i}"), &mut out);
        }
        self.dec_out.push_params("dec.out", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.stem.push_params_mut("enc.stem", &mut out);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.push_params_mut(&format!("enc.down{i}"), &mut out);
        }
        self.enc_refine.push_params_mut("enc.refine", &mut out);
        self.enc_out.push_params_mut("enc.out", &mut out);
        self.quant.push_params_mut("enc.quant", &mut out);
        self.post_quant.push_params_mut("dec.post_quant", &mut out);
        self.dec_in.push_params_mut("dec.in", &mut out);
        self.dec_refine.push_params_mut("dec.refine", &mut out);
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.push_params_mut(&format!("dec.up{i}"), &mut out);
        }
        self.dec_out.push_params_mut("dec.out", &mut out);
        out
    }

    pub fn weights_hash(&self) -> String {
        let params = self.named_params();
        hash_weights(params.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    // -- checkpoint ------------------------------------------------------------

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("vae");
        c.meta = serde_json::json!({
            "factor": self.factor,
            "channels": self.channels,
            "manifold_channels": MANIFOLD_CHANNELS,
            "latent_channels": LATENT_CHANNELS,
        });
        for (name, t) in self.named_params() {
            c.insert(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "vae" {
            return Err(Error::Checkpoint(format!("expected vae checkpoint, got {:?}", c.kind)));
        }
        let channels: Vec<usize> = c
            .meta
            .get("channels")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::Checkpoint("missing channels meta".into()))?;
        let mut model = AutoencoderModel::init(&channels, 0);
        crate::nn::params_from_container(model.named_params_mut(), c)?;
        model.frozen = true;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        AutoencoderModel::from_container(&Container::load(path)?)
    }
}

/// Splits the 8-channel manifold into mean (0-3) and clamped log-variance (4-7).
pub fn split_moments(z8: &Tensor) -> Result<Moments> {
    let (c, h, w) = z8.dim3();
    if c != MANIFOLD_CHANNELS {
        return Err(Error::shape(format!("{MANIFOLD_CHANNELS} channels"), format!("{c} channels")));
    }
    let hw = h * w;
    let mean = Tensor::new(
        vec![LATENT_CHANNELS, h, w],
        z8.data()[..LATENT_CHANNELS * hw].to_vec(),
    );
    let logvar = Tensor::new(
        vec![LATENT_CHANNELS, h, w],
        z8.data()[LATENT_CHANNELS * hw..]
            .iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect(),
    );
    Ok(Moments { mean, logvar })
}

/// mean + exp(logvar/2) * eps, or exactly the mean when deterministic.
pub fn sample_latent(m: &Moments, seed: u64, deterministic: bool) -> Tensor {
    if deterministic {
        return m.mean.clone();
    }
    let mut rng = seeds::rng(seed, "vae.sample", 0);
    let mut out = m.mean.clone();
    for (o, lv) in out.data_mut().iter_mut().zip(m.logvar.data()) {
        let e: f32 = StandardNormal.sample(&mut rng);
        *o += (lv * 0.5).exp() * e;
    }
    out
}

/// Training curve entry: (iteration, reconstruction MSE, KL term).
pub type CurvePoint = (usize, f64, f64);

/// Trains the autoencoder on HQ images with MSE + small-KL regularization;
/// the returned model is frozen.
pub fn pretrain_autoencoder(
    images: &[Image],
    cfg: &VaeConfig,
    seed: u64,
) -> Result<(AutoencoderModel, Vec<CurvePoint>)> {
    if images.len() < 200 {
        return Err(Error::DatasetTooSmall {
            needed: 200,
            got: images.len(),
        });
    }
    let mut model = AutoencoderModel::init(&cfg.channels, seed);
    let mut opt = AdamW::new(cfg.lr, 1e-2);
    let mut curve = Vec::new();

    let tensors: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    for iter in 0..cfg.iters {
        let mut data_rng = seeds::rng(seed, "vae.data", iter as u64);
        let picks: Vec<usize> = (0..cfg.batch)
            .map(|_| rand::Rng::random_range(&mut data_rng, 0..tensors.len()))
            .collect();

        let results: Vec<(f64, f64, Vec<Tensor>)> = picks
            .par_iter()
            .enumerate()
            .map(|(bi, &idx)| {
                vae_step(&model, &tensors[idx], cfg, seed, iter, bi)
            })
            .collect();

        let mut recon_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut grad_acc: Option<Vec<Tensor>> = None;
        for (recon, kl, grads) in results {
            recon_sum += recon;
            kl_sum += kl;
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
        let inv = 1.0 / cfg.batch as f32;
        let mut grads = grad_acc.expect("batch is non-empty");
        for gt in &mut grads {
            *gt = gt.scale(inv);
        }
        let recon = recon_sum / cfg.batch as f64;
        let kl = kl_sum / cfg.batch as f64;
        if !recon.is_finite() || !kl.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                context: "vae pretraining".into(),
            });
        }
        let mut params = model.named_params_mut();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        opt.step(&mut refs, &grads);
        if iter % 25 == 0 || iter + 1 == cfg.iters {
            curve.push((iter, recon, kl));
        }
    }
    model.frozen = true;
    Ok((model, curve))
}

fn vae_step(
    model: &AutoencoderModel,
    x: &Tensor,
    cfg: &VaeConfig,
    seed: u64,
    iter: usize,
    batch_index: usize,
) -> (f64, f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let mut leaf_ids: Vec<NodeId> = Vec::new();
    let mut binder = |g: &mut Graph, _name: &str, t: &Tensor| {
        let id = g.leaf(t);
        leaf_ids.push(id);
        id
    };
    let xin = g.constant(x);
    let r = model.encode_g(&mut g, xin, &mut binder);
    let (_, h, w) = g.val(r).dim3();
    let mean = g.slice_ch(r, 0, LATENT_CHANNELS);
    let logvar_raw = g.slice_ch(r, LATENT_CHANNELS, MANIFOLD_CHANNELS);
    let lv_lo = g.clamp_min(logvar_raw, LOGVAR_MIN);
    let logvar = g.clamp_max(lv_lo, LOGVAR_MAX);

    // reparameterized sample
    let eps_seed = seeds::derive(seed, "vae.eps", (iter * 1024 + batch_index) as u64);
    let mut eps_rng = seeds::rng(eps_seed, "vae.eps.draw", 0);
    let eps = Tensor::randn(vec![LATENT_CHANNELS, h, w], 1.0, &mut eps_rng);
    let epsn = g.constant_owned(eps);
    let half_lv = g.mul_scalar(logvar, 0.5);
    let std = g.exp(half_lv);
    let noise = g.mul(std, epsn);
    let z = g.add(mean, noise);

    let xhat = model.decode_g(&mut g, z, &mut binder);
    let diff = g.sub(xhat, xin);
    let sq = g.square(diff);
    let recon = g.mean_all(sq);

    // KL(q || N(0,1)) per element, averaged
    let mean_sq = g.square(mean);
    let ev = g.exp(logvar);
    let t1 = g.add_scalar(logvar, 1.0);
    let t2 = g.sub(t1, mean_sq);
    let t3 = g.sub(t2, ev);
    let klm = g.mean_all(t3);
    let kl = g.mul_scalar(klm, -0.5);

    let klw = g.mul_scalar(kl, cfg.kl_weight);
    let loss = g.add(recon, klw);

    let mut grads = g.backward(loss);
    let out: Vec<Tensor> = leaf_ids
        .iter()
        .map(|&id| {
            let shape = g.val(id).shape().to_vec();
            grads.take(id, &shape)
        })
        .collect();
    (
        g.val(recon).data()[0] as f64,
        g.val(kl).data()[0] as f64,
        out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata;

    fn tiny_model() -> AutoencoderModel {
        AutoencoderModel::init(&[8, 12, 16], 3)
    }

    #[test]
    fn encode_shape_contract() {
        let model = tiny_model();
        let img = toydata::generate_face(32, 1, 0);
        let r = model.encode_manifold(&img).unwrap();
        assert_eq!(r.shape(), &[8, 8, 8]);
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let model = tiny_model();
        let img = Image::constant(30, 30, 3, 0.5).unwrap();
        assert!(model.encode_manifold(&img).is_err());
    }

    #[test]
    fn encode_deterministic() {
        let model = tiny_model();
        let img = toydata::generate_face(32, 1, 1);
        let a = model.encode_manifold(&img).unwrap();
        let b = model.encode_manifold(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_moments_contract() {
        let z = Tensor::zeros(vec![8, 2, 2]);
        let m = split_moments(&z).unwrap();
        assert!(m.mean.data().iter().all(|&v| v == 0.0));
        assert!(m.logvar.data().iter().all(|&v| v == 0.0));

        let mut big = Tensor::zeros(vec![8, 2, 2]);
        for v in &mut big.data_mut()[4 * 4..] {
            *v = 100.0;
        }
        let m = split_moments(&big).unwrap();
        assert!(m.logvar.data().iter().all(|&v| v == LOGVAR_MAX));

        assert!(split_moments(&Tensor::zeros(vec![7, 2, 2])).is_err());
    }

    #[test]
    fn split_roundtrips_inside_clamp_range() {
        let mut rng = seeds::rng(1, "t", 0);
        let z = Tensor::randn(vec![8, 3, 3], 2.0, &mut rng);
        let m = split_moments(&z).unwrap();
        let hw = 9;
        for c in 0..4 {
            for p in 0..hw {
                assert_eq!(m.mean.data()[c * hw + p], z.data()[c * hw + p]);
                assert_eq!(m.logvar.data()[c * hw + p], z.data()[(c + 4) * hw + p]);
            }
        }
    }

    #[test]
    fn sample_latent_deterministic_and_vanishing_std() {
        let mut rng = seeds::rng(2, "t", 0);
        let mean = Tensor::randn(vec![4, 2, 2], 1.0, &mut rng);
        let m = Moments {
            mean: mean.clone(),
            logvar: Tensor::full(vec![4, 2, 2], LOGVAR_MIN),
        };
        assert_eq!(sample_latent(&m, 5, true), mean);
        let s = sample_latent(&m, 5, false);
        for (a, b) in s.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_latent_unit_std_statistics() {
        let m = Moments {
            mean: Tensor::zeros(vec![4, 50, 50]),
            logvar: Tensor::zeros(vec![4, 50, 50]),
        };
        // 10^4 elements per draw x 10 draws = 1e5 samples
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for s in 0..10u64 {
            let z = sample_latent(&m, s, false);
            for &v in z.data() {
                acc += (v as f64) * (v as f64);
                n += 1;
            }
        }
        let std = (acc / n as f64).sqrt();
        assert!((std - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn decode_total_on_zero_latent() {
        let model = tiny_model();
        let z = Tensor::zeros(vec![4, 8, 8]);
        let img = model.decode(&z).unwrap();
        assert_eq!((img.height(), img.width()), (32, 32));
        assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn decode_rejects_wrong_channels() {
        let model = tiny_model();
        assert!(model.decode(&Tensor::zeros(vec![3, 8, 8])).is_err());
    }

    #[test]
    fn pretrain_requires_dataset_size() {
        let imgs = toydata::generate_images(10, 16, 0);
        let cfg = VaeConfig {
            iters: 1,
            ..Default::default()
        };
        assert!(matches!(
            pretrain_autoencoder(&imgs, &cfg, 0),
            Err(Error::DatasetTooSmall { .. })
        ));
    }

    #[test]
    fn pretrain_reduces_loss_and_checkpoint_roundtrips() {
        let imgs = toydata::generate_images(200, 16, 4);
        let cfg = VaeConfig {
            channels: vec![8, 12, 16],
            iters: 60,
            batch: 2,
            lr: 2e-3,
            kl_weight: 1e-3,
        };
        let (model, curve) = pretrain_autoencoder(&imgs, &cfg, 9).unwrap();
        assert!(model.frozen);
        let first = curve.first().unwrap();
        let last = curve.last().unwrap();
        assert!(
            last.1 < first.1,
            "recon did not improve: {} -> {}",
            first.1,
            last.1
        );

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vae.ckpt");
        model.save(&p).unwrap();
        let back = AutoencoderModel::load(&p).unwrap();
        assert_eq!(back.weights_hash(), model.weights_hash());
        let img = toydata::generate_face(16, 4, 0);
        let a = model.encode_manifold(&img).unwrap();
        let b = back.encode_manifold(&img).unwrap();
        assert_eq!(a, b);
        let m = split_moments(&a).unwrap();
        let za = sample_latent(&m, 0, true);
        assert_eq!(model.decode(&za).unwrap(), back.decode(&za).unwrap());
    }
}
