//! Data-level training objectives: MSE, a 5-tap perceptual distance over a
//! frozen seeded conv pyramid, an LPIPS-style channel-normalized feature
//! distance, and their weighted combination with the information loss.
//!
//! The pyramid is bias-free with ReLU taps, so features are positively
//! homogeneous and the channel normalization in the LPIPS-style term cancels
//! uniform weight scaling exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{const_binder, Binder, Conv2d};
use crate::seeds;
use crate::tensor::Tensor;

pub const PERCEPTUAL_STAGES: usize = 5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f32,
    pub lambda_lpips: f32,
    pub vgg_layer_weights: [f32; PERCEPTUAL_STAGES],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 20.0,
            lambda_lpips: 2.0,
            vgg_layer_weights: [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.lambda_lpips < 0.0 || self.vgg_layer_weights.iter().any(|&w| w < 0.0)
        {
            return Err(Error::InvalidArg("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Frozen 5-stage feature pyramid; stage taps follow each stride-2 block.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    convs: Vec<Conv2d>,
}

impl PerceptualNet {
    pub fn init(seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "perceptual.init", 0);
        let plan = [3usize, 8, 16, 24, 32, 32];
        let convs = (0..PERCEPTUAL_STAGES)
            .map(|i| {
                let mut c = Conv2d::init(plan[i], plan[i + 1], 3, 2, 1, &mut rng);
                c.b = Tensor::zeros(vec![plan[i + 1]]); // bias-free taps
                c
            })
            .collect();
        PerceptualNet { convs }
    }

    /// Uniformly scaled copy (test helper for the normalization invariance).
    pub fn scaled(&self, s: f32) -> Self {
        PerceptualNet {
            convs: self
                .convs
                .iter()
                .map(|c| Conv2d {
                    w: c.w.scale(s),
                    b: c.b.clone(),
                    stride: c.stride,
                    pad: c.pad,
                })
                .collect(),
        }
    }

    pub fn features_g(&self, g: &mut Graph, x: NodeId, bind: &mut Binder) -> Vec<NodeId> {
        let mut taps = Vec::with_capacity(PERCEPTUAL_STAGES);
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward_g(g, h, &format!("perc.s{i}"), bind);
            h = g.relu(h);
            taps.push(h);
        }
        taps
    }

    pub fn weights_hash(&self) -> String {
        let mut named = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.push_params(&format!("perc.s{i}"), &mut named);
        }
        crate::checkpoint::hash_weights(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }
}

fn check_same_shape(x: &Image, y: &Image) -> Result<()> {
    if (x.height(), x.width(), x.channels()) != (y.height(), y.width(), y.channels()) {
        return Err(Error::shape(
            format!("{}x{}x{}", x.height(), x.width(), x.channels()),
            format!("{}x{}x{}", y.height(), y.width(), y.channels()),
        ));
    }
    Ok(())
}

/// Mean squared error over all samples.
pub fn l2_loss(x: &Image, y: &Image) -> Result<f64> {
    check_same_shape(x, y)?;
    crate::imaging::mse(x, y)
}

/// Sum_i w_i ||F_i(x) - F_i(y)||_2 over the five taps (unsquared norms).
pub fn perceptual_loss(net: &PerceptualNet, x: &Image, y: &Image, w: &LossWeights) -> Result<f64> {
    check_same_shape(x, y)?;
    w.validate()?;
    let mut g = Graph::new();
    let xn = g.constant_owned(x.to_tensor());
    let yn = g.constant_owned(y.to_tensor());
    let node = perceptual_loss_g(&mut g, &mut const_binder, net, xn, yn, w);
    Ok(g.val(node).data()[0] as f64)
}

pub fn perceptual_loss_g(
    g: &mut Graph,
    bind: &mut Binder,
    net: &PerceptualNet,
    x: NodeId,
    y: NodeId,
    w: &LossWeights,
) -> NodeId {
    let fx = net.features_g(g, x, bind);
    let fy = net.features_g(g, y, &mut const_binder);
    let mut total: Option<NodeId> = None;
    for i in 0..PERCEPTUAL_STAGES {
        let d = g.sub(fx[i], fy[i]);
        let n = g.l2norm_all(d);
        let term = g.mul_scalar(n, w.vgg_layer_weights[i]);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.expect("at least one stage")
}

/// Mean over stages of channel-normalized squared feature differences.
pub fn lpips_like_loss(net: &PerceptualNet, x: &Image, y: &Image) -> Result<f64> {
    check_same_shape(x, y)?;
    let mut g = Graph::new();
    let xn = g.constant_owned(x.to_tensor());
    let yn = g.constant_owned(y.to_tensor());
    let node = lpips_like_loss_g(&mut g, &mut const_binder, net, xn, yn);
    Ok(g.val(node).data()[0] as f64)
}

fn channel_unit_normalize(g: &mut Graph, f: NodeId) -> NodeId {
    let sq = g.square(f);
    let s = g.sum_ch(sq);
    let se = g.add_scalar(s, 1e-10);
    let n = g.sqrt(se);
    let inv = g.recip(n);
    g.mul_spatial(f, inv)
}

pub fn lpips_like_loss_g(
    g: &mut Graph,
    bind: &mut Binder,
    net: &PerceptualNet,
    x: NodeId,
    y: NodeId,
) -> NodeId {
    let fx = net.features_g(g, x, bind);
    let fy = net.features_g(g, y, &mut const_binder);
    let mut total: Option<NodeId> = None;
    for i in 0..PERCEPTUAL_STAGES {
        let nx = channel_unit_normalize(g, fx[i]);
        let ny = channel_unit_normalize(g, fy[i]);
        let d = g.sub(nx, ny);
        let sq = g.square(d);
        let m = g.mean_all(sq);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    let t = total.expect("at least one stage");
    g.mul_scalar(t, 1.0 / PERCEPTUAL_STAGES as f32)
}

/// L_data = L2 + perceptual + lambda_LPIPS * LPIPS-style.
pub fn data_loss(net: &PerceptualNet, x: &Image, y: &Image, w: &LossWeights) -> Result<f64> {
    check_same_shape(x, y)?;
    w.validate()?;
    let mut g = Graph::new();
    let xn = g.constant_owned(x.to_tensor());
    let yn = g.constant_owned(y.to_tensor());
    let node = data_loss_g(&mut g, &mut const_binder, net, xn, yn, w);
    Ok(g.val(node).data()[0] as f64)
}

pub fn data_loss_g(
    g: &mut Graph,
    bind: &mut Binder,
    net: &PerceptualNet,
    x: NodeId,
    y: NodeId,
    w: &LossWeights,
) -> NodeId {
    let d = g.sub(x, y);
    let sq = g.square(d);
    let l2 = g.mean_all(sq);
    let perc = perceptual_loss_g(g, bind, net, x, y, w);
    let lp = lpips_like_loss_g(g, bind, net, x, y);
    let lpw = g.mul_scalar(lp, w.lambda_lpips);
    let s = g.add(l2, perc);
    g.add(s, lpw)
}

/// L = beta * L_info + L_data.
pub fn total_loss(info: f64, data: f64, w: &LossWeights) -> Result<f64> {
    if !info.is_finite() || !data.is_finite() {
        return Err(Error::InvalidArg("non-finite loss component".into()));
    }
    Ok(w.beta as f64 * info + data)
}

pub fn total_loss_g(g: &mut Graph, info: NodeId, data: NodeId, w: &LossWeights) -> NodeId {
    let bi = g.mul_scalar(info, w.beta);
    g.add(bi, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata;

    fn pair() -> (Image, Image) {
        (toydata::generate_face(32, 1, 0), toydata::generate_face(32, 1, 1))
    }

    #[test]
    fn l2_contract() {
        let a = Image::constant(8, 8, 3, 0.0).unwrap();
        let b = Image::constant(8, 8, 3, 1.0).unwrap();
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        assert!((l2_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let (x, y) = pair();
        // scalar-loop oracle
        let mut acc = 0.0f64;
        for (p, q) in x.data().iter().zip(y.data()) {
            acc += ((p - q) as f64) * ((p - q) as f64);
        }
        acc /= x.data().len() as f64;
        assert!((l2_loss(&x, &y).unwrap() - acc).abs() < 1e-7);
        let c = Image::constant(8, 9, 3, 0.0).unwrap();
        assert!(l2_loss(&a, &c).is_err());
    }

    #[test]
    fn perceptual_contract() {
        let net = PerceptualNet::init(11);
        let w = LossWeights::default();
        let (x, y) = pair();
        assert_eq!(perceptual_loss(&net, &x, &x, &w).unwrap(), 0.0);
        let pxy = perceptual_loss(&net, &x, &y, &w).unwrap();
        let pyx = perceptual_loss(&net, &y, &x, &w).unwrap();
        assert!(pxy > 0.0);
        assert!((pxy - pyx).abs() < 1e-9);
    }

    #[test]
    fn perceptual_first_stage_scales_linearly_for_small_perturbations() {
        let net = PerceptualNet::init(12);
        let w = LossWeights {
            // isolate stage 1
            vgg_layer_weights: [1.0, 0.0, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        let base = Image::constant(32, 32, 3, 0.5).unwrap();
        let mk = |eps: f32| {
            let data: Vec<f32> = base
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + eps * ((i % 7) as f32 - 3.0) / 3.0)
                .collect();
            Image::new(32, 32, 3, data).unwrap()
        };
        let d1 = perceptual_loss(&net, &mk(1e-3), &base, &w).unwrap();
        let d2 = perceptual_loss(&net, &mk(2e-3), &base, &w).unwrap();
        let ratio = d2 / d1;
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn lpips_contract_and_scale_invariance() {
        let net = PerceptualNet::init(13);
        let (x, y) = pair();
        assert_eq!(lpips_like_loss(&net, &x, &x).unwrap(), 0.0);
        let v = lpips_like_loss(&net, &x, &y).unwrap();
        assert!(v >= 0.0);
        // uniform weight scaling leaves the normalized loss unchanged
        let scaled = net.scaled(3.0);
        let vs = lpips_like_loss(&scaled, &x, &y).unwrap();
        assert!((v - vs).abs() < 1e-5, "{v} vs {vs}");
    }

    #[test]
    fn data_loss_composition() {
        let net = PerceptualNet::init(14);
        let (x, y) = pair();
        let w = LossWeights::default();
        assert_eq!(data_loss(&net, &x, &x, &w).unwrap(), 0.0);

        let w0 = LossWeights {
            lambda_lpips: 0.0,
            ..Default::default()
        };
        let d0 = data_loss(&net, &x, &y, &w0).unwrap();
        let sum = l2_loss(&x, &y).unwrap() + perceptual_loss(&net, &x, &y, &w0).unwrap();
        assert!((d0 - sum).abs() < 1e-6, "{d0} vs {sum}");

        let full = data_loss(&net, &x, &y, &w).unwrap();
        let manual = l2_loss(&x, &y).unwrap()
            + perceptual_loss(&net, &x, &y, &w).unwrap()
            + 2.0 * lpips_like_loss(&net, &x, &y).unwrap();
        assert!((full - manual).abs() < 1e-6, "{full} vs {manual}");
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.7, &w).unwrap(), 0.7);
        // components (0.1, 0.2, 0.05) with lambda = 2 -> 0.4 as data; beta path
        let data = 0.1 + 0.2 + 2.0 * 0.05;
        assert!((data - 0.4).abs() < 1e-12);
        assert!((total_loss(0.1, 1.0, &w).unwrap() - 3.0).abs() < 1e-6);
        assert!(total_loss(f64::NAN, 1.0, &w).is_err());
        // gradient w.r.t. info equals beta by linearity
        let mut g = Graph::new();
        let info = g.leaf(&Tensor::scalar(0.3));
        let data = g.constant(&Tensor::scalar(1.0));
        let t = total_loss_g(&mut g, info, data, &w);
        let grads = g.backward(t);
        assert!((grads.get(info).unwrap().data()[0] - 20.0).abs() < 1e-6);
    }

    #[test]
    fn data_loss_grad_matches_fd() {
        let net = PerceptualNet::init(15);
        let w = LossWeights::default();
        let (x, y) = pair();
        let xt = x.to_tensor();
        let yt = y.to_tensor();
        let mut g = Graph::new();
        let xn = g.leaf(&xt);
        let yn = g.constant(&yt);
        let node = data_loss_g(&mut g, &mut const_binder, &net, xn, yn, &w);
        let grads = g.backward(node);
        let dx = grads.get(xn).unwrap().clone();

        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let xn = g.constant(t);
            let yn = g.constant(&yt);
            let node = data_loss_g(&mut g, &mut const_binder, &net, xn, yn, &w);
            g.val(node).data()[0] as f64
        };
        let mut checked = 0;
        for i in (0..xt.numel()).step_by(xt.numel() / 25) {
            let eps = 1e-2f32;
            let mut p = xt.clone();
            p.data_mut()[i] += eps;
            let mut m = xt.clone();
            m.data_mut()[i] -= eps;
            let fd = (eval(&p) - eval(&m)) / (2.0 * eps as f64);
            let an = dx.data()[i] as f64;
            if an.abs().max(fd.abs()) >= 1e-3 {
                assert!(
                    ((an - fd) / an.abs().max(fd.abs())).abs() < 1e-2,
                    "x[{i}]: {an} vs {fd}"
                );
            }
            checked += 1;
        }
        assert!(checked >= 20);
    }
}
