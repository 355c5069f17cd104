//! Layer primitives shared by the toy networks.
//!
//! Forward passes are written once against the autodiff graph; inference
//! binds weights as constants, training binds them as leaves through the
//! same code path, so both produce bit-identical values.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;

/// Weight binder: decides whether a named tensor enters the graph as a
/// trainable leaf or a frozen constant.
pub type Binder<'a> = dyn FnMut(&mut Graph, &str, &Tensor) -> NodeId + 'a;

/// Binder for frozen inference: everything becomes a constant.
pub fn const_binder(g: &mut Graph, _name: &str, t: &Tensor) -> NodeId {
    g.constant(t)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal init scaled for the fan-in.
    pub fn init(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (in_ch * k * k) as f32).sqrt();
        Conv2d {
            w: Tensor::randn(vec![out_ch, in_ch, k, k], std, rng),
            b: Tensor::zeros(vec![out_ch]),
            stride,
            pad,
        }
    }

    /// Zero-initialized layer (used for output heads that must start inert).
    pub fn zeros(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Tensor::zeros(vec![out_ch, in_ch, k, k]),
            b: Tensor::zeros(vec![out_ch]),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward_g(&self, g: &mut Graph, x: NodeId, name: &str, bind: &mut Binder) -> NodeId {
        let w = bind(g, &format!("{name}.w"), &self.w);
        let b = bind(g, &format!("{name}.b"), &self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn push_params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.w"), &self.w));
        out.push((format!("{name}.b"), &self.b));
    }

    pub fn push_params_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{name}.w"), &mut self.w));
        out.push((format!("{name}.b"), &mut self.b));
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_dim as f32).sqrt();
        Linear {
            w: Tensor::randn(vec![out_dim, in_dim], std, rng),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn forward_g(&self, g: &mut Graph, x: NodeId, name: &str, bind: &mut Binder) -> NodeId {
        let w = bind(g, &format!("{name}.w"), &self.w);
        let b = bind(g, &format!("{name}.b"), &self.b);
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn push_params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.w"), &self.w));
        out.push((format!("{name}.b"), &self.b));
    }

    pub fn push_params_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{name}.w"), &mut self.w));
        out.push((format!("{name}.b"), &mut self.b));
    }
}

/// Writes checkpoint tensors from a named-parameter listing.
pub fn params_into_container(params: &[(String, &Tensor)], c: &mut crate::checkpoint::Container) {
    for (name, t) in params {
        c.insert(name.clone(), (*t).clone());
    }
}

/// Loads named parameters back from a checkpoint container.
pub fn params_from_container(
    params: Vec<(String, &mut Tensor)>,
    c: &crate::checkpoint::Container,
) -> crate::error::Result<()> {
    for (name, t) in params {
        let loaded = c.get(&name)?;
        if loaded.shape() != t.shape() {
            return Err(crate::error::Error::Checkpoint(format!(
                "tensor {name:?} shape {:?} does not match model {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded.clone();
    }
    Ok(())
}
