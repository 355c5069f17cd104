//! Low-rank adapters: trainable factor pairs (A, B) attached to frozen
//! weights, W = W_base + (alpha/r) B A. B starts at zero so an adapted
//! forward equals the base forward until training moves it.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::Binder;
use crate::seeds;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// [rank, in_features]
    pub a: Tensor,
    /// [out_features, rank]
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn init(in_features: usize, out_features: usize, rank: usize, alpha: f32, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "lora.init", 0);
        LoraAdapter {
            a: Tensor::randn(vec![rank, in_features], 1.0 / (in_features as f32).sqrt(), &mut rng),
            b: Tensor::zeros(vec![out_features, rank]),
            rank,
            alpha,
        }
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// Materialized delta (alpha/r) B A as an [out, in] matrix.
    pub fn delta_matrix(&self) -> Tensor {
        tensor::matmul(&self.b, &self.a, false, false).scale(self.scaling())
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Singular values of the delta, largest first.
    pub fn singular_values(&self) -> Vec<f64> {
        let d = self.delta_matrix();
        let (rows, cols) = d.dim2();
        let m = DMatrix::from_row_iterator(rows, cols, d.data().iter().map(|&v| v as f64));
        let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().cloned().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        sv
    }

    /// Effective rank: singular values above 1e-6 * sigma_max.
    pub fn measured_rank(&self) -> usize {
        let sv = self.singular_values();
        match sv.first() {
            None | Some(0.0) => 0,
            Some(&smax) => sv.iter().filter(|&&s| s > 1e-6 * smax).count(),
        }
    }
}

/// Named adapter collection, keyed by the adapted layer name.
#[derive(Clone, Debug, Default)]
pub struct LoraSet {
    pub adapters: BTreeMap<String, LoraAdapter>,
}

#[derive(Serialize, Deserialize)]
struct LoraMeta {
    layers: Vec<(String, usize, f32)>,
}

impl LoraSet {
    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, layer: &str) -> Option<&LoraAdapter> {
        self.adapters.get(layer)
    }

    pub fn param_count(&self) -> usize {
        self.adapters.values().map(|a| a.param_count()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (layer, ad) in &self.adapters {
            out.push((format!("{layer}.lora_a"), &ad.a));
            out.push((format!("{layer}.lora_b"), &ad.b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (layer, ad) in &mut self.adapters {
            out.push((format!("{layer}.lora_a"), &mut ad.a));
            out.push((format!("{layer}.lora_b"), &mut ad.b));
        }
        out
    }

    /// Writes adapters into a checkpoint container under a `lora.` prefix,
    /// keeping the base weights untouched.
    pub fn insert_into_container(&self, c: &mut crate::checkpoint::Container) {
        for (name, t) in self.named_params() {
            c.insert(format!("lora.{name}"), t.clone());
        }
        let meta = LoraMeta {
            layers: self
                .adapters
                .iter()
                .map(|(k, a)| (k.clone(), a.rank, a.alpha))
                .collect(),
        };
        if let serde_json::Value::Object(map) = &mut c.meta {
            map.insert(
                "lora_layers".into(),
                serde_json::to_value(&meta.layers).expect("serializable"),
            );
        }
    }

    pub fn from_container(c: &crate::checkpoint::Container) -> Result<Self> {
        let layers: Vec<(String, usize, f32)> = c
            .meta
            .get("lora_layers")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::Checkpoint("missing lora_layers meta".into()))?;
        let mut adapters = BTreeMap::new();
        for (layer, rank, alpha) in layers {
            let a = c.get(&format!("lora.{layer}.lora_a"))?.clone();
            let b = c.get(&format!("lora.{layer}.lora_b"))?.clone();
            adapters.insert(layer, LoraAdapter { a, b, rank, alpha });
        }
        Ok(LoraSet { adapters })
    }
}

/// Effective weight node for a layer: base + reshaped (alpha/r) B A.
pub fn adapted_weight_g(
    g: &mut Graph,
    base_w: NodeId,
    base_shape: &[usize],
    layer: &str,
    adapter: &LoraAdapter,
    bind: &mut Binder,
) -> NodeId {
    let a = bind(g, &format!("{layer}.lora_a"), &adapter.a);
    let b = bind(g, &format!("{layer}.lora_b"), &adapter.b);
    let ba = g.matmul(b, a);
    let scaled = g.mul_scalar(ba, adapter.scaling());
    let dw = g.reshape(scaled, base_shape.to_vec());
    g.add(base_w, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_delta_is_zero() {
        let ad = LoraAdapter::init(36, 16, 4, 4.0, 1);
        assert!(ad.delta_matrix().data().iter().all(|&v| v == 0.0));
        assert_eq!(ad.measured_rank(), 0);
    }

    #[test]
    fn rank_bound_holds_after_random_b() {
        let mut ad = LoraAdapter::init(64, 32, 4, 4.0, 2);
        let mut rng = seeds::rng(3, "t", 0);
        ad.b = Tensor::randn(vec![32, 4], 1.0, &mut rng);
        let r = ad.measured_rank();
        assert!(r <= 4 && r > 0, "measured rank {r}");
    }

    #[test]
    fn param_count_linear_in_rank() {
        let r4 = LoraAdapter::init(100, 40, 4, 4.0, 1).param_count();
        let r8 = LoraAdapter::init(100, 40, 8, 8.0, 1).param_count();
        assert_eq!(r8, 2 * r4);
    }
}
