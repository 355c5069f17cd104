//! Spatial transformer block applied to the manifold before compression.
//!
//! Tokens are spatial positions; projections are 1x1 convolutions that keep
//! the 8 manifold channels. Single head, no positional encoding; a residual
//! connection wraps the block and the output projection starts at zero so an
//! untrained block is the identity.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{const_binder, Binder, Conv2d};
use crate::seeds;
use crate::tensor::Tensor;
use crate::vae::MANIFOLD_CHANNELS;

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub out: Conv2d,
    /// Softmax scale constant; equals the channel count.
    pub scale_dim: usize,
}

impl AttentionBlock {
    pub fn init(seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "attention.init", 0);
        let c = MANIFOLD_CHANNELS;
        AttentionBlock {
            q: Conv2d::init(c, c, 1, 1, 0, &mut rng),
            k: Conv2d::init(c, c, 1, 1, 0, &mut rng),
            v: Conv2d::init(c, c, 1, 1, 0, &mut rng),
            out: Conv2d::zeros(c, c, 1, 1, 0),
            scale_dim: c,
        }
    }

    /// Attention on the tape: out = OutProj(softmax(QK^T / sqrt(d)) V) + R.
    pub fn attend_g(&self, g: &mut Graph, r: NodeId, bind: &mut Binder) -> NodeId {
        let (c, h, w) = g.val(r).dim3();
        assert_eq!(c, MANIFOLD_CHANNELS, "attention expects the manifold width");
        let q = self.q.forward_g(g, r, "att.q", bind);
        let k = self.k.forward_g(g, r, "att.k", bind);
        let v = self.v.forward_g(g, r, "att.v", bind);
        let qt = g.chw_tokens(q);
        let kt = g.chw_tokens(k);
        let vt = g.chw_tokens(v);
        let ktt = g.transpose2(kt);
        let s = g.matmul(qt, ktt);
        let s = g.mul_scalar(s, 1.0 / (self.scale_dim as f32).sqrt());
        let p = g.softmax_rows(s);
        let o = g.matmul(p, vt);
        let oc = g.tokens_chw(o, h, w);
        let proj = self.out.forward_g(g, oc, "att.out", bind);
        g.add(proj, r)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.q.push_params("att.q", &mut out);
        self.k.push_params("att.k", &mut out);
        self.v.push_params("att.v", &mut out);
        self.out.push_params("att.out", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.q.push_params_mut("att.q", &mut out);
        self.k.push_params_mut("att.k", &mut out);
        self.v.push_params_mut("att.v", &mut out);
        self.out.push_params_mut("att.out", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Frozen-weight attention forward.
pub fn attend(block: &AttentionBlock, r: &Tensor) -> Result<Tensor> {
    let (c, _, _) = r.dim3();
    if c != MANIFOLD_CHANNELS {
        return Err(Error::shape(
            format!("{MANIFOLD_CHANNELS} channels"),
            format!("{c} channels"),
        ));
    }
    let mut g = Graph::new();
    let rn = g.constant(r);
    let out = block.attend_g(&mut g, rn, &mut const_binder);
    Ok(g.val(out).clone())
}

/// The softmax attention matrix (rows = query positions), for inspection.
pub fn attention_matrix(block: &AttentionBlock, r: &Tensor) -> Result<Tensor> {
    let (c, _, _) = r.dim3();
    if c != MANIFOLD_CHANNELS {
        return Err(Error::shape(
            format!("{MANIFOLD_CHANNELS} channels"),
            format!("{c} channels"),
        ));
    }
    let mut g = Graph::new();
    let rn = g.constant(r);
    let q = block.q.forward_g(&mut g, rn, "att.q", &mut const_binder);
    let k = block.k.forward_g(&mut g, rn, "att.k", &mut const_binder);
    let qt = g.chw_tokens(q);
    let kt = g.chw_tokens(k);
    let ktt = g.transpose2(kt);
    let s = g.matmul(qt, ktt);
    let s = g.mul_scalar(s, 1.0 / (block.scale_dim as f32).sqrt());
    let p = g.softmax_rows(s);
    Ok(g.val(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_block(seed: u64) -> AttentionBlock {
        let mut b = AttentionBlock::init(seed);
        // give the zero-initialized output projection real weights for tests
        let mut rng = seeds::rng(seed, "attention.test", 1);
        b.out = Conv2d::init(MANIFOLD_CHANNELS, MANIFOLD_CHANNELS, 1, 1, 0, &mut rng);
        b
    }

    fn conv1x1_apply(c: &Conv2d, x: &[f32]) -> Vec<f32> {
        // x is one 8-dim token
        let n = MANIFOLD_CHANNELS;
        (0..n)
            .map(|o| {
                let mut acc = c.b.data()[o];
                for i in 0..n {
                    acc += c.w.data()[o * n + i] * x[i];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn single_token_case() {
        let block = random_block(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Tensor::randn(vec![8, 1, 1], 1.0, &mut rng);
        let p = attention_matrix(&block, &r).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
        assert!((p.data()[0] - 1.0).abs() < 1e-7);
        let out = attend(&block, &r).unwrap();
        // expected: OutProj(V(r)) + r
        let token: Vec<f32> = r.data().to_vec();
        let v = conv1x1_apply(&block.v, &token);
        let proj = conv1x1_apply(&block.out, &v);
        for i in 0..8 {
            assert!((out.data()[i] - (proj[i] + token[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let mut block = random_block(3);
        block.q = Conv2d::zeros(8, 8, 1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Tensor::randn(vec![8, 2, 3], 1.0, &mut rng);
        let p = attention_matrix(&block, &r).unwrap();
        let n = 6;
        for v in p.data() {
            assert!((v - 1.0 / n as f32).abs() < 1e-6);
        }
        // every token receives the mean of V rows
        let out = attend(&block, &r).unwrap();
        let vmap = crate::tensor::conv2d(&r, &block.v.w, Some(&block.v.b), 1, 0);
        let vt = crate::tensor::chw_to_tokens(&vmap);
        let mut mean_v = vec![0.0f32; 8];
        for pos in 0..n {
            for c in 0..8 {
                mean_v[c] += vt.data()[pos * 8 + c] / n as f32;
            }
        }
        let proj = conv1x1_apply(&block.out, &mean_v);
        let out_t = crate::tensor::chw_to_tokens(&out);
        let r_t = crate::tensor::chw_to_tokens(&r);
        for pos in 0..n {
            for c in 0..8 {
                let expect = proj[c] + r_t.data()[pos * 8 + c];
                assert!((out_t.data()[pos * 8 + c] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_2x2() {
        let block = random_block(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = Tensor::randn(vec![8, 2, 2], 0.8, &mut rng);
        let out = attend(&block, &r).unwrap();

        // brute force: per-token projections, explicit softmax, matmul
        let rt = crate::tensor::chw_to_tokens(&r);
        let get_tok = |p: usize| rt.data()[p * 8..(p + 1) * 8].to_vec();
        let q: Vec<Vec<f32>> = (0..4).map(|p| conv1x1_apply(&block.q, &get_tok(p))).collect();
        let k: Vec<Vec<f32>> = (0..4).map(|p| conv1x1_apply(&block.k, &get_tok(p))).collect();
        let v: Vec<Vec<f32>> = (0..4).map(|p| conv1x1_apply(&block.v, &get_tok(p))).collect();
        let scale = 1.0 / (8.0f64).sqrt();
        let out_t = crate::tensor::chw_to_tokens(&out);
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| {
                    q[i].iter()
                        .zip(&k[j])
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut o = vec![0.0f64; 8];
            for j in 0..4 {
                let w = exps[j] / z;
                for c in 0..8 {
                    o[c] += w * v[j][c] as f64;
                }
            }
            let of: Vec<f32> = o.iter().map(|&x| x as f32).collect();
            let proj = conv1x1_apply(&block.out, &of);
            for c in 0..8 {
                let expect = proj[c] + get_tok(i)[c];
                let got = out_t.data()[i * 8 + c];
                assert!((got - expect).abs() < 1e-6, "token {i} ch {c}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let block = random_block(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = Tensor::randn(vec![8, 3, 3], 1.5, &mut rng);
        let p = attention_matrix(&block, &r).unwrap();
        let (m, n) = p.dim2();
        for i in 0..m {
            let s: f64 = p.data()[i * n..(i + 1) * n].iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_permutation_equivariance() {
        let block = random_block(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = Tensor::randn(vec![8, 2, 3], 1.0, &mut rng);
        let n = 6usize;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let rt = crate::tensor::chw_to_tokens(&r);
        let mut permuted = vec![0.0f32; n * 8];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&rt.data()[src * 8..(src + 1) * 8]);
        }
        let rp = crate::tensor::tokens_to_chw(&Tensor::new(vec![n, 8], permuted), 2, 3);

        let out = attend(&block, &r).unwrap();
        let outp = attend(&block, &rp).unwrap();
        let out_t = crate::tensor::chw_to_tokens(&out);
        let outp_t = crate::tensor::chw_to_tokens(&outp);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = outp_t.data()[dst * 8 + c];
                let b = out_t.data()[src * 8 + c];
                assert!((a - b).abs() < 1e-5, "perm mismatch at {dst} ch {c}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let block = random_block(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = Tensor::randn(vec![8, 2, 2], 0.7, &mut rng);
        // scalar objective: mean of squared outputs
        let eval = |b: &AttentionBlock| -> f64 {
            let out = attend(b, &r).unwrap();
            out.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
                / out.numel() as f64
        };
        // analytic grads
        let mut g = Graph::new();
        let rn = g.constant(&r);
        let mut ids = Vec::new();
        let mut binder = |g: &mut Graph, name: &str, t: &Tensor| {
            let id = g.leaf(t);
            ids.push((name.to_string(), id));
            id
        };
        let out = block.attend_g(&mut g, rn, &mut binder);
        let sq = g.square(out);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);

        let mut checked = 0;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(13);
        for (name, id) in &ids {
            let analytic = grads.get(*id).unwrap().clone();
            let numel = analytic.numel();
            // probe a few random elements per weight tensor
            for _ in 0..3.min(numel) {
                let ei = rand::Rng::random_range(&mut probe_rng, 0..numel);
                let eps = 1e-2f32;
                let mut bp = block.clone();
                let mut bm = block.clone();
                {
                    let mut pp = bp.named_params_mut();
                    let t = &mut pp.iter_mut().find(|(n, _)| n == name).unwrap().1;
                    t.data_mut()[ei] += eps;
                }
                {
                    let mut pm = bm.named_params_mut();
                    let t = &mut pm.iter_mut().find(|(n, _)| n == name).unwrap().1;
                    t.data_mut()[ei] -= eps;
                }
                let fd = (eval(&bp) - eval(&bm)) / (2.0 * eps as f64);
                let an = analytic.data()[ei] as f64;
                // below the 32-bit FD resolution both estimates read as zero
                if an.abs().max(fd.abs()) >= 1e-3 {
                    let denom = an.abs().max(fd.abs());
                    assert!(
                        ((an - fd) / denom).abs() < 1e-2,
                        "{name}[{ei}]: analytic {an} vs fd {fd}"
                    );
                }
                checked += 1;
            }
        }
        assert!(checked >= 20, "checked {checked} parameters");
    }
}
