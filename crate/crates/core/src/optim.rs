//! AdamW optimizer over plain tensors.

use crate::tensor::Tensor;

pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One decoupled-weight-decay Adam step. Parameter order must be stable
    /// across calls; moment buffers are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to different params");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "grad shape mismatch");
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / b1t;
                let vhat = vd[i] / b2t;
                pd[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges() {
        // minimize (x - 3)^2
        let mut x = Tensor::scalar(0.0);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..300 {
            let g = Tensor::scalar(2.0 * (x.data()[0] - 3.0));
            opt.step(&mut [&mut x], &[g]);
        }
        assert!((x.data()[0] - 3.0).abs() < 1e-2, "got {}", x.data()[0]);
    }
}
