//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] is rebuilt per training step. Leaves are tensors we want
//! gradients for (trainable parameters, probe inputs); constants are frozen
//! weights and data. Ops call the same kernels as the inference paths, so a
//! tape forward is bit-identical to the plain forward it mirrors.

use std::rc::Rc;

use crate::tensor::{self, Tensor};

pub type NodeId = usize;

type BackFn = Box<dyn Fn(&Tensor, &mut Vec<Option<Tensor>>)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape when disconnected.
    pub fn take(&mut self, id: NodeId, shape: &[usize]) -> Tensor {
        self.0[id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn accumulate(grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            let data = acc.data_mut();
            for (a, b) in data.iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn rc(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes[id].value)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackFn>) -> NodeId {
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), true, None)
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), false, None)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, None)
    }

    /// Runs reverse accumulation from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.val(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(f) = &self.nodes[id].backward {
                let g = grads[id].take().expect("grad present");
                f(&g, &mut grads);
                grads[id] = Some(g);
            }
        }
        Grads(grads)
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).add(self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |dy, grads| {
                if na {
                    accumulate(grads, a, dy.clone());
                }
                if nb {
                    accumulate(grads, b, dy.clone());
                }
            }))
        } else {
            None
        };
        self.push(v, na || nb, back)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).sub(self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |dy, grads| {
                if na {
                    accumulate(grads, a, dy.clone());
                }
                if nb {
                    accumulate(grads, b, dy.scale(-1.0));
                }
            }))
        } else {
            None
        };
        self.push(v, na || nb, back)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).mul(self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let (va, vb) = (self.rc(a), self.rc(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |dy, grads| {
                if na {
                    accumulate(grads, a, dy.mul(&vb));
                }
                if nb {
                    accumulate(grads, b, dy.mul(&va));
                }
            }))
        } else {
            None
        };
        self.push(v, na || nb, back)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let v = self.val(x).map(|v| v + c);
        self.unary(x, v, move |dy, _| dy.clone())
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let v = self.val(x).scale(c);
        self.unary(x, v, move |dy, _| dy.scale(c))
    }

    fn unary(
        &mut self,
        x: NodeId,
        value: Tensor,
        dfn: impl Fn(&Tensor, &Tensor) -> Tensor + 'static,
    ) -> NodeId {
        let nx = self.needs(x);
        let vx = self.rc(x);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |dy, grads| {
                accumulate(grads, x, dfn(dy, &vx));
            }))
        } else {
            None
        };
        self.push(value, nx, back)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|v| v.max(0.0));
        self.unary(x, v, |dy, vx| {
            dy.zip(vx, |g, x| if x > 0.0 { g } else { 0.0 })
        })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|v| v * sigmoid_f(v));
        self.unary(x, v, |dy, vx| {
            dy.zip(vx, |g, x| {
                let s = sigmoid_f(x);
                g * (s + x * s * (1.0 - s))
            })
        })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(sigmoid_f);
        let nx = self.needs(x);
        let vy = Rc::new(v.clone());
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |dy, grads| {
                accumulate(grads, x, dy.zip(&vy, |g, s| g * s * (1.0 - s)));
            }))
        } else {
            None
        };
        self.push(v, nx, back)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|v| v.ln());
        self.unary(x, v, |dy, vx| dy.zip(vx, |g, x| g / x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|v| v.exp());
        let nx = self.needs(x);
        let vy = Rc::new(v.clone());
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |dy, grads| {
                accumulate(grads, x, dy.mul(&vy));
            }))
        } else {
            None
        };
        self.push(v, nx, back)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|v| v.sqrt());
        self.unary(x, v, |dy, vx| dy.zip(vx, |g, x| g * 0.5 / x.sqrt()))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|v| v * v);
        self.unary(x, v, |dy, vx| dy.zip(vx, |g, x| g * 2.0 * x))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|v| 1.0 / v);
        self.unary(x, v, |dy, vx| dy.zip(vx, |g, x| -g / (x * x)))
    }

    /// min(x, cap); gradient is zero in the clamped region.
    pub fn clamp_max(&mut self, x: NodeId, cap: f32) -> NodeId {
        let v = self.val(x).map(|v| v.min(cap));
        self.unary(x, v, move |dy, vx| {
            dy.zip(vx, |g, x| if x < cap { g } else { 0.0 })
        })
    }

    /// max(x, floor); gradient is zero in the clamped region.
    pub fn clamp_min(&mut self, x: NodeId, floor: f32) -> NodeId {
        let v = self.val(x).map(|v| v.max(floor));
        self.unary(x, v, move |dy, vx| {
            dy.zip(vx, |g, x| if x > floor { g } else { 0.0 })
        })
    }

    // -- structure --------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.val(x).reshape(shape);
        let old = self.val(x).shape().to_vec();
        self.unary(x, v, move |dy, _| dy.reshape(old.clone()))
    }

    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, h, w) = self.val(a).dim3();
        let (cb, hb, wb) = self.val(b).dim3();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.val(a).data());
        data.extend_from_slice(self.val(b).data());
        let v = Tensor::new(vec![ca + cb, h, w], data);
        let (na, nb) = (self.needs(a), self.needs(b));
        let split = ca * h * w;
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |dy, grads| {
                if na {
                    accumulate(
                        grads,
                        a,
                        Tensor::new(vec![ca, h, w], dy.data()[..split].to_vec()),
                    );
                }
                if nb {
                    accumulate(
                        grads,
                        b,
                        Tensor::new(vec![cb, h, w], dy.data()[split..].to_vec()),
                    );
                }
            }))
        } else {
            None
        };
        self.push(v, na || nb, back)
    }

    pub fn slice_ch(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let (c, h, w) = self.val(x).dim3();
        assert!(from < to && to <= c, "bad channel slice");
        let hw = h * w;
        let v = Tensor::new(
            vec![to - from, h, w],
            self.val(x).data()[from * hw..to * hw].to_vec(),
        );
        self.unary(x, v, move |dy, _| {
            let mut full = vec![0.0f32; c * hw];
            full[from * hw..to * hw].copy_from_slice(dy.data());
            Tensor::new(vec![c, h, w], full)
        })
    }

    // -- conv / linear ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = tensor::conv2d(
            self.val(x),
            self.val(w),
            b.map(|b| self.val(b)),
            stride,
            pad,
        );
        let (nx, nw) = (self.needs(x), self.needs(w));
        let nb = b.map(|b| self.needs(b)).unwrap_or(false);
        let (vx, vw) = (self.rc(x), self.rc(w));
        let xshape = self.val(x).dim3();
        let wshape = (
            self.val(w).shape()[0],
            self.val(w).shape()[1],
            self.val(w).shape()[2],
        );
        let back: Option<BackFn> = if nx || nw || nb {
            Some(Box::new(move |dy, grads| {
                if nx {
                    accumulate(grads, x, tensor::conv2d_dx(dy, &vw, xshape, stride, pad));
                }
                if nw {
                    accumulate(grads, w, tensor::conv2d_dw(dy, &vx, wshape, stride, pad));
                }
                if nb {
                    accumulate(grads, b.unwrap(), tensor::conv2d_db(dy));
                }
            }))
        } else {
            None
        };
        self.push(v, nx || nw || nb, back)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (o, k) = self.val(w).dim2();
        assert_eq!(self.val(x).numel(), k, "linear input length mismatch");
        assert_eq!(self.val(b).numel(), o, "linear bias length mismatch");
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        let bd = self.val(b).data();
        let mut y = vec![0.0f32; o];
        for oi in 0..o {
            let mut acc = bd[oi] as f64;
            for ki in 0..k {
                acc += (wd[oi * k + ki] * xd[ki]) as f64;
            }
            y[oi] = acc as f32;
        }
        let v = Tensor::new(vec![o], y);
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let (vx, vw) = (self.rc(x), self.rc(w));
        let back: Option<BackFn> = if nx || nw || nb {
            Some(Box::new(move |dy, grads| {
                if nx {
                    let mut dx = vec![0.0f32; k];
                    for oi in 0..o {
                        let g = dy.data()[oi];
                        for ki in 0..k {
                            dx[ki] += g * vw.data()[oi * k + ki];
                        }
                    }
                    accumulate(grads, x, Tensor::new(vec![k], dx));
                }
                if nw {
                    let mut dw = vec![0.0f32; o * k];
                    for oi in 0..o {
                        let g = dy.data()[oi];
                        for ki in 0..k {
                            dw[oi * k + ki] = g * vx.data()[ki];
                        }
                    }
                    accumulate(grads, w, Tensor::new(vec![o, k], dw));
                }
                if nb {
                    accumulate(grads, b, dy.clone());
                }
            }))
        } else {
            None
        };
        self.push(v, nx || nw || nb, back)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(self.val(a), self.val(b), false, false);
        let (na, nb) = (self.needs(a), self.needs(b));
        let (va, vb) = (self.rc(a), self.rc(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |dy, grads| {
                if na {
                    accumulate(grads, a, tensor::matmul(dy, &vb, false, true));
                }
                if nb {
                    accumulate(grads, b, tensor::matmul(&va, dy, true, false));
                }
            }))
        } else {
            None
        };
        self.push(v, na || nb, back)
    }

    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.val(x).dim2();
        let xd = self.val(x).data();
        let mut y = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                y[j * r + i] = xd[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], y);
        self.unary(x, v, move |dy, _| {
            let mut dx = vec![0.0f32; r * c];
            for j in 0..c {
                for i in 0..r {
                    dx[i * c + j] = dy.data()[j * r + i];
                }
            }
            Tensor::new(vec![r, c], dx)
        })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let p = tensor::softmax_rows(self.val(x));
        let nx = self.needs(x);
        let vp = Rc::new(p.clone());
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |dy, grads| {
                accumulate(grads, x, tensor::softmax_rows_back(&vp, dy));
            }))
        } else {
            None
        };
        self.push(p, nx, back)
    }

    // -- spatial ----------------------------------------------------------

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let v = tensor::upsample2(self.val(x));
        self.unary(x, v, |dy, _| tensor::upsample2_back(dy))
    }

    pub fn chw_tokens(&mut self, x: NodeId) -> NodeId {
        let (_, h, w) = self.val(x).dim3();
        let v = tensor::chw_to_tokens(self.val(x));
        self.unary(x, v, move |dy, _| tensor::tokens_to_chw(dy, h, w))
    }

    pub fn tokens_chw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let v = tensor::tokens_to_chw(self.val(x), h, w);
        self.unary(x, v, |dy, _| tensor::chw_to_tokens(dy))
    }

    /// Adds a per-channel bias vector over a [C,H,W] map.
    pub fn add_ch_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (c, h, w) = self.val(x).dim3();
        assert_eq!(self.val(b).numel(), c, "channel bias length mismatch");
        let hw = h * w;
        let mut v = self.val(x).clone();
        {
            let bd = self.val(b).data().to_vec();
            let vd = v.data_mut();
            for ci in 0..c {
                for p in 0..hw {
                    vd[ci * hw + p] += bd[ci];
                }
            }
        }
        let (nx, nb) = (self.needs(x), self.needs(b));
        let back: Option<BackFn> = if nx || nb {
            Some(Box::new(move |dy, grads| {
                if nx {
                    accumulate(grads, x, dy.clone());
                }
                if nb {
                    let mut db = vec![0.0f32; c];
                    for ci in 0..c {
                        let mut acc = 0.0f64;
                        for p in 0..hw {
                            acc += dy.data()[ci * hw + p] as f64;
                        }
                        db[ci] = acc as f32;
                    }
                    accumulate(grads, b, Tensor::new(vec![c], db));
                }
            }))
        } else {
            None
        };
        self.push(v, nx || nb, back)
    }

    /// y[c] = (x[c] + shift[c]) * scale[c] with constant per-channel arrays.
    pub fn affine_ch(&mut self, x: NodeId, scale: Vec<f32>, shift: Vec<f32>) -> NodeId {
        let (c, h, w) = self.val(x).dim3();
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let hw = h * w;
        let mut v = self.val(x).clone();
        {
            let vd = v.data_mut();
            for ci in 0..c {
                for p in 0..hw {
                    vd[ci * hw + p] = (vd[ci * hw + p] + shift[ci]) * scale[ci];
                }
            }
        }
        self.unary(x, v, move |dy, _| {
            let mut dx = dy.clone();
            let dd = dx.data_mut();
            for ci in 0..c {
                for p in 0..hw {
                    dd[ci * hw + p] *= scale[ci];
                }
            }
            dx
        })
    }

    /// Sums over channels: [C,H,W] -> [1,H,W].
    pub fn sum_ch(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.val(x).dim3();
        let hw = h * w;
        let mut v = vec![0.0f32; hw];
        for ci in 0..c {
            for p in 0..hw {
                v[p] += self.val(x).data()[ci * hw + p];
            }
        }
        self.unary(x, Tensor::new(vec![1, h, w], v), move |dy, _| {
            let mut dx = vec![0.0f32; c * hw];
            for ci in 0..c {
                dx[ci * hw..(ci + 1) * hw].copy_from_slice(dy.data());
            }
            Tensor::new(vec![c, h, w], dx)
        })
    }

    /// Multiplies each channel of x [C,H,W] by a spatial map m [1,H,W].
    pub fn mul_spatial(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let (c, h, w) = self.val(x).dim3();
        let (mc, mh, mw) = self.val(m).dim3();
        assert_eq!((mc, mh, mw), (1, h, w), "spatial map shape mismatch");
        let hw = h * w;
        let mut v = self.val(x).clone();
        {
            let md = self.val(m).data().to_vec();
            let vd = v.data_mut();
            for ci in 0..c {
                for p in 0..hw {
                    vd[ci * hw + p] *= md[p];
                }
            }
        }
        let (nx, nm) = (self.needs(x), self.needs(m));
        let (vx, vm) = (self.rc(x), self.rc(m));
        let back: Option<BackFn> = if nx || nm {
            Some(Box::new(move |dy, grads| {
                if nx {
                    let mut dx = dy.clone();
                    let dd = dx.data_mut();
                    for ci in 0..c {
                        for p in 0..hw {
                            dd[ci * hw + p] *= vm.data()[p];
                        }
                    }
                    accumulate(grads, x, dx);
                }
                if nm {
                    let mut dm = vec![0.0f32; hw];
                    for ci in 0..c {
                        for p in 0..hw {
                            dm[p] += dy.data()[ci * hw + p] * vx.data()[ci * hw + p];
                        }
                    }
                    accumulate(grads, m, Tensor::new(vec![1, h, w], dm));
                }
            }))
        } else {
            None
        };
        self.push(v, nx || nm, back)
    }

    // -- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).sum_f64() as f32;
        let shape = self.val(x).shape().to_vec();
        self.unary(x, Tensor::scalar(s), move |dy, _| {
            Tensor::full(shape.clone(), dy.data()[0])
        })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.val(x).mean_f64() as f32;
        let shape = self.val(x).shape().to_vec();
        let n = self.val(x).numel() as f32;
        self.unary(x, Tensor::scalar(m), move |dy, _| {
            Tensor::full(shape.clone(), dy.data()[0] / n)
        })
    }

    /// Euclidean norm of all elements; exact 0 at the origin with a guarded
    /// subgradient there.
    pub fn l2norm_all(&mut self, x: NodeId) -> NodeId {
        let norm = self.val(x).data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        self.unary(x, Tensor::scalar(norm as f32), move |dy, vx| {
            let denom = (norm as f32).max(1e-12);
            vx.map(|v| dy.data()[0] * v / denom)
        })
    }
}

pub fn sigmoid_f(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
