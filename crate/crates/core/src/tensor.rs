//! Dense f32 tensors and the compute kernels shared by inference and
//! autodiff paths. Convolutions go through im2col + SGEMM; reductions
//! accumulate in f64 with a fixed summation order.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "tensor shape/storage length mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f32, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// (channels, height, width) of a rank-3 tensor.
    pub fn dim3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3 tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn dim2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor");
        (self.shape[0], self.shape[1])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape changes element count");
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum_f64() / self.data.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian byte view of the payload, used for hashing and checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// GEMM

/// c = a @ b for row-major matrices, optionally transposing either input.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = a.dim2();
    let (br, bc) = b.dim2();
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dimension mismatch");
    let mut c = vec![0.0f32; m * n];
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], c)
}

// ---------------------------------------------------------------------------
// Convolution

pub fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = x.dim3();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let mut cols = vec![0.0f32; c * k * k * ho * wo];
    let n = ho * wo;
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + iy as usize) * w;
                    let crow = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[crow + ox] = xd[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * k * k, n], cols)
}

fn col2im(cols: &Tensor, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Tensor {
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let n = ho * wo;
    let mut x = vec![0.0f32; c * h * w];
    let cd = cols.data();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + iy as usize) * w;
                    let crow = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[xrow + ix as usize] += cd[crow + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], x)
}

/// 2-D convolution: x [C,H,W], w [O,C,k,k], optional bias [O].
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = x.dim3();
    assert_eq!(w.shape().len(), 4, "conv weight must be rank 4");
    let (o, wc, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(w.shape()[2], w.shape()[3], "square kernels only");
    assert_eq!(c, wc, "conv channel mismatch");
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(wd, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let wmat = Tensor {
        shape: vec![o, c * k * k],
        data: w.data.clone(),
    };
    let mut y = matmul(&wmat, &cols, false, false);
    if let Some(b) = b {
        assert_eq!(b.numel(), o, "bias length mismatch");
        let n = ho * wo;
        for oc in 0..o {
            let bv = b.data[oc];
            for v in &mut y.data[oc * n..(oc + 1) * n] {
                *v += bv;
            }
        }
    }
    Tensor {
        shape: vec![o, ho, wo],
        data: y.data,
    }
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_dx(dy: &Tensor, w: &Tensor, xshape: (usize, usize, usize), stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = xshape;
    let o = w.shape()[0];
    let k = w.shape()[2];
    let (dyo, ho, wo) = dy.dim3();
    assert_eq!(dyo, o);
    let dymat = Tensor {
        shape: vec![o, ho * wo],
        data: dy.data.clone(),
    };
    let wmat = Tensor {
        shape: vec![o, c * k * k],
        data: w.data.clone(),
    };
    let dcols = matmul(&wmat, &dymat, true, false);
    col2im(&dcols, c, h, wd, k, stride, pad)
}

/// Gradient of conv2d w.r.t. its weight.
pub fn conv2d_dw(dy: &Tensor, x: &Tensor, wshape: (usize, usize, usize), stride: usize, pad: usize) -> Tensor {
    let (o, c, k) = wshape;
    let (_, ho, wo) = dy.dim3();
    let cols = im2col(x, k, stride, pad);
    let dymat = Tensor {
        shape: vec![o, ho * wo],
        data: dy.data.clone(),
    };
    let dw = matmul(&dymat, &cols, false, true);
    Tensor {
        shape: vec![o, c, k, k],
        data: dw.data,
    }
}

/// Gradient of conv2d w.r.t. its bias.
pub fn conv2d_db(dy: &Tensor) -> Tensor {
    let (o, ho, wo) = dy.dim3();
    let n = ho * wo;
    let mut db = vec![0.0f32; o];
    for oc in 0..o {
        let mut acc = 0.0f64;
        for v in &dy.data[oc * n..(oc + 1) * n] {
            acc += *v as f64;
        }
        db[oc] = acc as f32;
    }
    Tensor::new(vec![o], db)
}

// ---------------------------------------------------------------------------
// Resampling / layout

/// Nearest-neighbour 2x upsampling of [C,H,W].
pub fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dim3();
    let mut y = vec![0.0f32; c * 4 * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ci in 0..c {
        for i in 0..h2 {
            let si = i / 2;
            let srow = (ci * h + si) * w;
            let drow = (ci * h2 + i) * w2;
            for j in 0..w2 {
                y[drow + j] = x.data[srow + j / 2];
            }
        }
    }
    Tensor::new(vec![c, h2, w2], y)
}

/// Backward of `upsample2`: sums each 2x2 block.
pub fn upsample2_back(dy: &Tensor) -> Tensor {
    let (c, h2, w2) = dy.dim3();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for i in 0..h2 {
            let si = i / 2;
            let drow = (ci * h + si) * w;
            let srow = (ci * h2 + i) * w2;
            for j in 0..w2 {
                dx[drow + j / 2] += dy.data[srow + j];
            }
        }
    }
    Tensor::new(vec![c, h, w], dx)
}

/// [C,H,W] -> [H*W, C] token matrix (spatial positions as rows).
pub fn chw_to_tokens(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dim3();
    let n = h * w;
    let mut y = vec![0.0f32; n * c];
    for ci in 0..c {
        for p in 0..n {
            y[p * c + ci] = x.data[ci * n + p];
        }
    }
    Tensor::new(vec![n, c], y)
}

/// [H*W, C] token matrix -> [C,H,W].
pub fn tokens_to_chw(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c) = t.dim2();
    assert_eq!(n, h * w, "token count does not match spatial dims");
    let mut y = vec![0.0f32; c * n];
    for ci in 0..c {
        for p in 0..n {
            y[ci * n + p] = t.data[p * c + ci];
        }
    }
    Tensor::new(vec![c, h, w], y)
}

// ---------------------------------------------------------------------------
// Softmax

/// Row-wise softmax of a [M,N] matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.dim2();
    let mut y = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for j in 0..n {
            let e = ((row[j] - mx) as f64).exp();
            y[i * n + j] = e as f32;
            z += e;
        }
        let inv = (1.0 / z) as f32;
        for j in 0..n {
            y[i * n + j] *= inv;
        }
    }
    Tensor::new(vec![m, n], y)
}

/// Backward of row softmax given the forward output `p`.
pub fn softmax_rows_back(p: &Tensor, dy: &Tensor) -> Tensor {
    let (m, n) = p.dim2();
    let mut dx = vec![0.0f32; m * n];
    for i in 0..m {
        let pr = &p.data[i * n..(i + 1) * n];
        let dr = &dy.data[i * n..(i + 1) * n];
        let dot: f64 = pr
            .iter()
            .zip(dr.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        for j in 0..n {
            dx[i * n + j] = pr[j] * (dr[j] - dot as f32);
        }
    }
    Tensor::new(vec![m, n], dx)
}
