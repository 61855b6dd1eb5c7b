//! Differentiable building blocks with hand-written backward passes.

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::tensor::{join, matmul, matmul_at_acc, matmul_bt, Parameters, Tensor};
use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Affine map `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[d_in, d_out], bound, rng),
            bias: bias.then(|| Tensor::uniform(&[d_out], bound, rng)),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut weight = Tensor::zeros(&[d, d]);
        for i in 0..d {
            weight.data_mut()[i * d + i] = 1.0;
        }
        Linear {
            weight,
            bias: Some(Tensor::zeros(&[d])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "linear expects [_, {}], got {:?}",
                self.d_in(),
                x.shape()
            )));
        }
        let mut y = matmul(x, &self.weight);
        if let Some(b) = &self.bias {
            let b = b.data();
            for i in 0..y.rows() {
                for (v, bb) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Tensor {
        matmul_at_acc(x, dy, &mut grad.weight);
        if let Some(gb) = &mut grad.bias {
            let gb = gb.data_mut();
            for i in 0..dy.rows() {
                for (g, d) in gb.iter_mut().zip(dy.row(i)) {
                    *g += d;
                }
            }
        }
        matmul_bt(dy, &self.weight)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl_parameters!(LayerNorm { gain, bias });

pub struct LayerNormCache {
    xhat: Tensor,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, LayerNormCache) {
        let (n, d) = (x.rows(), x.cols());
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let mut rstd = Vec::with_capacity(n);
        let (g, b) = (self.gain.data(), self.bias.data());
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * r;
            }
            let yr = y.row_mut(i);
            for j in 0..d {
                yr[j] = xhat.at(i, j) * g[j] + b[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor, grad: &mut LayerNorm) -> Tensor {
        let (n, d) = (dy.rows(), dy.cols());
        let g = self.gain.data();
        let mut dx = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let xh = cache.xhat.row(i);
            let dyr = dy.row(i);
            {
                let gg = grad.gain.data_mut();
                for j in 0..d {
                    gg[j] += dyr[j] * xh[j];
                }
            }
            {
                let gb = grad.bias.data_mut();
                for j in 0..d {
                    gb[j] += dyr[j];
                }
            }
            let dxh: Vec<f64> = (0..d).map(|j| dyr[j] * g[j]).collect();
            let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
            let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let r = cache.rstd[i];
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = r * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}

/// Depthwise 1-D convolution over a `[len, channels]` sequence with zero
/// padding of `pad_left` before and `width - 1 - pad_left` after, so the
/// output length equals the input length.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv1d {
    /// `[channels, width]`
    pub kernel: Tensor,
    pub bias: Tensor,
    pub pad_left: usize,
}

impl Parameters for DepthwiseConv1d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl DepthwiseConv1d {
    pub fn new<R: Rng + ?Sized>(channels: usize, width: usize, pad_left: usize, rng: &mut R) -> Self {
        assert!(pad_left < width);
        let bound = 1.0 / (width as f64).sqrt();
        DepthwiseConv1d {
            kernel: Tensor::uniform(&[channels, width], bound, rng),
            bias: Tensor::uniform(&[channels], bound, rng),
            pad_left,
        }
    }

    pub fn width(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (len, ch) = (x.rows(), x.cols());
        let w = self.width();
        let k = self.kernel.data();
        let b = self.bias.data();
        let xd = x.data();
        let mut y = Tensor::zeros(&[len, ch]);
        let yd = y.data_mut();
        for t in 0..len {
            let out = &mut yd[t * ch..(t + 1) * ch];
            out.copy_from_slice(b);
            for j in 0..w {
                let src = t as isize + j as isize - self.pad_left as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let src = src as usize;
                let xin = &xd[src * ch..(src + 1) * ch];
                for c in 0..ch {
                    out[c] += k[c * w + j] * xin[c];
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut DepthwiseConv1d) -> Tensor {
        let (len, ch) = (x.rows(), x.cols());
        let w = self.width();
        let k = self.kernel.data();
        let xd = x.data();
        let dyd = dy.data();
        let mut dx = Tensor::zeros(&[len, ch]);
        {
            let gb = grad.bias.data_mut();
            for t in 0..len {
                for c in 0..ch {
                    gb[c] += dyd[t * ch + c];
                }
            }
        }
        let gk = grad.kernel.data_mut();
        let dxd = dx.data_mut();
        for t in 0..len {
            let g = &dyd[t * ch..(t + 1) * ch];
            for j in 0..w {
                let src = t as isize + j as isize - self.pad_left as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..ch {
                    gk[c * w + j] += g[c] * xd[src * ch + c];
                    dxd[src * ch + c] += g[c] * k[c * w + j];
                }
            }
        }
        dx
    }
}

/// Row-wise L2 normalization. Fails on a zero-norm row.
pub fn l2_normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numerical {
                step: i,
                msg: format!("row {i} has norm {n}, cannot normalize"),
            });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backward of [`l2_normalize_rows`] given the normalized output and norms.
pub fn l2_normalize_rows_backward(z: &Tensor, norms: &[f64], dz: &Tensor) -> Tensor {
    let mut du = Tensor::zeros(&[z.rows(), z.cols()]);
    for i in 0..z.rows() {
        let zr = z.row(i);
        let dr = dz.row(i);
        let dot: f64 = zr.iter().zip(dr).map(|(a, b)| a * b).sum();
        let out = du.row_mut(i);
        for j in 0..zr.len() {
            out[j] = (dr[j] - zr[j] * dot) / norms[i];
        }
    }
    du
}
