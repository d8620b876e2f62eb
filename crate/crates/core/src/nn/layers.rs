use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    Sigmoid,
    Softmax,
    Flatten,
    GlobalAvgPool,
}

/// He-normal weights, zero biases.
fn he_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let wshape = [out_channels, in_channels, kernel, kernel];
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: he_init(&wshape, in_channels * kernel * kernel, rng),
            bias: Tensor::zeros(&[out_channels]),
            grad_weight: Tensor::zeros(&wshape),
            grad_bias: Tensor::zeros(&[out_channels]),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
        let k = self.kernel;
        let pad = self.padding as isize;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let pad = self.padding as isize;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_hw(h, w).expect("validated shape");
        let ckk = self.in_channels * self.kernel * self.kernel;
        let hw = oh * ow;
        let mut out = Tensor::zeros(&[b, self.out_channels, oh, ow]);
        let mut col = vec![0.0; ckk * hw];
        let wt = self.weight.data();
        for n in 0..b {
            self.im2col(x.row_slice(n), h, w, oh, ow, &mut col);
            let y = &mut out.data_mut()[n * self.out_channels * hw..(n + 1) * self.out_channels * hw];
            for o in 0..self.out_channels {
                let yo = &mut y[o * hw..(o + 1) * hw];
                yo.fill(self.bias.data()[o]);
                for r in 0..ckk {
                    let wv = wt[o * ckk + r];
                    if wv == 0.0 {
                        continue;
                    }
                    for (dst, &src) in yo.iter_mut().zip(&col[r * hw..(r + 1) * hw]) {
                        *dst += wv * src;
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let hw = oh * ow;
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
        let mut dx = Tensor::zeros(x.shape());
        let mut col = vec![0.0; ckk * hw];
        let mut dcol = vec![0.0; ckk * hw];
        let in_len = self.in_channels * h * w;
        for n in 0..b {
            self.im2col(x.row_slice(n), h, w, oh, ow, &mut col);
            let dyn_ = dy.row_slice(n);
            dcol.fill(0.0);
            for o in 0..self.out_channels {
                let go = &dyn_[o * hw..(o + 1) * hw];
                self.grad_bias.data_mut()[o] += go.iter().sum::<f64>();
                for r in 0..ckk {
                    let cr = &col[r * hw..(r + 1) * hw];
                    let dot: f64 = go.iter().zip(cr).map(|(a, b)| a * b).sum();
                    self.grad_weight.data_mut()[o * ckk + r] += dot;
                    let wv = self.weight.data()[o * ckk + r];
                    if wv != 0.0 {
                        for (d, &g) in dcol[r * hw..(r + 1) * hw].iter_mut().zip(go) {
                            *d += wv * g;
                        }
                    }
                }
            }
            self.col2im(&dcol, h, w, oh, ow, &mut dx.data_mut()[n * in_len..(n + 1) * in_len]);
        }
        dx
    }
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Dense {
            in_features,
            out_features,
            weight: he_init(&[out_features, in_features], in_features, rng),
            bias: Tensor::zeros(&[out_features]),
            grad_weight: Tensor::zeros(&[out_features, in_features]),
            grad_bias: Tensor::zeros(&[out_features]),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let mut out = Tensor::zeros(&[b, self.out_features]);
        let wt = self.weight.data();
        for n in 0..b {
            let xi = x.row_slice(n);
            for o in 0..self.out_features {
                let row = &wt[o * self.in_features..(o + 1) * self.in_features];
                let dot: f64 = row.iter().zip(xi).map(|(a, b)| a * b).sum();
                out.data_mut()[n * self.out_features + o] = dot + self.bias.data()[o];
            }
        }
        out
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let b = x.shape()[0];
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
        let mut dx = Tensor::zeros(x.shape());
        for n in 0..b {
            let xi = x.row_slice(n);
            let gi = dy.row_slice(n);
            let dxi = &mut dx.data_mut()[n * self.in_features..(n + 1) * self.in_features];
            for (o, &g) in gi.iter().enumerate() {
                self.grad_bias.data_mut()[o] += g;
                if g == 0.0 {
                    continue;
                }
                let range = o * self.in_features..(o + 1) * self.in_features;
                for (gw, &xv) in self.grad_weight.data_mut()[range.clone()].iter_mut().zip(xi) {
                    *gw += g * xv;
                }
                for (d, &wv) in dxi.iter_mut().zip(&self.weight.data()[range]) {
                    *d += g * wv;
                }
            }
        }
        dx
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = *x.shape().last().expect("rank >= 1");
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
            Layer::Flatten => "flatten",
            Layer::GlobalAvgPool => "global-average-pool",
        }
    }

    /// Per-sample output shape, or `None` if `input` is not accepted.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels {
                    return None;
                }
                let (oh, ow) = c.out_hw(input[1], input[2])?;
                Some(vec![c.out_channels, oh, ow])
            }
            Layer::Dense(d) => (input.len() == 1 && input[0] == d.in_features).then(|| vec![d.out_features]),
            Layer::Relu | Layer::Sigmoid => Some(input.to_vec()),
            Layer::Softmax => (input.len() == 1).then(|| input.to_vec()),
            Layer::Flatten => Some(vec![input.iter().product()]),
            Layer::GlobalAvgPool => (input.len() == 3).then(|| vec![input[0]]),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Dense(d) => d.forward(x),
            Layer::Relu => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            Layer::Sigmoid => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
                y
            }
            Layer::Softmax => softmax_rows(x),
            Layer::Flatten => {
                let b = x.shape()[0];
                x.clone().reshape(&[b, x.len() / b]).expect("same length")
            }
            Layer::GlobalAvgPool => {
                let (b, c) = (x.shape()[0], x.shape()[1]);
                let hw = x.shape()[2] * x.shape()[3];
                let mut y = Tensor::zeros(&[b, c]);
                for (dst, plane) in y.data_mut().iter_mut().zip(x.data().chunks(hw)) {
                    *dst = plane.iter().sum::<f64>() / hw as f64;
                }
                y
            }
        }
    }

    /// Given the cached input `x`, output `y` and upstream gradient `dy`,
    /// stores parameter gradients and returns the input gradient.
    pub(crate) fn backward(&mut self, x: &Tensor, y: &Tensor, dy: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d(c) => c.backward(x, dy),
            Layer::Dense(d) => d.backward(x, dy),
            Layer::Relu => {
                let mut dx = dy.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
            Layer::Sigmoid => {
                let mut dx = dy.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= yv * (1.0 - yv);
                }
                dx
            }
            Layer::Softmax => {
                let n = *y.shape().last().expect("rank >= 1");
                let mut dx = dy.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - dot);
                    }
                }
                dx
            }
            Layer::Flatten => dy.clone().reshape(x.shape()).expect("same length"),
            Layer::GlobalAvgPool => {
                let hw = x.shape()[2] * x.shape()[3];
                let mut dx = Tensor::zeros(x.shape());
                for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
                    plane.fill(g / hw as f64);
                }
                dx
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.grad_weight, &c.grad_bias],
            Layer::Dense(d) => vec![&d.grad_weight, &d.grad_bias],
            _ => Vec::new(),
        }
    }

    pub(crate) fn param_grad_pairs(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![(&mut c.weight, &c.grad_weight), (&mut c.bias, &c.grad_bias)],
            Layer::Dense(d) => vec![(&mut d.weight, &d.grad_weight), (&mut d.bias, &d.grad_bias)],
            _ => Vec::new(),
        }
    }

    pub(crate) fn zero_grad(&mut self) {
        match self {
            Layer::Conv2d(c) => {
                c.grad_weight.fill(0.0);
                c.grad_bias.fill(0.0);
            }
            Layer::Dense(d) => {
                d.grad_weight.fill(0.0);
                d.grad_bias.fill(0.0);
            }
            _ => {}
        }
    }
}

impl Conv2d {
    /// Rebuilds a layer from stored parameters (checkpoint loading).
    pub fn from_params(stride: usize, padding: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 4 || s[2] != s[3] || bias.shape() != [s[0]] || stride == 0 {
            return Err(Error::Checkpoint(format!("bad conv2d parameter shapes {s:?}")));
        }
        Ok(Conv2d {
            in_channels: s[1],
            out_channels: s[0],
            kernel: s[2],
            stride,
            padding,
            grad_weight: Tensor::zeros(&s),
            grad_bias: Tensor::zeros(&[s[0]]),
            weight,
            bias,
        })
    }
}

impl Dense {
    pub fn from_params(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 2 || bias.shape() != [s[0]] {
            return Err(Error::Checkpoint(format!("bad dense parameter shapes {s:?}")));
        }
        Ok(Dense {
            in_features: s[1],
            out_features: s[0],
            grad_weight: Tensor::zeros(&s),
            grad_bias: Tensor::zeros(&[s[0]]),
            weight,
            bias,
        })
    }
}
