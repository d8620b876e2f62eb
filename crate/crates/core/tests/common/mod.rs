//! Central finite-difference checks shared by the gradient-check and
//! acceptance test targets.

#![allow(dead_code)]

use patchdrop::nn::{cross_entropy_batch, Conv2d, Dense, Layer, Network, Tensor};
use patchdrop::rng::{stream_at, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub const H: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;

/// How the scalar loss is formed from the network output.
#[derive(Clone, Copy)]
pub enum Loss {
    /// `sum_i w_i y_i` with fixed random weights.
    Projection,
    /// Mean cross-entropy against fixed labels; output must be probabilities.
    CrossEntropy,
}

pub struct Case {
    pub name: &'static str,
    pub net: Network,
    pub input: Tensor,
    pub loss: Loss,
    weights: Tensor,
    labels: Vec<usize>,
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| n.sample(rng))
}

/// Magnitudes in [0.05, 1] with random sign, so no ReLU input sits within `H` of its kink.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn case(name: &'static str, input_shape: &[usize], layers: Vec<Layer>, loss: Loss, rng: &mut Rng) -> Case {
    let mut net = Network::new(&input_shape[1..], layers).unwrap();
    for p in net.params_mut() {
        *p = normal(p.shape(), 0.5, rng);
    }
    let input = if name == "relu" { away_from_zero(input_shape, rng) } else { normal(input_shape, 1.0, rng) };
    let out = net.output_shape();
    let mut out_shape = vec![input_shape[0]];
    out_shape.extend(out);
    let classes = *out_shape.last().unwrap();
    Case {
        name,
        net,
        input,
        loss,
        weights: normal(&out_shape, 1.0, rng),
        labels: (0..input_shape[0]).map(|_| rng.random_range(0..classes)).collect(),
    }
}

/// One case per layer type plus two sigmoid-activated composites shaped like
/// the classifier and the policy.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = stream_at(seed, 0x6c);
    let r = &mut rng;
    vec![
        case("conv2d-k3-s1-p1", &[2, 3, 6, 6], vec![Layer::Conv2d(Conv2d::new(3, 4, 3, 1, 1, r))], Loss::Projection, r),
        case("conv2d-k3-s2-p1", &[2, 2, 7, 7], vec![Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 1, r))], Loss::Projection, r),
        case("conv2d-k3-s1-p0", &[2, 2, 5, 5], vec![Layer::Conv2d(Conv2d::new(2, 2, 3, 1, 0, r))], Loss::Projection, r),
        case("conv2d-k1", &[2, 3, 4, 4], vec![Layer::Conv2d(Conv2d::new(3, 2, 1, 1, 0, r))], Loss::Projection, r),
        case("dense", &[3, 5], vec![Layer::Dense(Dense::new(5, 4, r))], Loss::Projection, r),
        case("relu", &[2, 3, 4, 4], vec![Layer::Relu], Loss::Projection, r),
        case("sigmoid", &[2, 3, 4, 4], vec![Layer::Sigmoid], Loss::Projection, r),
        case("softmax", &[3, 6], vec![Layer::Softmax], Loss::Projection, r),
        case("flatten", &[2, 2, 3, 3], vec![Layer::Flatten], Loss::Projection, r),
        case("global-average-pool", &[2, 3, 4, 4], vec![Layer::GlobalAvgPool], Loss::Projection, r),
        case(
            "classifier-composite",
            &[2, 1, 8, 8],
            vec![
                Layer::Conv2d(Conv2d::new(1, 4, 3, 2, 1, r)),
                Layer::Sigmoid,
                Layer::Conv2d(Conv2d::new(4, 6, 3, 2, 1, r)),
                Layer::Sigmoid,
                Layer::GlobalAvgPool,
                Layer::Dense(Dense::new(6, 4, r)),
                Layer::Softmax,
            ],
            Loss::CrossEntropy,
            r,
        ),
        case(
            "policy-composite",
            &[2, 1, 8, 8],
            vec![
                Layer::Conv2d(Conv2d::new(1, 4, 3, 1, 1, r)),
                Layer::Sigmoid,
                Layer::Conv2d(Conv2d::new(4, 4, 3, 2, 1, r)),
                Layer::Sigmoid,
                Layer::Flatten,
                Layer::Dense(Dense::new(64, 16, r)),
                Layer::Sigmoid,
            ],
            Loss::Projection,
            r,
        ),
    ]
}

impl Case {
    fn loss_and_grad(&self, y: &Tensor) -> (f64, Tensor) {
        match self.loss {
            Loss::Projection => {
                let l = y.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum();
                (l, self.weights.clone())
            }
            Loss::CrossEntropy => cross_entropy_batch(y, &self.labels).unwrap(),
        }
    }

    fn loss_at(&self, net: &Network, x: &Tensor) -> f64 {
        self.loss_and_grad(&net.infer(x).unwrap()).0
    }

    /// Largest relative error `|g - g_fd| / (|g| + |g_fd|)` over the input
    /// gradient and every parameter tensor, norms taken per tensor.
    pub fn max_relative_error(&mut self) -> f64 {
        let y = self.net.forward(&self.input).unwrap();
        let (_, dy) = self.loss_and_grad(&y);
        let dx = self.net.backward(&dy).unwrap();
        let analytic: Vec<Tensor> = std::iter::once(dx).chain(self.net.grads().into_iter().cloned()).collect();

        let mut numeric = Vec::new();
        let mut x = self.input.clone();
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let v = x.data()[i];
            x.data_mut()[i] = v + H;
            let up = self.loss_at(&self.net, &x);
            x.data_mut()[i] = v - H;
            let down = self.loss_at(&self.net, &x);
            x.data_mut()[i] = v;
            g.data_mut()[i] = (up - down) / (2.0 * H);
        }
        numeric.push(g);
        let mut net = self.net.clone();
        let count = net.params().len();
        for t in 0..count {
            let n = net.params()[t].len();
            let mut g = Tensor::zeros(net.params()[t].shape());
            for i in 0..n {
                let v = net.params()[t].data()[i];
                net.params_mut()[t].data_mut()[i] = v + H;
                let up = self.loss_at(&net, &self.input);
                net.params_mut()[t].data_mut()[i] = v - H;
                let down = self.loss_at(&net, &self.input);
                net.params_mut()[t].data_mut()[i] = v;
                g.data_mut()[i] = (up - down) / (2.0 * H);
            }
            numeric.push(g);
        }

        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| {
                let diff: f64 = a.data().iter().zip(n.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = norm(a) + norm(n);
                if denom < 1e-12 { diff } else { diff / denom }
            })
            .fold(0.0, f64::max)
    }
}

/// Worst relative error per case name over seeds `0..SEEDS`.
pub fn worst_errors() -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..SEEDS {
        for (i, mut c) in cases(seed).into_iter().enumerate() {
            let e = c.max_relative_error();
            if worst.len() <= i {
                worst.push((c.name, e));
            } else {
                worst[i].1 = worst[i].1.max(e);
            }
        }
    }
    worst
}
