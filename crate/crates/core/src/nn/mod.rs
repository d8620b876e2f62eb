//! Minimal CPU network engine: layers, reverse-mode gradients, Adam, checkpoints.
//!
//! Activations are batched NCHW (or `[batch, features]`) and stored row-major.

mod adam;
mod checkpoint;
mod layers;
mod loss;
mod tensor;

pub use adam::AdamState;
pub use layers::{Conv2d, Dense, Layer};
pub use loss::{cross_entropy, cross_entropy_batch};
pub use tensor::Tensor;


use crate::error::{Error, Result};

/// Ordered stack of layers with a fixed per-sample input shape.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Activations of the last `forward`: `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Option<Vec<Tensor>>,
    input_grad: Option<Tensor>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl Network {
    pub fn new(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "layer {i} ({}) cannot accept per-sample shape {shape:?}",
                    layer.name()
                ))
            })?;
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            acts: None,
            input_grad: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers.iter().fold(self.input_shape.clone(), |s, l| {
            l.output_shape(&s).expect("validated at construction")
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            let layer = self.layers.first().map_or("input", |l| l.name());
            let mut expected = vec![s.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape(format!("layer 0 ({layer})"), &expected, s));
        }
        Ok(())
    }

    /// Inference without caching. Takes a batched input `[batch, ..input_shape]`.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    /// Forward pass that caches activations for a later [`Network::backward`].
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let y = layer.forward(acts.last().expect("nonempty"));
            acts.push(y);
        }
        let out = acts.last().expect("nonempty").clone();
        self.acts = Some(acts);
        Ok(out)
    }

    /// Overwrites every parameter gradient with d(loss)/d(param) for the cached
    /// batch, where `output_grad` is d(loss)/d(output). Returns d(loss)/d(input).
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<Tensor> {
        let acts = self.acts.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let out = acts.last().expect("nonempty");
        if out.shape() != output_grad.shape() {
            return Err(Error::shape("backward output gradient", out.shape(), output_grad.shape()));
        }
        let mut grad = output_grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            grad = layer.backward(&acts[i], &acts[i + 1], &grad);
        }
        self.input_grad = Some(grad.clone());
        Ok(grad)
    }

    pub fn input_grad(&self) -> Option<&Tensor> {
        self.input_grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn grads(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::grads).collect()
    }

    pub(crate) fn param_grad_pairs(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        self.layers.iter_mut().flat_map(Layer::param_grad_pairs).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Copies parameters from a network with identical layer structure.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<()> {
        let src = other.params();
        let dst = self.params_mut();
        if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::InvalidArgument(
                "cannot copy parameters between different architectures".into(),
            ));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    /// Flat copy of all parameters, mainly for freeze checks.
    pub fn param_vector(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn identity_network_returns_input() {
        let net = Network::new(&[2, 3], vec![]).unwrap();
        let x = Tensor::from_fn(&[1, 2, 3], |i| i as f64 - 2.5);
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut net = Network::new(&[5], vec![Layer::Sigmoid]).unwrap();
        let y = net.forward(&Tensor::zeros(&[3, 5])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn one_by_one_conv_scales() {
        let mut rng = stream(0, Stream::Init);
        let mut conv = Conv2d::new(1, 1, 1, 1, 0, &mut rng);
        conv.weight.data_mut()[0] = 2.0;
        let net = Network::new(&[1, 2, 2], vec![Layer::Conv2d(conv)]).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(net.infer(&x).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = stream(0, Stream::Init);
        let net = Network::new(&[4], vec![Layer::Dense(Dense::new(4, 2, &mut rng))]).unwrap();
        let err = net.infer(&Tensor::zeros(&[1, 5])).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
    }

    #[test]
    fn construction_rejects_incompatible_chain() {
        let mut rng = stream(0, Stream::Init);
        let err = Network::new(&[1, 4, 4], vec![Layer::Dense(Dense::new(16, 2, &mut rng))]).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn backward_before_forward_rejected() {
        let mut net = Network::new(&[3], vec![Layer::Relu]).unwrap();
        assert!(matches!(
            net.backward(&Tensor::zeros(&[1, 3])),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let mut rng = stream(3, Stream::Init);
        let mut net = Network::new(
            &[2, 4, 4],
            vec![
                Layer::Conv2d(Conv2d::new(2, 3, 3, 1, 1, &mut rng)),
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense(Dense::new(48, 5, &mut rng)),
            ],
        )
        .unwrap();
        let x = Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f64 * 0.37).sin());
        let y = net.forward(&x).unwrap();
        net.backward(&Tensor::zeros(y.shape())).unwrap();
        assert!(net.grads().iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dense_weight_grad_is_outer_product() {
        let mut rng = stream(1, Stream::Init);
        let mut net = Network::new(&[3], vec![Layer::Dense(Dense::new(3, 2, &mut rng))]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        net.forward(&x).unwrap();
        let dy = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        net.backward(&dy).unwrap();
        let dw = net.grads()[0].data().to_vec();
        assert_eq!(dw, vec![3.0, -6.0, 1.5, -1.0, 2.0, -0.5]);
        assert_eq!(net.grads()[1].data(), &[3.0, -1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let net = Network::new(&[7], vec![Layer::Softmax]).unwrap();
        let x = Tensor::from_fn(&[4, 7], |i| (i as f64 * 1.3).cos() * 20.0);
        let y = net.infer(&x).unwrap();
        for r in 0..4 {
            assert!((y.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_outputs_in_open_unit_interval() {
        let net = Network::new(&[5], vec![Layer::Sigmoid]).unwrap();
        let x = Tensor::new(vec![1, 5], vec![-30.0, -1.0, 0.0, 1.0, 30.0]).unwrap();
        assert!(net.infer(&x).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn copy_params_requires_same_architecture() {
        let mut rng = stream(1, Stream::Init);
        let a = Network::new(&[3], vec![Layer::Dense(Dense::new(3, 2, &mut rng))]).unwrap();
        let mut b = Network::new(&[3], vec![Layer::Dense(Dense::new(3, 2, &mut rng))]).unwrap();
        let mut c = Network::new(&[4], vec![Layer::Dense(Dense::new(4, 2, &mut rng))]).unwrap();
        b.copy_params_from(&a).unwrap();
        assert_eq!(a.param_vector(), b.param_vector());
        assert!(c.copy_params_from(&a).is_err());
    }
}
