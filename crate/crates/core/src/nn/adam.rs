use super::{Network, Tensor};
use crate::error::{Error, Result};

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update using the gradients stored in `net`.
    /// Gradients are validated before anything is modified.
    pub fn step(&mut self, net: &mut Network) -> Result<()> {
        let pairs = net.param_grad_pairs();
        if pairs.len() != self.first.len()
            || pairs.iter().zip(&self.first).any(|((p, _), m)| p.shape() != m.shape())
        {
            return Err(Error::InvalidArgument(
                "optimizer state does not match network parameters".into(),
            ));
        }
        if let Some(i) = pairs.iter().position(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in pairs.into_iter().zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let it = param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
