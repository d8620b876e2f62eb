//! Second-step action: class prediction from the masked HR image and the LR image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Tensor};

/// Softmax output over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs(pub Vec<f64>);

impl ClassProbs {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn uniform(classes: usize) -> Self {
        ClassProbs(vec![1.0 / classes as f64; classes])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub confidence: f64,
}

/// How the final prediction is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierMode {
    /// HR stream on the masked image only, even when nothing was sampled.
    HrOnly,
    /// HR and LR streams fused with weight `S / P` on the HR stream.
    TwoStream,
}

fn unbatched(net: &Network, x: &Tensor) -> Result<ClassProbs> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let out = net.infer(&x.clone().reshape(&shape)?)?;
    Ok(ClassProbs(out.row_slice(0).to_vec()))
}

/// Class distribution of the HR stream for one masked image `[C, H, W]`.
pub fn classify_hr(net_h: &Network, x_h_m: &Tensor) -> Result<ClassProbs> {
    unbatched(net_h, x_h_m)
}

/// Class distribution of the LR stream for one LR image `[C, h, w]`.
pub fn classify_lr(net_l: &Network, x_l: &Tensor) -> Result<ClassProbs> {
    unbatched(net_l, x_l)
}

/// Batched inference returning one distribution per row.
pub fn classify_batch(net: &Network, x: &Tensor) -> Result<Vec<ClassProbs>> {
    let out = net.infer(x)?;
    Ok((0..out.rows()).map(|i| ClassProbs(out.row_slice(i).to_vec())).collect())
}

/// `(S/P) * hr + (1 - S/P) * lr`.
pub fn fuse(hr: &ClassProbs, lr: &ClassProbs, sampled: usize, patches: usize) -> Result<ClassProbs> {
    if hr.len() != lr.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot fuse {} HR classes with {} LR classes",
            hr.len(),
            lr.len()
        )));
    }
    if patches == 0 || sampled > patches {
        return Err(Error::InvalidArgument(format!("sampled {sampled} of {patches} patches")));
    }
    // Endpoints return the stream itself so S = 0 and S = P are exact.
    if sampled == 0 {
        return Ok(lr.clone());
    }
    if sampled == patches {
        return Ok(hr.clone());
    }
    let w = sampled as f64 / patches as f64;
    Ok(ClassProbs(
        hr.0.iter().zip(&lr.0).map(|(h, l)| w * h + (1.0 - w) * l).collect(),
    ))
}

/// Arg-max with ties resolved to the lowest class index.
pub fn predict(fused: &ClassProbs) -> Prediction {
    let mut best = 0;
    for (i, &p) in fused.0.iter().enumerate() {
        if p > fused.0[best] {
            best = i;
        }
    }
    Prediction {
        class: best,
        confidence: fused.0.get(best).copied().unwrap_or(0.0),
    }
}
