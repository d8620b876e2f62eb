//! Small plain CNNs used for every stream.

use crate::nn::{Conv2d, Dense, Layer, Network};
use crate::grid::NUM_PATCHES;
use crate::rng::Rng;

fn first_stride(height: usize) -> usize {
    if height >= 16 {
        2
    } else {
        1
    }
}

fn trunk(input: &[usize], rng: &mut Rng) -> Vec<Layer> {
    vec![
        Layer::Conv2d(Conv2d::new(input[0], 8, 3, first_stride(input[1]), 1, rng)),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(8, 16, 3, 2, 1, rng)),
        Layer::Relu,
        Layer::GlobalAvgPool,
    ]
}

/// Conv-conv-pool-dense classifier ending in softmax. `input` is `[C, H, W]`.
pub fn classifier(input: &[usize], classes: usize, rng: &mut Rng) -> Network {
    let mut layers = trunk(input, rng);
    layers.push(Layer::Dense(Dense::new(16, classes, rng)));
    layers.push(Layer::Softmax);
    Network::new(input, layers).expect("classifier architecture is consistent")
}

/// Same trunk as [`classifier`] but emitting raw logits, applied to one patch.
pub fn patch_logits(input: &[usize], classes: usize, rng: &mut Rng) -> Network {
    let mut layers = trunk(input, rng);
    layers.push(Layer::Dense(Dense::new(16, classes, rng)));
    Network::new(input, layers).expect("patch network architecture is consistent")
}

/// Policy network over the LR image: one sigmoid output per patch.
///
/// The head flattens instead of pooling so the output keeps track of where
/// evidence sits in the image.
pub fn policy(input: &[usize], rng: &mut Rng) -> Network {
    let c1 = Conv2d::new(input[0], 8, 3, 1, 1, rng);
    let c2 = Conv2d::new(8, 8, 3, 2, 1, rng);
    let (h, w) = (input[1].div_ceil(2), input[2].div_ceil(2));
    let mut head = Dense::new(8 * h * w, NUM_PATCHES, rng);
    head.weight.data_mut().iter_mut().for_each(|v| *v *= 0.1);
    let layers = vec![
        Layer::Conv2d(c1),
        Layer::Relu,
        Layer::Conv2d(c2),
        Layer::Relu,
        Layer::Flatten,
        Layer::Dense(head),
        Layer::Sigmoid,
    ];
    Network::new(input, layers).expect("policy architecture is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn output_shapes() {
        let mut rng = stream(0, Stream::Init);
        assert_eq!(classifier(&[3, 32, 32], 10, &mut rng).output_shape(), vec![10]);
        assert_eq!(classifier(&[1, 4, 4], 4, &mut rng).output_shape(), vec![4]);
        assert_eq!(patch_logits(&[1, 8, 8], 4, &mut rng).output_shape(), vec![4]);
        assert_eq!(policy(&[1, 8, 8], &mut rng).output_shape(), vec![16]);
        assert_eq!(policy(&[3, 16, 16], &mut rng).output_shape(), vec![16]);
        assert_eq!(policy(&[1, 4, 4], &mut rng).output_shape(), vec![16]);
    }
}
