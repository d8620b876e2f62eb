//! Training-time augmentation: zero-padded random crop and horizontal flip.

use rand::Rng as _;

use crate::nn::Tensor;
use crate::rng::Rng;

pub const CROP_PADDING: usize = 4;

/// Crops an `[C, H, W]` window at offset `(dy, dx)` from the image zero-padded
/// by `pad` on every side.
pub fn crop(image: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let y = (i / w % h + dy) as isize - pad as isize;
        let x = (i % w + dx) as isize - pad as isize;
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[ch * h * w + y as usize * w + x as usize]
        }
    })
}

pub fn hflip(image: &Tensor) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let row = i / w;
        src[row * w + (w - 1 - i % w)]
    })
}

/// Random crop with [`CROP_PADDING`] and a flip with probability 0.5.
pub fn augment(image: &Tensor, rng: &mut Rng) -> Tensor {
    let dy = rng.random_range(0..=2 * CROP_PADDING);
    let dx = rng.random_range(0..=2 * CROP_PADDING);
    let out = crop(image, CROP_PADDING, dy, dx);
    if rng.random::<f64>() < 0.5 {
        hflip(&out)
    } else {
        out
    }
}
