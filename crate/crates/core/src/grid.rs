//! Fixed 4x4 patch grid over an image, masking, and box downsampling.
//!
//! Patch IDs run row-major: ID 0 is top-left, 3 top-right, 12 bottom-left, 15 bottom-right.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const GRID_ROWS: usize = 4;
pub const GRID_COLS: usize = 4;
pub const NUM_PATCHES: usize = GRID_ROWS * GRID_COLS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    height: usize,
    width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || !height.is_multiple_of(GRID_ROWS) || !width.is_multiple_of(GRID_COLS) {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is not divisible into a {GRID_ROWS}x{GRID_COLS} grid"
            )));
        }
        Ok(PatchGrid { height, width })
    }

    /// Grid for a `[C, H, W]` image tensor.
    pub fn for_image(image: &Tensor) -> Result<Self> {
        match image.shape() {
            [_, h, w] => Self::new(*h, *w),
            s => Err(Error::shape("patch grid image", &[0, 0, 0], s)),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch_height(&self) -> usize {
        self.height / GRID_ROWS
    }

    pub fn patch_width(&self) -> usize {
        self.width / GRID_COLS
    }

    pub fn num_patches(&self) -> usize {
        NUM_PATCHES
    }

    /// `(row0, col0)` pixel origin of a patch.
    pub fn patch_origin(&self, id: usize) -> Result<(usize, usize)> {
        check_id(id)?;
        Ok((
            (id / GRID_COLS) * self.patch_height(),
            (id % GRID_COLS) * self.patch_width(),
        ))
    }

    fn check_image(&self, image: &Tensor) -> Result<usize> {
        match image.shape() {
            [c, h, w] if *h == self.height && *w == self.width => Ok(*c),
            s => Err(Error::shape("patch grid image", &[s.first().copied().unwrap_or(1), self.height, self.width], s)),
        }
    }
}

fn check_id(id: usize) -> Result<()> {
    if id >= NUM_PATCHES {
        return Err(Error::InvalidArgument(format!("patch id {id} outside 0..{NUM_PATCHES}")));
    }
    Ok(())
}

/// Binary keep/drop decision per patch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchMask {
    bits: Vec<bool>,
}

impl PatchMask {
    pub fn new(bits: Vec<bool>) -> Self {
        PatchMask { bits }
    }

    pub fn all(len: usize, keep: bool) -> Self {
        PatchMask { bits: vec![keep; len] }
    }

    pub fn from_ids(len: usize, ids: &[usize]) -> Result<Self> {
        let mut bits = vec![false; len];
        for &id in ids {
            *bits
                .get_mut(id)
                .ok_or_else(|| Error::InvalidArgument(format!("patch id {id} outside 0..{len}")))? = true;
        }
        Ok(PatchMask { bits })
    }

    /// Mask from the low `len` bits of `code` (bit i of `code` is patch i).
    pub fn from_code(len: usize, code: u64) -> Self {
        PatchMask {
            bits: (0..len).map(|i| code >> i & 1 == 1).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, id: usize) -> bool {
        self.bits[id]
    }

    /// Number of kept patches, `S`.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn kept_ids(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn is_subset_of(&self, other: &PatchMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Keeps pixels of kept patches and zeroes the rest.
pub fn apply_mask(hr: &Tensor, mask: &PatchMask, grid: &PatchGrid) -> Result<Tensor> {
    let channels = grid.check_image(hr)?;
    if mask.len() != NUM_PATCHES {
        return Err(Error::InvalidArgument(format!(
            "mask has {} bits, grid has {NUM_PATCHES} patches",
            mask.len()
        )));
    }
    let (ph, pw, w) = (grid.patch_height(), grid.patch_width(), grid.width);
    let mut out = hr.clone();
    let plane = grid.height * w;
    for id in (0..NUM_PATCHES).filter(|&id| !mask.get(id)) {
        let (r0, c0) = grid.patch_origin(id)?;
        for c in 0..channels {
            for y in r0..r0 + ph {
                let start = c * plane + y * w + c0;
                out.data_mut()[start..start + pw].fill(0.0);
            }
        }
    }
    Ok(out)
}

/// `ds x ds` box-average pooling of a `[C, H, W]` image.
pub fn downsample(hr: &Tensor, ds: usize) -> Result<Tensor> {
    let (c, h, w) = match hr.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("downsample", &[0, 0, 0], s)),
    };
    if ds == 0 || h % ds != 0 || w % ds != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} not divisible by downsampling ratio {ds}"
        )));
    }
    if ds == 1 {
        return Ok(hr.clone());
    }
    let (oh, ow) = (h / ds, w / ds);
    let inv = 1.0 / (ds * ds) as f64;
    let src = hr.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let dst = out.data_mut();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0;
                for y in oy * ds..(oy + 1) * ds {
                    let row = ch * h * w + y * w;
                    sum += src[row + ox * ds..row + (ox + 1) * ds].iter().sum::<f64>();
                }
                dst[ch * oh * ow + oy * ow + ox] = sum * inv;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour replication, the right inverse of [`downsample`] on block means.
pub fn upsample_replicate(lr: &Tensor, ds: usize) -> Result<Tensor> {
    let (c, h, w) = match lr.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("upsample", &[0, 0, 0], s)),
    };
    let (oh, ow) = (h * ds, w * ds);
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let y = i / ow % oh;
        let x = i % ow;
        lr.data()[ch * h * w + (y / ds) * w + x / ds]
    }))
}

/// Euclidean distance in pixels from a patch centre to the image centre.
pub fn patch_center_distance(id: usize, grid: &PatchGrid) -> Result<f64> {
    let (r0, c0) = grid.patch_origin(id)?;
    let cy = r0 as f64 + grid.patch_height() as f64 / 2.0;
    let cx = c0 as f64 + grid.patch_width() as f64 / 2.0;
    let dy = cy - grid.height as f64 / 2.0;
    let dx = cx - grid.width as f64 / 2.0;
    Ok((dy * dy + dx * dx).sqrt())
}

/// The 16 patches of a `[C, H, W]` image in ID order, each `[C, H/4, W/4]`.
pub fn extract_patches(hr: &Tensor, grid: &PatchGrid) -> Result<Vec<Tensor>> {
    let channels = grid.check_image(hr)?;
    let (ph, pw, w) = (grid.patch_height(), grid.patch_width(), grid.width);
    let plane = grid.height * w;
    (0..NUM_PATCHES)
        .map(|id| {
            let (r0, c0) = grid.patch_origin(id)?;
            let mut data = Vec::with_capacity(channels * ph * pw);
            for c in 0..channels {
                for y in r0..r0 + ph {
                    let start = c * plane + y * w + c0;
                    data.extend_from_slice(&hr.data()[start..start + pw]);
                }
            }
            Tensor::new(vec![channels, ph, pw], data)
        })
        .collect()
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches(patches: &[Tensor], grid: &PatchGrid) -> Result<Tensor> {
    if patches.len() != NUM_PATCHES {
        return Err(Error::InvalidArgument(format!("expected {NUM_PATCHES} patches, got {}", patches.len())));
    }
    let channels = patches[0].shape()[0];
    let (ph, pw, w) = (grid.patch_height(), grid.patch_width(), grid.width);
    let mut out = Tensor::zeros(&[channels, grid.height, w]);
    let plane = grid.height * w;
    for (id, patch) in patches.iter().enumerate() {
        if patch.shape() != [channels, ph, pw] {
            return Err(Error::shape("assemble patch", &[channels, ph, pw], patch.shape()));
        }
        let (r0, c0) = grid.patch_origin(id)?;
        for c in 0..channels {
            for y in 0..ph {
                let dst = c * plane + (r0 + y) * w + c0;
                let src = c * ph * pw + y * pw;
                out.data_mut()[dst..dst + pw].copy_from_slice(&patch.data()[src..src + pw]);
            }
        }
    }
    Ok(out)
}
