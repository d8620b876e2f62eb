//! Binary checkpoint format.
//!
//! ```text
//! "PDNN"            magic
//! u32               format version (1)
//! u32, u32*         input rank, input dims
//! u32               layer count
//! per layer:
//!   u8              tag (0 conv2d, 1 dense, 2 relu, 3 sigmoid, 4 softmax, 5 flatten, 6 global-average-pool)
//!   u32, u32*       hyperparameter count, values (conv2d: stride, padding)
//!   u32             parameter tensor count
//!   per tensor:     u32 rank, u32 dims, f32 values
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Conv2d, Dense, Layer, Network, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PDNN";
pub const FORMAT_VERSION: u32 = 1;

fn tag(layer: &Layer) -> u8 {
    match layer {
        Layer::Conv2d(_) => 0,
        Layer::Dense(_) => 1,
        Layer::Relu => 2,
        Layer::Sigmoid => 3,
        Layer::Softmax => 4,
        Layer::Flatten => 5,
        Layer::GlobalAvgPool => 6,
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {n}")));
        }
        (0..n).map(|_| self.u32()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.dims()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Network {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION as usize);
        put_u32(&mut buf, self.input_shape().len());
        self.input_shape().iter().for_each(|&d| put_u32(&mut buf, d));
        put_u32(&mut buf, self.layers().len());
        for layer in self.layers() {
            buf.push(tag(layer));
            let hyper = match layer {
                Layer::Conv2d(c) => vec![c.stride, c.padding],
                _ => vec![],
            };
            put_u32(&mut buf, hyper.len());
            hyper.iter().for_each(|&h| put_u32(&mut buf, h));
            let params = layer.params();
            put_u32(&mut buf, params.len());
            for p in params {
                put_u32(&mut buf, p.shape().len());
                p.shape().iter().for_each(|&d| put_u32(&mut buf, d));
                for &v in p.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected PDNN".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let input_shape = r.dims()?;
        let count = r.u32()?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let t = r.u8()?;
            let hyper = r.dims()?;
            let n = r.u32()?;
            let mut params = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            let expect_params = |k: usize| {
                if params.len() == k {
                    Ok(())
                } else {
                    Err(Error::Checkpoint(format!("layer {i}: expected {k} tensors, found {}", params.len())))
                }
            };
            let layer = match t {
                0 => {
                    expect_params(2)?;
                    if hyper.len() != 2 {
                        return Err(Error::Checkpoint(format!("layer {i}: conv2d needs stride and padding")));
                    }
                    let bias = params.pop().expect("len 2");
                    let weight = params.pop().expect("len 2");
                    Layer::Conv2d(Conv2d::from_params(hyper[0], hyper[1], weight, bias)?)
                }
                1 => {
                    expect_params(2)?;
                    let bias = params.pop().expect("len 2");
                    let weight = params.pop().expect("len 2");
                    Layer::Dense(Dense::from_params(weight, bias)?)
                }
                2..=6 => {
                    expect_params(0)?;
                    match t {
                        2 => Layer::Relu,
                        3 => Layer::Sigmoid,
                        4 => Layer::Softmax,
                        5 => Layer::Flatten,
                        _ => Layer::GlobalAvgPool,
                    }
                }
                other => return Err(Error::Checkpoint(format!("layer {i}: unknown tag {other}"))),
            };
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Network::new(&input_shape, layers).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Network::from_bytes(&bytes)
    }
}
