//! The `HCRW1` weight-file format.
//!
//! ```text
//! magic        5 bytes  "HCRW1"
//! layer count  u32 LE
//! per layer:
//!   kind       u8       0=Affine 1=ReLU 2=Flatten 3=Softmax 4=Conv2D 5=MaxPool2D
//!   n_shape    u32 LE
//!   shape      n_shape x u32 LE
//!   payload    f64 LE, weights then bias (Affine and Conv2D only)
//! ```
//!
//! Shape integers: Affine `[in, out]`; Conv2D `[in_c, out_c, kh, kw, stride, padding]`;
//! MaxPool2D `[kh, kw, stride_h, stride_w]`; the other kinds carry none.
//! The feature boundary is not stored: it is placed at the last affine layer.

use std::fs;
use std::path::Path;

use super::{Affine, Conv2d, Layer, MaxPool2d, Model};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"HCRW1";

const TAG_AFFINE: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_FLATTEN: u8 = 2;
const TAG_SOFTMAX: u8 = 3;
const TAG_CONV2D: u8 = 4;
const TAG_MAXPOOL2D: u8 = 5;

pub fn write_weights(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        let (tag, shape, payload): (u8, Vec<usize>, Vec<&[f64]>) = match layer {
            Layer::Affine(a) => (TAG_AFFINE, vec![a.in_dim, a.out_dim], vec![&a.weight, &a.bias]),
            Layer::Relu => (TAG_RELU, vec![], vec![]),
            Layer::Flatten => (TAG_FLATTEN, vec![], vec![]),
            Layer::Softmax => (TAG_SOFTMAX, vec![], vec![]),
            Layer::Conv2d(c) => (
                TAG_CONV2D,
                vec![c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride, c.padding],
                vec![&c.weight, &c.bias],
            ),
            Layer::MaxPool2d(p) => (
                TAG_MAXPOOL2D,
                vec![p.kernel_h, p.kernel_w, p.stride_h, p.stride_w],
                vec![],
            ),
        };
        out.push(tag);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for block in payload {
            for x in block {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights_from(&bytes, path)
}

pub fn read_weights(bytes: &[u8]) -> Result<Model> {
    read_weights_from(bytes, Path::new("<memory>"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.path, format!("{what} size overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn read_weights_from(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(5, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::format(path, "bad magic, expected HCRW1"));
    }
    let count = cur.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for index in 0..count {
        let tag = cur.u8("layer kind")?;
        let n_shape = cur.u32("shape count")? as usize;
        let mut shape = Vec::with_capacity(n_shape.min(16));
        for _ in 0..n_shape {
            shape.push(cur.u32("shape")? as usize);
        }
        let bad_shape = |expected: usize| {
            Error::format(
                path,
                format!("layer {index}: kind {tag} needs {expected} shape integers, got {n_shape}"),
            )
        };
        let inconsistent = |e: Error| Error::format(path, format!("layer {index}: {e}"));
        let layer = match tag {
            TAG_AFFINE => {
                let [i, o] = shape[..] else { return Err(bad_shape(2)) };
                let w = cur.f64s(i.saturating_mul(o), "affine weights")?;
                let b = cur.f64s(o, "affine bias")?;
                Layer::Affine(Affine::new(i, o, w, b).map_err(inconsistent)?)
            }
            TAG_RELU | TAG_FLATTEN | TAG_SOFTMAX => {
                if n_shape != 0 {
                    return Err(bad_shape(0));
                }
                match tag {
                    TAG_RELU => Layer::Relu,
                    TAG_FLATTEN => Layer::Flatten,
                    _ => Layer::Softmax,
                }
            }
            TAG_CONV2D => {
                let [ic, oc, kh, kw, stride, pad] = shape[..] else { return Err(bad_shape(6)) };
                let n = oc.saturating_mul(ic).saturating_mul(kh).saturating_mul(kw);
                let w = cur.f64s(n, "conv2d weights")?;
                let b = cur.f64s(oc, "conv2d bias")?;
                Layer::Conv2d(
                    Conv2d::with_geometry(ic, oc, kh, kw, stride, pad, w, b).map_err(inconsistent)?,
                )
            }
            TAG_MAXPOOL2D => {
                let [kh, kw, sh, sw] = shape[..] else { return Err(bad_shape(4)) };
                Layer::MaxPool2d(MaxPool2d::new(kh, kw, sh, sw).map_err(inconsistent)?)
            }
            other => return Err(Error::format(path, format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after last layer", bytes.len() - cur.pos),
        ));
    }
    if layers.iter().flat_map(param_slices).any(|x| !x.is_finite()) {
        return Err(Error::format(path, "non-finite parameter"));
    }
    Model::with_default_boundary(layers).map_err(|e| Error::format(path, e.to_string()))
}

fn param_slices(layer: &Layer) -> impl Iterator<Item = &f64> {
    let (w, b): (&[f64], &[f64]) = match layer {
        Layer::Affine(a) => (&a.weight, &a.bias),
        Layer::Conv2d(c) => (&c.weight, &c.bias),
        _ => (&[], &[]),
    };
    w.iter().chain(b)
}
