//! IDX file reading and per-pixel normalization.
//!
//! MNIST is distributed gzip-compressed; decompress first (`gunzip *.gz`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Dataset;

pub const MNIST_MEAN: f64 = 0.1037;
pub const MNIST_STD: f64 = 0.3081;

/// Raw contents of an unsigned-byte IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxArray {
    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Item `i` as a real tensor of shape `dims[1..]` with raw byte values.
    pub fn item(&self, i: usize) -> Result<Tensor> {
        let shape = &self.dims[1..];
        let size: usize = shape.iter().product();
        if i >= self.count() {
            return Err(Error::invalid(format!("item {i} out of range 0..{}", self.count())));
        }
        let data = self.bytes[i * size..(i + 1) * size].iter().map(|&b| b as f64).collect();
        Tensor::from_data(shape, data)
    }
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(path, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(path, format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::format(path, "IDX file has no dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "IDX dimensions overflow"))?;
    let payload = &bytes[header..];
    if payload.len() < total {
        return Err(Error::format(
            path,
            format!("truncated IDX payload: {} of {total} bytes", payload.len()),
        ));
    }
    if payload.len() > total {
        return Err(Error::format(path, "trailing bytes after IDX payload"));
    }
    Ok(IdxArray { dims, bytes: payload.to_vec() })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

/// Per-pixel affine map from raw bytes to network inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// `(b / 255 - mean) / std`.
    Mnist { mean: f64, std: f64 },
    /// `[0, 255] -> [-1, 1]`.
    Signed,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::Mnist { mean: MNIST_MEAN, std: MNIST_STD }
    }
}

impl Normalization {
    /// Maps a pixel in `[0, 1]` to its normalized value.
    pub fn apply(&self, p: f64) -> f64 {
        match *self {
            Normalization::Mnist { mean, std } => (p - mean) / std,
            Normalization::Signed => 2.0 * p - 1.0,
        }
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn invert(&self, x: f64) -> f64 {
        match *self {
            Normalization::Mnist { mean, std } => x * std + mean,
            Normalization::Signed => (x + 1.0) / 2.0,
        }
    }

    /// Raw bytes (0..=255) to normalized inputs.
    pub fn normalize(&self, raw: &Tensor) -> Tensor {
        self.map(raw, |b| self.apply(b / 255.0))
    }

    /// Normalized inputs back to pixel intensities in `[0, 1]` (unclipped).
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.map(x, |v| self.invert(v))
    }

    fn map(&self, t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts_unchecked(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }
}

/// Pairs an image file and a label file into a dataset of `(1, H, W)` inputs.
pub fn load_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>, norm: Normalization) -> Result<Dataset> {
    let img = read_idx(images.as_ref())?;
    let lab = read_idx(labels.as_ref())?;
    if img.dims.len() != 3 {
        return Err(Error::format(images.as_ref(), format!("expected (N, H, W) images, got {:?}", img.dims)));
    }
    if lab.dims.len() != 1 || lab.count() != img.count() {
        return Err(Error::format(
            labels.as_ref(),
            format!("expected {} labels, got dims {:?}", img.count(), lab.dims),
        ));
    }
    let (h, w) = (img.dims[1], img.dims[2]);
    let mut inputs = Vec::with_capacity(img.count());
    for i in 0..img.count() {
        inputs.push(norm.normalize(&img.item(i)?).reshape(&[1, h, w])?);
    }
    let labels = lab.bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = vec![0, 0, 0x08, magic];
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn parses_images_and_labels() {
        let payload: Vec<u8> = (0..12).collect();
        let a = parse_idx(&idx(3, &[3, 2, 2], &payload), Path::new("x")).unwrap();
        assert_eq!(a.dims, vec![3, 2, 2]);
        assert_eq!(a.item(1).unwrap().data(), &[4.0, 5.0, 6.0, 7.0]);
        let l = parse_idx(&idx(1, &[3], &[7, 0, 9]), Path::new("y")).unwrap();
        assert_eq!(l.bytes, vec![7, 0, 9]);
        // Big-endian dimensions.
        let big = parse_idx(&idx(1, &[256], &[1; 256]), Path::new("z")).unwrap();
        assert_eq!(big.count(), 256);
    }

    #[test]
    fn rejects_malformed_files() {
        let p = Path::new("bad");
        assert!(parse_idx(&idx(3, &[3, 2, 2], &[0; 11]), p).is_err());
        assert!(parse_idx(&idx(3, &[3, 2, 2], &[0; 13]), p).is_err());
        let mut wrong_type = idx(1, &[1], &[0]);
        wrong_type[2] = 0x0D;
        assert!(parse_idx(&wrong_type, p).unwrap_err().to_string().contains("element type"));
        assert!(parse_idx(&[1, 0, 8, 1], p).is_err());
        assert!(parse_idx(&[0, 0, 8], p).is_err());
    }

    #[test]
    fn normalization_values_and_round_trip() {
        let n = Normalization::default();
        assert!((n.apply(0.0) + 0.336579032781564).abs() < 1e-12);
        assert_eq!(Normalization::Signed.apply(1.0), 1.0);
        assert_eq!(Normalization::Signed.apply(0.0), -1.0);
        let raw = Tensor::from_vec((0..=255).map(|b| b as f64).collect()).unwrap();
        for mode in [n, Normalization::Signed] {
            let back = mode.denormalize(&mode.normalize(&raw));
            for (b, r) in back.data().iter().zip(raw.data()) {
                assert!((b * 255.0 - r).abs() < 1e-10);
            }
        }
    }
}
