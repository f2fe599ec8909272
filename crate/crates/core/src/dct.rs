//! Orthonormal 2D DCT-II per channel, its inverse, and low-pass filtering.
//!
//! Coefficients are laid out row-major by (frequency row, frequency column)
//! with mode `(0, 0)` the DC term of each channel.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// DCT-II coefficients of a `(C, H, W)` (or `(H, W)`) image.
#[derive(Debug, Clone, PartialEq)]
pub struct DctCoefficients(Tensor);

impl DctCoefficients {
    pub fn new(coeffs: Tensor) -> Result<Self> {
        image_dims(coeffs.shape())?;
        Ok(DctCoefficients(coeffs))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        image_dims(self.0.shape()).expect("validated at construction")
    }
}

/// Interprets `(H, W)` as a single channel.
pub fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("expected (C,H,W) or (H,W) image, got {shape:?}"))),
    }
}

/// Orthonormal DCT-II matrix, `C[k][j] = a_k cos(pi (2j + 1) k / 2n)`, row-major.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for j in 0..n {
            m[k * n + j] = a * (PI * (2 * j + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    m
}

/// `out = L X R^T` or with transposes, for one `h x w` plane.
fn transform_plane(plane: &[f64], h: usize, w: usize, ch: &[f64], cw: &[f64], inverse: bool) -> Vec<f64> {
    // Rows first: tmp[r][k] = sum_j plane[r][j] * Cw(k, j)   (forward)
    //                       = sum_j plane[r][j] * Cw(j, k)   (inverse)
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for k in 0..w {
            let mut s = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let c = if inverse { cw[j * w + k] } else { cw[k * w + j] };
                s += c * x;
            }
            tmp[r * w + k] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for k in 0..h {
        for r in 0..h {
            let c = if inverse { ch[r * h + k] } else { ch[k * h + r] };
            if c == 0.0 {
                continue;
            }
            for col in 0..w {
                out[k * w + col] += c * tmp[r * w + col];
            }
        }
    }
    out
}

fn transform(t: &Tensor, inverse: bool) -> Result<Tensor> {
    let (c, h, w) = image_dims(t.shape())?;
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    let plane = h * w;
    let mut data = Vec::with_capacity(t.len());
    for k in 0..c {
        data.extend(transform_plane(&t.data()[k * plane..(k + 1) * plane], h, w, &ch, &cw, inverse));
    }
    Ok(Tensor::from_parts_unchecked(t.shape().to_vec(), data))
}

pub fn dct2(image: &Tensor) -> Result<DctCoefficients> {
    transform(image, false).map(DctCoefficients)
}

pub fn idct2(coeffs: &DctCoefficients) -> Tensor {
    transform(&coeffs.0, true).expect("shape validated at construction")
}

/// Keeps modes whose frequency indices are both below `k`.
pub fn lowpass_filter(coeffs: &DctCoefficients, k: usize) -> Result<DctCoefficients> {
    let (c, h, w) = coeffs.dims();
    if k == 0 || k > h.min(w) {
        return Err(Error::invalid(format!("low-pass size {k} outside 1..={}", h.min(w))));
    }
    let mut out = coeffs.0.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                if r >= k || col >= k {
                    data[(ch * h + r) * w + col] = 0.0;
                }
            }
        }
    }
    Ok(DctCoefficients(out))
}

/// Flat indices (into a `(C, H, W)` buffer) of the modes kept by [`lowpass_filter`].
pub fn lowpass_indices(shape: &[usize], k: usize) -> Result<Vec<usize>> {
    let (c, h, w) = image_dims(shape)?;
    if k == 0 || k > h.min(w) {
        return Err(Error::invalid(format!("low-pass size {k} outside 1..={}", h.min(w))));
    }
    let mut idx = Vec::with_capacity(c * k * k);
    for ch in 0..c {
        for r in 0..k {
            for col in 0..k {
                idx.push((ch * h + r) * w + col);
            }
        }
    }
    Ok(idx)
}
