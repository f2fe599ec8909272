//! Bound histograms, Rademacher-perturbed reconstructions, and PGM/PPM output.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::data::Normalization;
use crate::dct::{dct2, idct2, image_dims, DctCoefficients};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

pub const HISTOGRAM_CSV_HEADER: &str = "bin_left,bin_right,count";

/// Equal-width histogram; `counts[i]` covers `[edges[i], edges[i + 1])`, the
/// last bin closed on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::invalid("histogram of no values"));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram input"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // A degenerate range gets a unit-width span so the edges stay increasing.
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts, total: values.len() as u64 })
}

impl Histogram {
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{HISTOGRAM_CSV_HEADER}")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// Adds `rademacher * bounds` to the DCT modes of a normalized image, inverts
/// the DCT and the normalization, and clips to `[0, 1]`.
pub fn rademacher_visualize(
    image: &Tensor,
    bounds: &Tensor,
    rng: &mut RngStream,
    norm: Normalization,
) -> Result<Tensor> {
    image.check_same_shape(bounds)?;
    let mut coeffs = dct2(image)?.into_tensor();
    for (c, &b) in coeffs.data_mut().iter_mut().zip(bounds.data()) {
        *c += rng.rademacher() * b;
    }
    let pixels = norm.denormalize(&idct2(&DctCoefficients::new(coeffs)?));
    let clipped = pixels.data().iter().map(|p| p.clamp(0.0, 1.0)).collect();
    Tensor::from_data(image.shape(), clipped)
}

/// Binary P5 (one channel) or P6 (three channels) bytes, maxval 255.
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(image.shape())?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::invalid(format!("{c} channels: PGM needs 1, PPM needs 3"))),
    };
    let byte = |p: f64| (255.0 * p.clamp(0.0, 1.0)).round() as u8;
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    // Channel-planar storage, pixel-interleaved on disk.
    for i in 0..h * w {
        for k in 0..c {
            out.push(byte(d[k * h * w + i]));
        }
    }
    Ok(out)
}

pub fn write_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(image)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let magic = &bytes[..2];
    if (ext == "pgm" && magic != b"P5") || (ext == "ppm" && magic != b"P6") {
        return Err(Error::invalid(format!("channel count does not match .{ext} output")));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
