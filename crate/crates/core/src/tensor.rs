//! Dense real tensors, Euclidean vector algebra and counter-based random streams.
//!
//! Everything downstream (inputs, features, perturbations, noise) is carried by
//! [`Tensor`]: a row-major `f64` buffer with a shape. Random numbers come from
//! [`RngStream`], a ChaCha keystream addressed by `(seed, stream_id)`, so any
//! per-example or per-trial stream can be derived without sequencing.

use std::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Builds a tensor, rejecting length mismatches, zero dimensions and non-finite entries.
    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {len} entries but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// One-dimensional tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::from_data(&[n], data)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(&self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn norm(&self) -> f64 {
        euclidean_norm(&self.data)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// `self + a * x`
    pub fn axpy(&self, a: f64, x: &Tensor) -> Result<Tensor> {
        self.check_same_shape(x)?;
        let mut out = self.clone();
        axpy(a, &x.data, &mut out.data);
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.axpy(-1.0, other)
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale_in_place(c: f64, v: &mut [f64]) {
    for x in v {
        *x *= c;
    }
}

/// A reproducible random stream keyed by `(seed, stream_id)`.
///
/// Backed by the ChaCha8 keystream: the seed selects the key and the stream id
/// selects the 64-bit nonce, so distinct ids give independent streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    core: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            core,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform on the open interval (0, 1); one counter draw.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire multiply-shift; the bias is below 2^-64 * n.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal variate from exactly two counter draws (Box-Muller, cosine branch).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

pub fn sample_normal(rng: &mut RngStream, shape: &[usize], sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let len = shape.iter().product();
    let data = (0..len).map(|_| sigma * rng.standard_normal()).collect();
    Ok(Tensor::from_parts_unchecked(shape.to_vec(), data))
}

pub fn sample_rademacher(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.rademacher()).collect();
    Tensor::from_parts_unchecked(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Error-free transformation: a + b = s + e exactly.
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    /// Sum of squares carried in double-double arithmetic.
    fn sum_squares_dd(v: &[f64]) -> (f64, f64) {
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        for &x in v {
            let p = x * x;
            let perr = x.mul_add(x, -p);
            let (s, e) = two_sum(hi, p);
            hi = s;
            lo += e + perr;
        }
        two_sum(hi, lo)
    }

    #[test]
    fn norm_trivial_cases() {
        assert_eq!(Tensor::zeros(&[3]).norm(), 0.0);
        assert_eq!(euclidean_norm(&[3.0, 4.0]), 5.0);
    }

    #[test]
    fn norm_matches_extended_precision_oracle() {
        let mut rng = RngStream::new(11, 0);
        let v: Vec<f64> = (0..100).map(|_| rng.standard_normal() * 1e3).collect();
        let (hi, lo) = sum_squares_dd(&v);
        // sqrt(hi + lo) ~ sqrt(hi) + lo / (2 sqrt(hi))
        let root = hi.sqrt();
        let oracle = root + lo / (2.0 * root);
        let got = euclidean_norm(&v);
        assert!(((got - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn normal_law_of_large_numbers() {
        let mut rng = RngStream::new(2024, 7);
        let t = sample_normal(&mut rng, &[1_000_000], 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn normal_is_deterministic_and_scales() {
        let a = sample_normal(&mut RngStream::new(5, 3), &[64], 1.0).unwrap();
        let b = sample_normal(&mut RngStream::new(5, 3), &[64], 1.0).unwrap();
        let c = sample_normal(&mut RngStream::new(5, 3), &[64], 2.0).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.data().iter().zip(c.data()) {
            assert_eq!(2.0 * x, *y);
        }
        let other = sample_normal(&mut RngStream::new(5, 4), &[64], 1.0).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn normal_rejects_nonpositive_sigma() {
        let mut rng = RngStream::new(0, 0);
        assert!(sample_normal(&mut rng, &[2], 0.0).is_err());
        assert!(sample_normal(&mut rng, &[2], -1.0).is_err());
    }

    #[test]
    fn rademacher_support_mean_and_determinism() {
        let t = sample_rademacher(&mut RngStream::new(9, 1), &[1_000_000]);
        assert!(t.data().iter().all(|&x| x == 1.0 || x == -1.0));
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 4.0 / 1000.0, "mean {mean}");
        let again = sample_rademacher(&mut RngStream::new(9, 1), &[1_000_000]);
        assert_eq!(t, again);
    }

    #[test]
    fn from_data_validates() {
        assert!(Tensor::from_data(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_data(&[2], vec![0.0, f64::NAN]).is_err());
        assert!(Tensor::from_data(&[0], vec![]).is_err());
        let t = Tensor::from_data(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.reshape(&[6]).unwrap().shape(), &[6]);
        assert!(t.reshape(&[5]).is_err());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = RngStream::new(1, 1).permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-1e3f64..1e3, 1..40)
        }

        proptest! {
            #[test]
            fn norm_is_homogeneous(v in vec_strategy(), c in -1e3f64..1e3) {
                let t = Tensor::from_vec(v).unwrap();
                let lhs = t.scale(c).norm();
                let rhs = c.abs() * t.norm();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(f64::MIN_POSITIVE));
            }

            #[test]
            fn dot_symmetric_and_cauchy_schwarz(pair in (1usize..40).prop_flat_map(|n| (
                prop::collection::vec(-1e3f64..1e3, n),
                prop::collection::vec(-1e3f64..1e3, n),
            ))) {
                let (u, v) = pair;
                prop_assert_eq!(dot(&u, &v), dot(&v, &u));
                let bound = euclidean_norm(&u) * euclidean_norm(&v);
                prop_assert!(dot(&u, &v).abs() <= bound * (1.0 + 1e-12));
            }
        }
    }
}
