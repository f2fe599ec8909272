//! Hammersley-Chapman-Robbins bounds for inputs reconstructed from dithered features.
//!
//! For features `X = a(theta) + Z` with noise density `f`, any unbiased
//! estimator of `theta` satisfies, for every perturbation `eps`,
//!
//! ```text
//! Var(theta_hat_k) >= eps_k^2 / E[(f(Z - z_eps) / f(Z) - 1)^2],   z_eps = a(theta + eps) - a(theta)
//! ```
//!
//! The denominator is `expm1(||z_eps||^2 / sigma^2)` for `N(0, sigma^2 I)` noise
//! and a Monte-Carlo estimate otherwise. [`algorithm1`] searches for an `eps`
//! with a small feature gain `||z_eps|| / ||eps||`; [`per_mode_bounds`] runs the
//! randomized multi-trial protocol and reports per-coordinate standard
//! deviation bounds, in pixels or orthonormal DCT modes.

use std::fmt;
use std::io::{self, Write};

use crate::dct::{dct2, image_dims};
use crate::error::{Error, Result};
use crate::lsqr::{lsqr_solve, LsqrConfig, Transposed};
use crate::nn::LayerStack;
use crate::tensor::{dot, euclidean_norm, sample_normal, RngStream, Tensor};

/// `(||z|| / sigma)^2` beyond which `exp` would overflow.
pub const SATURATION_EXPONENT: f64 = 700.0;

/// Trial streams are keyed `example * TRIAL_STRIDE + trial`.
pub const TRIAL_STRIDE: u64 = 1000;

type Sampler = Box<dyn Fn(&mut RngStream, usize) -> Vec<f64> + Send + Sync>;
type DensityRatio = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Law of the additive dithering noise.
pub enum NoiseModel {
    GaussianIid { sigma: f64 },
    /// `sampler(rng, n)` draws one noise vector; `density_ratio(z, shift)`
    /// returns `f(z - shift) / f(z)`.
    Custom { sampler: Sampler, density_ratio: DensityRatio },
}

impl fmt::Debug for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::GaussianIid { sigma } => f.debug_struct("GaussianIid").field("sigma", sigma).finish(),
            NoiseModel::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(NoiseModel::GaussianIid { sigma })
    }

    pub fn custom(
        sampler: impl Fn(&mut RngStream, usize) -> Vec<f64> + Send + Sync + 'static,
        density_ratio: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        NoiseModel::Custom {
            sampler: Box::new(sampler),
            density_ratio: Box::new(density_ratio),
        }
    }

    pub fn sample(&self, rng: &mut RngStream, n: usize) -> Vec<f64> {
        match self {
            NoiseModel::GaussianIid { sigma } => (0..n).map(|_| sigma * rng.standard_normal()).collect(),
            NoiseModel::Custom { sampler, .. } => sampler(rng, n),
        }
    }

    /// `f(z - shift) / f(z)`.
    pub fn density_ratio(&self, z: &[f64], shift: &[f64]) -> f64 {
        match self {
            NoiseModel::GaussianIid { sigma } => {
                let e = (2.0 * dot(z, shift) - dot(shift, shift)) / (2.0 * sigma * sigma);
                e.exp()
            }
            NoiseModel::Custom { density_ratio, .. } => density_ratio(z, shift),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("sigma must be positive, got {sigma}")))
    }
}

/// Result of the perturbation search.
#[derive(Debug, Clone)]
pub struct PerturbationOutcome {
    pub epsilon: Tensor,
    /// `a(theta + epsilon) - a(theta)`, evaluated exactly.
    pub z_epsilon: Tensor,
    pub norm_epsilon: f64,
    pub norm_z: f64,
    /// `norm_z / norm_epsilon`.
    pub gain_ratio: f64,
    /// Gain ratio after every repetition.
    pub trace: Vec<f64>,
    /// LSQR iterations spent by each solve.
    pub lsqr_iterations: Vec<usize>,
}

/// Iterated search for a perturbation of `theta` that moves the features little.
///
/// Each repetition rescales the current feature-space direction to `||z0||`,
/// applies the pseudoinverse of the Jacobian at `theta` with LSQR to get
/// `eps`, and evaluates `z_eps = a(theta + eps) - a(theta)` with a full forward
/// pass. Between repetitions the direction is replaced by `(J^T)^+ eps`, one
/// LSQR solve against the transposed Jacobian, which makes the sequence an
/// inverse iteration on `J J^T`: on a linear map the gain ratio decreases
/// monotonically to the least singular value.
pub fn algorithm1(
    stack: LayerStack<'_>,
    theta: &Tensor,
    z0: &Tensor,
    repetitions: usize,
    lsqr: &LsqrConfig,
) -> Result<PerturbationOutcome> {
    if repetitions == 0 {
        return Err(Error::invalid("at least one repetition is required"));
    }
    let target = z0.norm();
    if target == 0.0 {
        return Err(Error::invalid("starting vector z0 must be nonzero"));
    }
    let lin = stack.linearize(theta)?;
    let a_theta = lin.output();
    a_theta.check_same_shape(z0)?;

    let mut direction = z0.data().to_vec();
    let mut trace = Vec::with_capacity(repetitions);
    let mut iterations = Vec::with_capacity(2 * repetitions);
    let mut last = None;
    for rep in 1..=repetitions {
        let norm = euclidean_norm(&direction);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate(format!("search direction vanished at repetition {rep}")));
        }
        let z_tilde: Vec<f64> = direction.iter().map(|x| x * (target / norm)).collect();

        let solve = lsqr_solve(&lin, &z_tilde, lsqr)?;
        iterations.push(solve.iterations);
        let norm_epsilon = euclidean_norm(&solve.x);
        if norm_epsilon == 0.0 {
            return Err(Error::Degenerate(format!(
                "LSQR returned a zero perturbation at repetition {rep}"
            )));
        }
        let epsilon = Tensor::from_parts_unchecked(theta.shape().to_vec(), solve.x);
        let perturbed = stack.forward(&theta.add(&epsilon)?)?;
        let z_epsilon = perturbed.sub(a_theta)?;
        if !z_epsilon.is_finite() {
            return Err(Error::NonFinite("recomputed feature perturbation"));
        }
        let norm_z = z_epsilon.norm();
        trace.push(norm_z / norm_epsilon);

        if rep < repetitions {
            let back = lsqr_solve(&Transposed(&lin), epsilon.data(), lsqr)?;
            iterations.push(back.iterations);
            direction = back.x;
        }
        last = Some((epsilon, z_epsilon, norm_epsilon, norm_z));
    }
    let (epsilon, z_epsilon, norm_epsilon, norm_z) = last.expect("at least one repetition");
    if norm_z == 0.0 {
        return Err(Error::Degenerate("perturbation leaves the features unchanged".into()));
    }
    Ok(PerturbationOutcome {
        epsilon,
        z_epsilon,
        norm_epsilon,
        norm_z,
        gain_ratio: norm_z / norm_epsilon,
        trace,
        lsqr_iterations: iterations,
    })
}

/// Denominator of the bound for isotropic Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Denominator {
    Finite(f64),
    /// `(||z|| / sigma)^2` exceeds [`SATURATION_EXPONENT`]; the bound is vacuously 0.
    Saturated,
}

impl Denominator {
    pub fn value(self) -> Option<f64> {
        match self {
            Denominator::Finite(d) => Some(d),
            Denominator::Saturated => None,
        }
    }
}

/// `expm1((z_norm / sigma)^2)`.
pub fn gaussian_denominator(z_norm: f64, sigma: f64) -> Result<Denominator> {
    check_sigma(sigma)?;
    if !(z_norm >= 0.0) || !z_norm.is_finite() {
        return Err(Error::invalid(format!("feature perturbation norm must be finite and nonnegative, got {z_norm}")));
    }
    let c = z_norm / sigma;
    let exponent = c * c;
    if exponent > SATURATION_EXPONENT {
        return Ok(Denominator::Saturated);
    }
    Ok(Denominator::Finite(exponent.exp_m1()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
}

/// Monte-Carlo estimate of `E[(f(Z - z_eps) / f(Z) - 1)^2]`.
pub fn mc_denominator(
    noise: &NoiseModel,
    z_epsilon: &[f64],
    samples: usize,
    rng: &mut RngStream,
) -> Result<McEstimate> {
    if samples < 100 {
        return Err(Error::invalid(format!("need at least 100 samples, got {samples}")));
    }
    if z_epsilon.iter().all(|&x| x == 0.0) {
        return Ok(McEstimate {
            estimate: 0.0,
            standard_error: 0.0,
        });
    }
    let n = z_epsilon.len();
    // Welford running mean / second moment.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for i in 0..samples {
        let z = noise.sample(rng, n);
        if z.len() != n {
            return Err(Error::shape(&[n], &[z.len()]));
        }
        let ratio = noise.density_ratio(&z, z_epsilon);
        if !ratio.is_finite() || ratio < 0.0 {
            return Err(Error::NonFinite("noise density ratio"));
        }
        let x = (ratio - 1.0) * (ratio - 1.0);
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok(McEstimate {
        estimate: mean,
        standard_error: (var / samples as f64).sqrt(),
    })
}

fn check_denominator(denominator: f64) -> Result<()> {
    if denominator > 0.0 && denominator.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("denominator must be positive, got {denominator}")))
    }
}

/// Standard-deviation lower bound `|eps_k| / sqrt(denominator)`.
pub fn hcr_std_bound(epsilon_k: f64, denominator: f64) -> Result<f64> {
    check_denominator(denominator)?;
    Ok(epsilon_k.abs() / denominator.sqrt())
}

/// Lower bound on the mean-square error, `mean_k eps_k^2 / denominator`.
pub fn mse_bound(epsilon: &[f64], denominator: f64) -> Result<f64> {
    check_denominator(denominator)?;
    if epsilon.is_empty() {
        return Err(Error::invalid("empty perturbation"));
    }
    Ok(dot(epsilon, epsilon) / epsilon.len() as f64 / denominator)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Pixel,
    Dct,
}

impl Basis {
    pub fn as_str(self) -> &'static str {
        match self {
            Basis::Pixel => "pixel",
            Basis::Dct => "dct",
        }
    }
}

impl std::str::FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Basis::Pixel),
            "dct" => Ok(Basis::Dct),
            other => Err(Error::invalid(format!("unknown basis {other:?}"))),
        }
    }
}

/// Parameters of the multi-trial bound protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConfig {
    pub sigma: f64,
    /// Perturbation size `s`: the starting vector has norm about `s`.
    pub size: f64,
    pub trials: usize,
    pub repetitions: usize,
    pub lsqr: LsqrConfig,
    pub basis: Basis,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            sigma: 1.0,
            size: 1.0 / 200.0,
            trials: 25,
            repetitions: 10,
            lsqr: LsqrConfig::default(),
            basis: Basis::Dct,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub basis: Basis,
    /// Per coordinate (or per mode), shaped like the input.
    pub std_lower_bounds: Tensor,
    pub trials: usize,
    /// Trials whose denominator saturated and were excluded.
    pub saturated_trials: usize,
    pub size: f64,
    pub sigma: f64,
    /// Per trial; `None` for saturated trials.
    pub denominators: Vec<Option<f64>>,
    pub gain_ratios: Vec<f64>,
}

pub const BOUND_CSV_HEADER: &str = "index,bound,trials,s,sigma,basis";

impl BoundReport {
    pub fn write_csv_rows(&self, w: &mut impl Write, prefix: &str) -> io::Result<()> {
        for (k, b) in self.std_lower_bounds.data().iter().enumerate() {
            writeln!(
                w,
                "{prefix}{k},{b},{},{},{},{}",
                self.trials,
                self.size,
                self.sigma,
                self.basis.as_str()
            )?;
        }
        Ok(())
    }

    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{BOUND_CSV_HEADER}")?;
        self.write_csv_rows(w, "")
    }
}

/// Draws the trial's starting vector: i.i.d. `N(0, 1)` entries scaled by `s / sqrt(n)`.
pub fn starting_vector(rng: &mut RngStream, feature_shape: &[usize], size: f64) -> Result<Tensor> {
    let n: usize = feature_shape.iter().product();
    sample_normal(rng, feature_shape, size / (n as f64).sqrt())
}

/// Expresses a perturbation in the requested basis.
pub fn to_basis(epsilon: &Tensor, basis: Basis) -> Result<Tensor> {
    match basis {
        Basis::Pixel => Ok(epsilon.clone()),
        Basis::Dct => {
            image_dims(epsilon.shape())?;
            Ok(dct2(epsilon)?.into_tensor())
        }
    }
}

/// Per-coordinate standard-deviation bounds maximized over randomized trials.
///
/// Trial `t` of example `e` uses the stream `(seed, e * 1000 + t)`.
pub fn per_mode_bounds(
    stack: LayerStack<'_>,
    theta: &Tensor,
    config: &BoundConfig,
    seed: u64,
    example_index: u64,
) -> Result<BoundReport> {
    check_sigma(config.sigma)?;
    if !(config.size > 0.0) || !config.size.is_finite() {
        return Err(Error::invalid(format!("perturbation size must be positive, got {}", config.size)));
    }
    if config.trials == 0 || config.trials as u64 > TRIAL_STRIDE {
        return Err(Error::invalid(format!("trials must lie in 1..={TRIAL_STRIDE}")));
    }
    if config.basis == Basis::Dct {
        image_dims(theta.shape())?;
    }
    let feature_shape = stack.output_shape(theta.shape())?;
    let mut best = vec![0.0f64; theta.len()];
    let mut denominators = Vec::with_capacity(config.trials);
    let mut gain_ratios = Vec::with_capacity(config.trials);
    let mut saturated = 0;
    for t in 0..config.trials {
        let mut rng = RngStream::new(seed, example_index * TRIAL_STRIDE + t as u64);
        let z0 = starting_vector(&mut rng, &feature_shape, config.size)?;
        let outcome = algorithm1(stack, theta, &z0, config.repetitions, &config.lsqr)?;
        gain_ratios.push(outcome.gain_ratio);
        let d = match gaussian_denominator(outcome.norm_z, config.sigma)? {
            Denominator::Finite(d) if d > 0.0 => d,
            Denominator::Finite(_) => {
                return Err(Error::Degenerate("zero denominator".into()));
            }
            Denominator::Saturated => {
                saturated += 1;
                denominators.push(None);
                continue;
            }
        };
        denominators.push(Some(d));
        let coords = to_basis(&outcome.epsilon, config.basis)?;
        for (b, &e) in best.iter_mut().zip(coords.data()) {
            *b = b.max(hcr_std_bound(e, d)?);
        }
    }
    Ok(BoundReport {
        basis: config.basis,
        std_lower_bounds: Tensor::from_parts_unchecked(theta.shape().to_vec(), best),
        trials: config.trials,
        saturated_trials: saturated,
        size: config.size,
        sigma: config.sigma,
        denominators,
        gain_ratios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CramerRaoBound {
    Variance(f64),
    /// The Jacobian column is zero: no finite-variance unbiased estimator exists.
    Unbounded,
}

/// Per-coordinate Cramér-Rao variance bounds `sigma^2 / sum_j J_jk^2`, one
/// Jacobian column (a forward-mode product with `e_k`) per requested coordinate.
pub fn cramer_rao_bounds(
    stack: LayerStack<'_>,
    theta: &Tensor,
    sigma: f64,
    coordinates: &[usize],
) -> Result<Vec<CramerRaoBound>> {
    check_sigma(sigma)?;
    let p = theta.len();
    if let Some(&bad) = coordinates.iter().find(|&&k| k >= p) {
        return Err(Error::invalid(format!("coordinate {bad} out of range 0..{p}")));
    }
    let lin = stack.linearize(theta)?;
    let mut basis = vec![0.0; p];
    coordinates
        .iter()
        .map(|&k| {
            basis[k] = 1.0;
            let column = lin.jvp_flat(&basis);
            basis[k] = 0.0;
            let sq = column?.iter().map(|x| x * x).sum::<f64>();
            Ok(if sq > 0.0 {
                CramerRaoBound::Variance(sigma * sigma / sq)
            } else {
                CramerRaoBound::Unbounded
            })
        })
        .collect()
}

/// HCR variance bound from the single-coordinate perturbation `eps = t e_k`,
/// with `t` chosen so that the linearized feature perturbation has norm `size`.
pub fn single_coordinate_variance_bound(
    stack: LayerStack<'_>,
    theta: &Tensor,
    sigma: f64,
    coordinate: usize,
    size: f64,
) -> Result<f64> {
    check_sigma(sigma)?;
    if coordinate >= theta.len() {
        return Err(Error::invalid(format!("coordinate {coordinate} out of range")));
    }
    let lin = stack.linearize(theta)?;
    let mut e = vec![0.0; theta.len()];
    e[coordinate] = 1.0;
    let column_norm = euclidean_norm(&lin.jvp_flat(&e)?);
    if column_norm == 0.0 {
        return Err(Error::Degenerate(format!("Jacobian column {coordinate} is zero")));
    }
    let t = size / column_norm;
    let mut shifted = theta.clone();
    shifted.data_mut()[coordinate] += t;
    let z = stack.forward(&shifted)?.sub(lin.output())?;
    match gaussian_denominator(z.norm(), sigma)? {
        Denominator::Finite(d) if d > 0.0 => Ok(t * t / d),
        _ => Err(Error::Degenerate("denominator is zero or saturated".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Affine, Layer};

    /// Linear layer computing `M theta` for an `n x p` matrix `m` (row-major).
    fn matrix_layer(n: usize, p: usize, m: &[f64]) -> Layer {
        let mut w = vec![0.0; p * n];
        for r in 0..n {
            for c in 0..p {
                w[c * n + r] = m[r * p + c];
            }
        }
        Layer::Affine(Affine::new(p, n, w, vec![0.0; n]).unwrap())
    }

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    /// expm1 by its Taylor series in double-double arithmetic.
    fn expm1_series_dd(x: f64) -> f64 {
        let two_sum = |a: f64, b: f64| {
            let s = a + b;
            let bb = s - a;
            (s, (a - (s - bb)) + (b - bb))
        };
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        let mut term = x;
        for k in 1..40 {
            let (s, e) = two_sum(hi, term);
            hi = s;
            lo += e;
            term = term * x / (k + 1) as f64;
        }
        hi + lo
    }

    #[test]
    fn gaussian_denominator_values() {
        assert_eq!(gaussian_denominator(0.0, 1.0).unwrap(), Denominator::Finite(0.0));
        let e1 = gaussian_denominator(2.0, 2.0).unwrap().value().unwrap();
        assert!((e1 - 1.718281828459045).abs() < 1e-15);
        let small = gaussian_denominator(0.005, 1.0).unwrap().value().unwrap();
        let oracle = expm1_series_dd(0.005 * 0.005);
        assert!(((small - oracle) / oracle).abs() < 1e-15, "{small} vs {oracle}");
        // 2.5e-5 + (2.5e-5)^2 / 2 + ...
        assert!((small / 2.50003125e-5 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_denominator_saturates_and_validates() {
        assert_eq!(gaussian_denominator(27.0, 1.0).unwrap(), Denominator::Saturated);
        assert!(gaussian_denominator(26.0, 1.0).unwrap().value().is_some());
        assert!(gaussian_denominator(1.0, 0.0).is_err());
        assert!(gaussian_denominator(-1.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_denominator_scale_invariance() {
        for &(z, s) in &[(0.3, 1.0), (1e-3, 0.5), (4.0, 3.0)] {
            let base = gaussian_denominator(z, s).unwrap().value().unwrap();
            for &c in &[0.1, 2.0, 17.0] {
                let scaled = gaussian_denominator(c * z, c * s).unwrap().value().unwrap();
                assert!(((scaled - base) / base).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn std_and_mse_bounds() {
        assert_eq!(hcr_std_bound(0.0, 1.0).unwrap(), 0.0);
        let d = gaussian_denominator(1.0 / 200.0, 1.0).unwrap().value().unwrap();
        let b = hcr_std_bound(0.1, d).unwrap();
        assert!((b - 0.1 / expm1_series_dd(2.5e-5).sqrt()).abs() < 1e-12);
        assert!((b - 19.999875).abs() < 1e-6, "{b}");
        assert_eq!(hcr_std_bound(0.2, d).unwrap(), 2.0 * b);
        assert!(hcr_std_bound(1.0, 0.0).is_err());
        assert!(hcr_std_bound(1.0, -1.0).is_err());

        assert_eq!(mse_bound(&[0.0, 0.0], 3.0).unwrap(), 0.0);
        assert_eq!(mse_bound(&[3.0, 4.0], 1.0).unwrap(), 12.5);
        let eps = [0.3, -1.2, 0.7];
        let via_std: f64 = eps.iter().map(|&e| hcr_std_bound(e, 0.4).unwrap().powi(2)).sum::<f64>() / 3.0;
        assert!((mse_bound(&eps, 0.4).unwrap() - via_std).abs() < 1e-15);
        assert!(mse_bound(&eps, 0.0).is_err());
    }

    #[test]
    fn mc_denominator_zero_shift_is_exact() {
        let noise = NoiseModel::gaussian(1.0).unwrap();
        let est = mc_denominator(&noise, &[0.0; 4], 100, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(est.estimate, 0.0);
        let custom = NoiseModel::custom(|_, n| vec![0.0; n], |_, _| 3.0);
        assert_eq!(mc_denominator(&custom, &[0.0; 2], 100, &mut RngStream::new(0, 0)).unwrap().estimate, 0.0);
    }

    #[test]
    fn mc_denominator_matches_closed_form() {
        for &(sigma, zn) in &[(1.0, 0.5), (2.0, 1.0)] {
            let noise = NoiseModel::gaussian(sigma).unwrap();
            let z = [zn * 0.6, -zn * 0.8];
            let est = mc_denominator(&noise, &z, 1_000_000, &mut RngStream::new(77, 1)).unwrap();
            let exact = 0.25f64.exp_m1();
            assert!((est.estimate - exact).abs() <= 3.0 * est.standard_error, "{est:?} vs {exact}");
        }
    }

    #[test]
    fn mc_denominator_rejects_bad_input() {
        let noise = NoiseModel::gaussian(1.0).unwrap();
        assert!(mc_denominator(&noise, &[1.0], 99, &mut RngStream::new(0, 0)).is_err());
        let broken = NoiseModel::custom(|_, n| vec![0.0; n], |_, _| f64::INFINITY);
        assert!(matches!(
            mc_denominator(&broken, &[1.0], 100, &mut RngStream::new(0, 0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gaussian_density_ratio_formula() {
        let noise = NoiseModel::gaussian(1.5).unwrap();
        let z = [0.3, -0.2, 1.1];
        let s = [0.5, 0.1, -0.4];
        let log_f = |x: &[f64]| -dot(x, x) / (2.0 * 1.5 * 1.5);
        let zs: Vec<f64> = z.iter().zip(&s).map(|(a, b)| a - b).collect();
        let direct = (log_f(&zs) - log_f(&z)).exp();
        assert!((noise.density_ratio(&z, &s) - direct).abs() < 1e-14);
    }

    #[test]
    fn algorithm1_identity_model() {
        let layers = [matrix_layer(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])];
        let stack = LayerStack::new(&layers);
        let theta = vec_t(&[0.2, -0.1, 0.4]);
        let z0 = vec_t(&[0.3, 0.4, 1.2]);
        let out = algorithm1(stack, &theta, &z0, 1, &LsqrConfig::default()).unwrap();
        for ((e, z), z0) in out.epsilon.data().iter().zip(out.z_epsilon.data()).zip(z0.data()) {
            assert!((e - z0).abs() < 1e-15);
            assert!((z - e).abs() < 1e-15);
        }
        assert!((out.gain_ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn algorithm1_diagonal_converges_to_least_singular_value() {
        let layers = [matrix_layer(2, 2, &[2.0, 0.0, 0.0, 0.5])];
        let stack = LayerStack::new(&layers);
        let theta = vec_t(&[1.0, 1.0]);
        let z0 = vec_t(&[1.0, 0.3]);
        let out = algorithm1(stack, &theta, &z0, 10, &LsqrConfig::default()).unwrap();
        assert!((out.gain_ratio - 0.5).abs() < 1e-6, "{}", out.gain_ratio);
        let e = out.epsilon.data();
        assert!(e[0].abs() / e[1].abs() < 1e-6);
        for pair in out.trace.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
        }
        // z_eps is the exact feature difference.
        let recomputed = stack.forward(&theta.add(&out.epsilon).unwrap()).unwrap().sub(&stack.forward(&theta).unwrap()).unwrap();
        assert_eq!(recomputed, out.z_epsilon);
        assert!((out.gain_ratio - out.norm_z / out.norm_epsilon).abs() < 1e-12);
    }

    #[test]
    fn algorithm1_rejects_bad_input() {
        let layers = [matrix_layer(2, 2, &[2.0, 0.0, 0.0, 0.5])];
        let stack = LayerStack::new(&layers);
        let theta = vec_t(&[1.0, 1.0]);
        assert!(algorithm1(stack, &theta, &vec_t(&[0.0, 0.0]), 3, &LsqrConfig::default()).is_err());
        assert!(algorithm1(stack, &theta, &vec_t(&[1.0, 0.0]), 0, &LsqrConfig::default()).is_err());
        // The Jacobian of a dead ReLU layer is zero, so LSQR can only return zero.
        let dead = [matrix_layer(2, 2, &[1.0, 0.0, 0.0, 1.0]), Layer::Relu];
        let neg = vec_t(&[-1.0, -1.0]);
        assert!(matches!(
            algorithm1(LayerStack::new(&dead), &neg, &vec_t(&[1.0, 1.0]), 1, &LsqrConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cramer_rao_column_example() {
        let layers = [matrix_layer(2, 1, &[3.0, 4.0])];
        let stack = LayerStack::new(&layers);
        let theta = vec_t(&[0.7]);
        let b = cramer_rao_bounds(stack, &theta, 1.0, &[0]).unwrap();
        assert_eq!(b, vec![CramerRaoBound::Variance(1.0 / 25.0)]);
        let b2 = cramer_rao_bounds(stack, &theta, 2.0, &[0]).unwrap();
        assert_eq!(b2, vec![CramerRaoBound::Variance(4.0 / 25.0)]);
        assert!(cramer_rao_bounds(stack, &theta, 1.0, &[1]).is_err());
    }

    #[test]
    fn cramer_rao_zero_column_is_unbounded() {
        let layers = [matrix_layer(2, 2, &[1.0, 0.0, 0.0, 0.0])];
        let theta = vec_t(&[0.1, 0.2]);
        let b = cramer_rao_bounds(LayerStack::new(&layers), &theta, 1.0, &[0, 1]).unwrap();
        assert_eq!(b[1], CramerRaoBound::Unbounded);
    }

    #[test]
    fn single_trial_report_is_one_composition() {
        let m = [1.5, 0.2, -0.3, 0.1, 0.9, 0.4, 0.0, 0.3, 1.1, 0.5, -0.2, 0.7];
        let layers = [matrix_layer(4, 3, &m)];
        let stack = LayerStack::new(&layers);
        let theta = vec_t(&[0.1, 0.2, 0.3]);
        let cfg = BoundConfig {
            trials: 1,
            repetitions: 3,
            basis: Basis::Pixel,
            size: 0.01,
            ..BoundConfig::default()
        };
        let report = per_mode_bounds(stack, &theta, &cfg, 5, 2).unwrap();
        let mut rng = RngStream::new(5, 2 * TRIAL_STRIDE);
        let z0 = starting_vector(&mut rng, &[4], 0.01).unwrap();
        let out = algorithm1(stack, &theta, &z0, 3, &cfg.lsqr).unwrap();
        let d = gaussian_denominator(out.norm_z, 1.0).unwrap().value().unwrap();
        for (b, e) in report.std_lower_bounds.data().iter().zip(out.epsilon.data()) {
            assert_eq!(*b, hcr_std_bound(*e, d).unwrap());
        }
        assert_eq!(report.denominators, vec![Some(d)]);
    }

    #[test]
    fn report_is_max_over_trials() {
        let m = [1.5, 0.2, -0.3, 0.1, 0.9, 0.4, 0.0, 0.3, 1.1, 0.5, -0.2, 0.7];
        let layers = [matrix_layer(4, 3, &m)];
        let stack = LayerStack::new(&layers);
        let theta = vec_t(&[0.1, 0.2, 0.3]);
        let cfg = BoundConfig {
            trials: 6,
            repetitions: 1,
            basis: Basis::Pixel,
            ..BoundConfig::default()
        };
        let report = per_mode_bounds(stack, &theta, &cfg, 9, 0).unwrap();
        for t in 0..6 {
            let mut rng = RngStream::new(9, t);
            let z0 = starting_vector(&mut rng, &[4], cfg.size).unwrap();
            let out = algorithm1(stack, &theta, &z0, 1, &cfg.lsqr).unwrap();
            let d = gaussian_denominator(out.norm_z, 1.0).unwrap().value().unwrap();
            for (b, e) in report.std_lower_bounds.data().iter().zip(out.epsilon.data()) {
                assert!(*b >= hcr_std_bound(*e, d).unwrap());
            }
        }
    }

    #[test]
    fn saturated_trials_are_excluded() {
        let layers = [matrix_layer(2, 2, &[1.0, 0.0, 0.0, 1.0])];
        let theta = vec_t(&[0.0, 0.0]);
        let cfg = BoundConfig {
            size: 100.0,
            trials: 3,
            repetitions: 1,
            basis: Basis::Pixel,
            ..BoundConfig::default()
        };
        let r = per_mode_bounds(LayerStack::new(&layers), &theta, &cfg, 1, 0).unwrap();
        assert_eq!(r.saturated_trials, 3);
        assert!(r.std_lower_bounds.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn csv_layout() {
        let report = BoundReport {
            basis: Basis::Dct,
            std_lower_bounds: vec_t(&[0.5, 0.25]),
            trials: 25,
            saturated_trials: 0,
            size: 0.005,
            sigma: 1.0,
            denominators: vec![],
            gain_ratios: vec![],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "index,bound,trials,s,sigma,basis\n0,0.5,25,0.005,1,dct\n1,0.25,25,0.005,1,dct\n"
        );
    }
}
