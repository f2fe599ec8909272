//! Matrix-free LSQR (Paige & Saunders) for `min ||A x - b||`.
//!
//! The solver touches `A` only through [`LinearOperator::apply`] and
//! [`LinearOperator::apply_transpose`], one of each per iteration, starting
//! from `x0 = 0` without damping or preconditioning.

use crate::error::{Error, Result};
use crate::tensor::{dot, euclidean_norm, scale_in_place, RngStream};

/// A real `rows x cols` matrix available only through products.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `A v` for `v` of length `cols`.
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    /// `A^T u` for `u` of length `rows`.
    fn apply_transpose(&self, u: &[f64]) -> Vec<f64>;
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn rows(&self) -> usize {
        (**self).rows()
    }
    fn cols(&self) -> usize {
        (**self).cols()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (**self).apply(v)
    }
    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        (**self).apply_transpose(u)
    }
}

/// An operator assembled from a pair of closures.
pub struct FnOperator<F, G> {
    rows: usize,
    cols: usize,
    apply: F,
    apply_transpose: G,
}

impl<F, G> FnOperator<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    /// In debug builds the adjoint identity is spot-checked on a random pair.
    pub fn new(rows: usize, cols: usize, apply: F, apply_transpose: G) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("operator dimensions must be positive"));
        }
        let op = FnOperator {
            rows,
            cols,
            apply,
            apply_transpose,
        };
        if cfg!(debug_assertions) {
            check_adjoint(&op, 0x5eed)?;
        }
        Ok(op)
    }
}

impl<F, G> LinearOperator for FnOperator<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self.apply)(v)
    }
    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        (self.apply_transpose)(u)
    }
}

/// Swaps the roles of `apply` and `apply_transpose`.
pub struct Transposed<A>(pub A);

impl<A: LinearOperator> LinearOperator for Transposed<A> {
    fn rows(&self) -> usize {
        self.0.cols()
    }
    fn cols(&self) -> usize {
        self.0.rows()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.0.apply_transpose(v)
    }
    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        self.0.apply(u)
    }
}

/// Dense row-major matrix operator.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "dense matrix {rows}x{cols} with {} entries",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl LinearOperator for DenseMatrix {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.cols).map(|row| dot(row, v)).collect()
    }
    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &ui) in self.data.chunks_exact(self.cols).zip(u) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * ui;
            }
        }
        out
    }
}

/// Verifies `<u, A v> == <A^T u, v>` for one random `(u, v)` drawn from `seed`.
pub fn check_adjoint<A: LinearOperator + ?Sized>(op: &A, seed: u64) -> Result<()> {
    let mut rng = RngStream::new(seed, 0);
    let v: Vec<f64> = (0..op.cols()).map(|_| rng.standard_normal()).collect();
    let u: Vec<f64> = (0..op.rows()).map(|_| rng.standard_normal()).collect();
    let av = op.apply(&v);
    let atu = op.apply_transpose(&u);
    if av.len() != op.rows() || atu.len() != op.cols() {
        return Err(Error::invalid("operator output has the wrong length"));
    }
    let lhs = dot(&u, &av);
    let rhs = dot(&atu, &v);
    let scale = 1.0 + euclidean_norm(&u) * euclidean_norm(&av) + euclidean_norm(&atu) * euclidean_norm(&v);
    if (lhs - rhs).abs() > 1e-9 * scale {
        return Err(Error::invalid(format!(
            "apply_transpose is not the adjoint of apply: {lhs} vs {rhs}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsqrConfig {
    /// Iteration cap; `None` means `2 * min(rows, cols)`.
    pub max_iterations: Option<usize>,
    pub atol: f64,
    pub btol: f64,
}

impl Default for LsqrConfig {
    fn default() -> Self {
        LsqrConfig {
            max_iterations: None,
            atol: 1e-10,
            btol: 1e-10,
        }
    }
}

impl LsqrConfig {
    fn validate(&self) -> Result<()> {
        let ok = |t: f64| (0.0..1.0).contains(&t);
        if !ok(self.atol) || !ok(self.btol) {
            return Err(Error::invalid("LSQR tolerances must lie in [0, 1)"));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::invalid("LSQR needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// `||r|| <= btol ||b|| + atol ||A|| ||x||` (includes `b = 0`).
    ResidualTolerance,
    /// `||A^T r|| / (||A|| ||r||) <= atol`.
    LeastSquaresTolerance,
    MaxIterations,
    /// A bidiagonalization vector vanished exactly.
    Breakdown,
}

#[derive(Debug, Clone)]
pub struct LsqrOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Solver's running estimate of `||A x - b||`.
    pub residual_norm: f64,
    /// Residual estimate after each iteration.
    pub residual_history: Vec<f64>,
    pub termination: Termination,
    /// Frobenius-norm estimate of `A` built during bidiagonalization.
    pub operator_norm_estimate: f64,
}

pub fn lsqr_solve<A: LinearOperator + ?Sized>(op: &A, b: &[f64], config: &LsqrConfig) -> Result<LsqrOutcome> {
    config.validate()?;
    let (m, n) = (op.rows(), op.cols());
    if b.len() != m {
        return Err(Error::shape(&[m], &[b.len()]));
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("LSQR right-hand side"));
    }
    let max_iter = config.max_iterations.unwrap_or(2 * m.min(n));

    let mut x = vec![0.0; n];
    let mut u = b.to_vec();
    let mut beta = euclidean_norm(&u);
    let bnorm = beta;
    if beta == 0.0 {
        return Ok(LsqrOutcome {
            x,
            iterations: 0,
            residual_norm: 0.0,
            residual_history: vec![],
            termination: Termination::ResidualTolerance,
            operator_norm_estimate: 0.0,
        });
    }
    scale_in_place(1.0 / beta, &mut u);
    let mut v = op.apply_transpose(&u);
    check_finite(&v)?;
    let mut alpha = euclidean_norm(&v);
    if alpha == 0.0 {
        // A^T b = 0: x = 0 already solves the least-squares problem.
        return Ok(LsqrOutcome {
            x,
            iterations: 0,
            residual_norm: bnorm,
            residual_history: vec![],
            termination: Termination::Breakdown,
            operator_norm_estimate: 0.0,
        });
    }
    scale_in_place(1.0 / alpha, &mut v);
    let mut w = v.clone();

    let mut phibar = beta;
    let mut rhobar = alpha;
    let mut anorm_sq = 0.0;
    let mut history = Vec::new();
    let mut iterations = 0;

    let termination = loop {
        if iterations >= max_iter {
            break Termination::MaxIterations;
        }
        iterations += 1;

        // Bidiagonalization: beta u = A v - alpha u, alpha v = A^T u - beta v.
        let av = op.apply(&v);
        check_finite(&av)?;
        for (ui, avi) in u.iter_mut().zip(&av) {
            *ui = avi - alpha * *ui;
        }
        beta = euclidean_norm(&u);
        anorm_sq += alpha * alpha + beta * beta;
        if beta > 0.0 {
            scale_in_place(1.0 / beta, &mut u);
            let atu = op.apply_transpose(&u);
            check_finite(&atu)?;
            for (vi, ai) in v.iter_mut().zip(&atu) {
                *vi = ai - beta * *vi;
            }
            alpha = euclidean_norm(&v);
            if alpha > 0.0 {
                scale_in_place(1.0 / alpha, &mut v);
            }
        }

        // Plane rotation eliminating the subdiagonal beta.
        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        let t1 = phi / rho;
        let t2 = -theta / rho;
        for ((xi, wi), vi) in x.iter_mut().zip(w.iter_mut()).zip(&v) {
            *xi += t1 * *wi;
            *wi = vi + t2 * *wi;
        }

        let rnorm = phibar;
        history.push(rnorm);
        let anorm = anorm_sq.sqrt();
        let xnorm = euclidean_norm(&x);
        // ||A^T r|| = alpha * |c| * phibar after the rotation.
        let arnorm = alpha * c.abs() * phibar;

        let test1 = rnorm / bnorm;
        let test2 = if rnorm > 0.0 { arnorm / (anorm * rnorm) } else { 0.0 };
        let rtol = config.btol + config.atol * anorm * xnorm / bnorm;

        if test1 <= rtol || 1.0 + test1 <= 1.0 {
            break Termination::ResidualTolerance;
        }
        if test2 <= config.atol || 1.0 + test2 <= 1.0 {
            break Termination::LeastSquaresTolerance;
        }
        if beta == 0.0 || alpha == 0.0 {
            break Termination::Breakdown;
        }
    };

    check_finite(&x)?;
    Ok(LsqrOutcome {
        x,
        iterations,
        residual_norm: phibar,
        residual_history: history,
        termination,
        operator_norm_estimate: anorm_sq.sqrt(),
    })
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("LSQR iterate"))
    }
}
