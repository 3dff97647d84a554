//! Reference values: the matrix Riccati equation giving the vanishing-noise
//! eigenvalue of a linearized problem, closed forms for the built-in
//! examples, Haar orthogonal sampling, and a direct pathwise
//! entropy-production estimate used for cross-validation.

use crate::error::{CoreError, Result};
use crate::model::ProblemSpec;
use crate::rng::{substream, SplitMix64, StreamDomain};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Linearization of a problem at a critical point of the potential: the
/// (symmetric positive definite) Hessian of the potential and the
/// Jacobian of the drift there.
#[derive(Debug, Clone)]
pub struct LinearProblemData {
    pub dim: usize,
    pub hessian: DMatrix<f64>,
    pub drift_jacobian: DMatrix<f64>,
}

impl LinearProblemData {
    pub fn new(hessian: DMatrix<f64>, drift_jacobian: DMatrix<f64>) -> Result<Self> {
        let dim = hessian.nrows();
        if hessian.ncols() != dim || drift_jacobian.nrows() != dim || drift_jacobian.ncols() != dim
        {
            return Err(CoreError::DimensionMismatch(format!(
                "expected square matrices of equal size, got {}x{} and {}x{}",
                hessian.nrows(),
                hessian.ncols(),
                drift_jacobian.nrows(),
                drift_jacobian.ncols()
            )));
        }
        let sym_defect = (&hessian - hessian.transpose()).norm();
        if sym_defect > 1e-10 * (1.0 + hessian.norm()) {
            return Err(CoreError::InvalidOption(format!(
                "Hessian must be symmetric (defect {sym_defect:.3e})"
            )));
        }
        if hessian.clone().cholesky().is_none() {
            return Err(CoreError::InvalidOption(
                "Hessian must be positive definite".to_string(),
            ));
        }
        Ok(Self {
            dim,
            hessian,
            drift_jacobian,
        })
    }
}

/// A solved Riccati instance: the maximal symmetric root `x`, the
/// eigenvalue it implies, and the Frobenius residual of the equation.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub x: DMatrix<f64>,
    pub lambda: f64,
    pub residual: f64,
    pub alpha: f64,
}

/// Residual of the quadratic matrix equation at symmetric `x`:
///
///   X^2 - (1-2a)/2 (B^T X + X B) - M^2/4 + (B^T M + M B)/4 - a(1-a) B^T B
#[inline]
fn riccati_residual(data: &LinearProblemData, alpha: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
    let s = 0.5 * (1.0 - 2.0 * alpha);
    let bt = data.drift_jacobian.transpose();
    x * x - (&bt * x + x * &data.drift_jacobian) * s - (&data.hessian * &data.hessian) * 0.25
        + (&bt * &data.hessian + &data.hessian * &data.drift_jacobian) * 0.25
        - (&bt * &data.drift_jacobian) * (alpha * (1.0 - alpha))
}

/// Basis of the symmetric matrices: E_ii, then (E_ij + E_ji)/sqrt(2).
fn sym_basis(dim: usize) -> Vec<DMatrix<f64>> {
    let mut basis = Vec::with_capacity(dim * (dim + 1) / 2);
    for i in 0..dim {
        let mut e = DMatrix::zeros(dim, dim);
        e[(i, i)] = 1.0;
        basis.push(e);
    }
    let w = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..dim {
        for j in (i + 1)..dim {
            let mut e = DMatrix::zeros(dim, dim);
            e[(i, j)] = w;
            e[(j, i)] = w;
            basis.push(e);
        }
    }
    basis
}

fn vec_sym(a: &DMatrix<f64>, basis: &[DMatrix<f64>]) -> DVector<f64> {
    DVector::from_iterator(basis.len(), basis.iter().map(|e| a.dot(e)))
}

/// One damped Newton solve at fixed `alpha`, warm-started from `x`.
/// The Newton direction stays in the symmetric subspace: the update `H`
/// solves  X H + H X - s (B^T H + H B) = -F(X)  on that subspace.
fn newton_at_alpha(
    data: &LinearProblemData,
    alpha: f64,
    x: &mut DMatrix<f64>,
    basis: &[DMatrix<f64>],
    tol: f64,
) -> Result<f64> {
    let s = 0.5 * (1.0 - 2.0 * alpha);
    let bt = data.drift_jacobian.transpose();
    let k = basis.len();
    for _ in 0..60 {
        let f = riccati_residual(data, alpha, x);
        let res = f.norm();
        if res <= tol {
            return Ok(res);
        }
        let mut jac = DMatrix::zeros(k, k);
        for (col, e) in basis.iter().enumerate() {
            let le = &*x * e + e * &*x - (&bt * e + e * &data.drift_jacobian) * s;
            jac.set_column(col, &vec_sym(&le, basis));
        }
        let rhs = -vec_sym(&f, basis);
        let h_vec = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| CoreError::RiccatiNoConvergence("singular Newton system".into()))?;
        let mut h = DMatrix::zeros(data.dim, data.dim);
        for (coef, e) in h_vec.iter().zip(basis) {
            h += e * *coef;
        }
        // backtracking line search on the residual norm
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &*x + &h * t;
            if riccati_residual(data, alpha, &trial).norm() < res {
                *x = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(CoreError::RiccatiNoConvergence(format!(
                "line search stalled at alpha = {alpha}, residual {res:.3e}"
            )));
        }
    }
    let res = riccati_residual(data, alpha, x).norm();
    if res <= tol {
        Ok(res)
    } else {
        Err(CoreError::RiccatiNoConvergence(format!(
            "residual {res:.3e} after 60 iterations at alpha = {alpha}"
        )))
    }
}

/// Solve the Riccati equation for the maximal symmetric root and return
/// the eigenvalue  lambda = -tr X + tr M / 2 - alpha tr B.
///
/// At alpha = 0 the maximal root is exactly X = M/2; the solver follows
/// that branch by continuation in alpha, so it lands on the maximal root
/// at the target too (the branch cannot cross another: roots are isolated
/// in the symmetric space for these coefficients).
pub fn solve_riccati(data: &LinearProblemData, alpha: f64) -> Result<RiccatiSolution> {
    if !alpha.is_finite() {
        return Err(CoreError::InvalidConfig(format!(
            "alpha must be finite, got {alpha}"
        )));
    }
    let scale = 1.0 + data.hessian.norm_squared() + data.drift_jacobian.norm_squared();
    let tol = 1e-12 * scale;
    let basis = sym_basis(data.dim);
    let mut x = &data.hessian * 0.5;
    let n_steps = 1 + (alpha.abs() / 0.05).ceil() as usize;
    let mut residual = 0.0;
    for step in 1..=n_steps {
        let a = alpha * step as f64 / n_steps as f64;
        residual = newton_at_alpha(data, a, &mut x, &basis, tol)?;
    }
    if alpha == 0.0 {
        residual = riccati_residual(data, 0.0, &x).norm();
    }
    let lambda = -x.trace() + 0.5 * data.hessian.trace() - alpha * data.drift_jacobian.trace();
    Ok(RiccatiSolution {
        x,
        lambda,
        residual,
        alpha,
    })
}

/// Closed-form vanishing-noise eigenvalue for the rotation-in-a-quadratic
/// well examples:  1 - sqrt(1 + 4 a (1 - a)).
pub fn limit_eigenvalue_e1(alpha: f64) -> Result<f64> {
    let disc = 1.0 + 4.0 * alpha * (1.0 - alpha);
    if disc < 0.0 {
        return Err(CoreError::Domain(format!(
            "eigenvalue is -infinity for alpha = {alpha} (discriminant {disc})"
        )));
    }
    Ok(1.0 - disc.sqrt())
}

/// Drift Jacobian of the circulating field at (+-1, 0).
fn circulation_jac_at_wells() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
}

/// Linearizations of the double-well problem at its two minima (+1, 0)
/// and (-1, 0). The Hessian at (+1, 0) is diag(8, 2) independent of the
/// coupling `a`; at (-1, 0) it is diag(8, 2 + 8a).
pub fn e2_linearization(a: f64) -> Result<(LinearProblemData, LinearProblemData)> {
    let b = circulation_jac_at_wells();
    let plus = LinearProblemData::new(DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 2.0])), b.clone())?;
    let minus = LinearProblemData::new(
        DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 2.0 + 8.0 * a])),
        b,
    )?;
    Ok((plus, minus))
}

/// Vanishing-noise eigenvalue of the double-well problem: the larger of
/// the per-well Riccati eigenvalues.
pub fn limit_eigenvalue_e2(a: f64, alpha: f64) -> Result<f64> {
    let (plus, minus) = e2_linearization(a)?;
    let lp = solve_riccati(&plus, alpha)?.lambda;
    let lm = solve_riccati(&minus, alpha)?.lambda;
    Ok(lp.max(lm))
}

/// Linearization of the 16-dimensional rotation example at the origin,
/// for a given conjugating orthogonal matrix.
pub fn e3_linear_data(q: &DMatrix<f64>) -> Result<LinearProblemData> {
    let (m, b) = crate::model::e3_matrices(q);
    LinearProblemData::new(m, b)
}

pub fn e3_limit_eigenvalue(q: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    Ok(solve_riccati(&e3_linear_data(q)?, alpha)?.lambda)
}

/// Reference eigenvalue for the linear drift-rotation example with a
/// shifted well: Hessian diag(8, 2), drift Jacobian a pure rotation.
pub fn le2_reference(alpha: f64) -> Result<f64> {
    let data = LinearProblemData::new(
        DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 2.0])),
        DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]),
    )?;
    Ok(solve_riccati(&data, alpha)?.lambda)
}

/// Sample a Haar-distributed orthogonal matrix: QR of a Gaussian matrix
/// with the sign convention fixed by the diagonal of R.
pub fn sample_orthogonal(dim: usize, rng: &mut SplitMix64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Estimate the mean entropy-production rate by simulating the original
/// diffusion  dX = (-grad V + b) dt + sqrt(2 eps) dW  and accumulating the
/// Stratonovich integral of b/eps along each path with the midpoint rule.
/// Paths start from standard Gaussians, so the first `burn_in` units of
/// time are excluded to let them relax; the result is the mean over paths
/// of S / (horizon - burn_in).
pub fn direct_entropy_production(
    problem: &ProblemSpec,
    epsilon: f64,
    dt: f64,
    horizon: f64,
    burn_in: f64,
    n_paths: usize,
    seed: u64,
) -> Result<f64> {
    if !(epsilon > 0.0 && dt > 0.0 && horizon > dt) {
        return Err(CoreError::InvalidConfig(format!(
            "need epsilon > 0, 0 < dt < horizon; got eps = {epsilon}, dt = {dt}, horizon = {horizon}"
        )));
    }
    if !(burn_in >= 0.0) || burn_in >= horizon {
        return Err(CoreError::InvalidConfig(format!(
            "burn-in {burn_in} must lie in [0, horizon = {horizon})"
        )));
    }
    if n_paths == 0 {
        return Err(CoreError::EmptyInput("n_paths must be positive".into()));
    }
    let d = problem.dim;
    let n_steps = (horizon / dt).round() as usize;
    let burn_steps = (burn_in / dt).round() as usize;
    let noise_scale = (2.0 * epsilon * dt).sqrt();
    let mut total = 0.0;
    let mut x = vec![0.0; d];
    let mut x_next = vec![0.0; d];
    let mut mid = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut b = vec![0.0; d];
    for path in 0..n_paths {
        let mut rng = substream(seed, StreamDomain::EntropyPath, path as u64, 0);
        for xi in x.iter_mut() {
            *xi = rng.sample(StandardNormal);
        }
        let mut s = 0.0;
        for step in 0..n_steps {
            (problem.grad_potential)(&x, &mut grad);
            (problem.drift)(&x, &mut b);
            for i in 0..d {
                let g: f64 = rng.sample(StandardNormal);
                x_next[i] = x[i] + dt * (b[i] - grad[i]) + noise_scale * g;
                mid[i] = 0.5 * (x[i] + x_next[i]);
            }
            (problem.drift)(&mid, &mut b);
            if step >= burn_steps {
                for i in 0..d {
                    s += b[i] * (x_next[i] - x[i]);
                }
            }
            if x_next.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite {
                    term: "entropy path position".into(),
                    particle: format!(" for path {path} at step {step}"),
                    position: x_next.clone(),
                });
            }
            std::mem::swap(&mut x, &mut x_next);
        }
        total += s / (epsilon * ((n_steps - burn_steps) as f64 * dt));
    }
    Ok(total / n_paths as f64)
}
