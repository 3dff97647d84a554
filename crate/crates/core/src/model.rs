//! Diffusion problems: potential `V`, drift field `b`, their derivatives,
//! and the weight potential `U` that drives the particle reweighting.
//!
//! Built-in problems carry exact analytic derivatives. `U` is divided by
//! the noise level, which amplifies any derivative error at small noise,
//! so finite differences are only used to cross-check the built-ins in
//! tests, never inside them.

use crate::error::{CoreError, Result};
use crate::reference::sample_orthogonal;
use crate::rng::{substream, StreamDomain};
use nalgebra::DMatrix;

pub type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type MatrixFn = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A diffusion problem: dimension, potential, drift, and their derivatives.
///
/// All evaluators are pure functions of `x` and safe to call concurrently.
pub struct ProblemSpec {
    pub dim: usize,
    pub name: String,
    pub potential: ScalarFn,
    /// Writes the gradient of the potential into `out` (length `dim`).
    pub grad_potential: VectorFn,
    pub laplacian_potential: ScalarFn,
    /// Writes the drift field into `out` (length `dim`).
    pub drift: VectorFn,
    pub div_drift: ScalarFn,
    /// Jacobian of the drift, `(i, j) = d b_i / d x_j`. Only needed by the
    /// reference module; built-ins provide it, custom problems may not.
    pub jac_drift: Option<MatrixFn>,
}

impl ProblemSpec {
    pub fn drift_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.drift)(x, &mut out);
        out
    }

    pub fn grad_potential_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.grad_potential)(x, &mut out);
        out
    }
}

/// Noise level and tilting parameter of the weight potential.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightParams {
    pub epsilon: f64,
    pub alpha: f64,
}

impl WeightParams {
    pub fn new(epsilon: f64, alpha: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "epsilon must be a positive real, got {epsilon}"
            )));
        }
        if !alpha.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "alpha must be finite, got {alpha}"
            )));
        }
        Ok(Self { epsilon, alpha })
    }
}

/// The five-term weight potential, given precomputed drift and gradient.
///
///   U = -|gV|^2/(4e) + <b,gV>/(2e) - a(1-a)|b|^2/e + lap(V)/2 - a div(b)
///
/// This is the hot-loop form: the engine evaluates `b` once per particle
/// and reuses it for both the weight and the Euler move.
#[inline]
pub(crate) fn u_from_parts(
    params: WeightParams,
    b: &[f64],
    grad_v: &[f64],
    lap_v: f64,
    div_b: f64,
) -> f64 {
    let eps = params.epsilon;
    let alpha = params.alpha;
    let mut grad_sq = 0.0;
    let mut b_dot_grad = 0.0;
    let mut b_sq = 0.0;
    for (bi, gi) in b.iter().zip(grad_v) {
        grad_sq += gi * gi;
        b_dot_grad += bi * gi;
        b_sq += bi * bi;
    }
    -grad_sq / (4.0 * eps) + b_dot_grad / (2.0 * eps) - alpha * (1.0 - alpha) * b_sq / eps
        + 0.5 * lap_v
        - alpha * div_b
}

/// Evaluate the weight potential `U` at `x`, checking each term and naming
/// the offending one when an evaluator returns a non-finite value.
pub fn evaluate_u(problem: &ProblemSpec, params: WeightParams, x: &[f64]) -> Result<f64> {
    let non_finite = |term: &str| CoreError::NonFinite {
        term: term.to_string(),
        particle: String::new(),
        position: x.to_vec(),
    };
    let grad = problem.grad_potential_at(x);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("grad V"));
    }
    let b = problem.drift_at(x);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("b"));
    }
    let lap = (problem.laplacian_potential)(x);
    if !lap.is_finite() {
        return Err(non_finite("laplacian V"));
    }
    let div = (problem.div_drift)(x);
    if !div.is_finite() {
        return Err(non_finite("div b"));
    }
    let u = u_from_parts(params, &b, &grad, lap, div);
    if !u.is_finite() {
        return Err(non_finite("U"));
    }
    Ok(u)
}

/// Options for the built-in problems.
#[derive(Debug, Clone, Default)]
pub struct BuiltinOptions {
    /// E2 well-coupling parameter; defaults to 0.4.
    pub a: Option<f64>,
    /// E3 rotation-conjugating orthogonal matrix; sampled from `q_seed`
    /// when absent.
    pub q: Option<DMatrix<f64>>,
    /// Seed for sampling the E3 matrix when `q` is not supplied.
    pub q_seed: Option<u64>,
    /// E3 cutoff radii: the drift is exact inside `cutoff_inner` and zero
    /// outside `cutoff_outer`.
    pub cutoff_inner: Option<f64>,
    pub cutoff_outer: Option<f64>,
}

pub const E2_DEFAULT_A: f64 = 0.4;
pub const E3_DIM: usize = 16;

/// C^2 cutoff: 1 for r <= r0, 0 for r >= r1, quintic smoothstep between.
/// Returns (eta, d eta / d r).
#[inline]
fn cutoff_eta(r: f64, r0: f64, r1: f64) -> (f64, f64) {
    if r <= r0 {
        (1.0, 0.0)
    } else if r >= r1 {
        (0.0, 0.0)
    } else {
        let w = r1 - r0;
        let u = (r - r0) / w;
        let s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
        let ds = 30.0 * u * u * (1.0 - u) * (1.0 - u) / w;
        (1.0 - s, -ds)
    }
}

/// Diagonal entries of the E3 Hessian at the origin: 5, 6, ..., 20.
fn e3_m_diag() -> Vec<f64> {
    (0..E3_DIM).map(|i| 5.0 + i as f64).collect()
}

/// The E3 matrices: `m` is the Hessian of the quadratic part of the
/// potential, `b = Q^T J Q` with `J` block-diagonal 2x2 rotations.
pub fn e3_matrices(q: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(e3_m_diag()));
    let mut j = DMatrix::zeros(E3_DIM, E3_DIM);
    for k in 0..E3_DIM / 2 {
        j[(2 * k, 2 * k + 1)] = 1.0;
        j[(2 * k + 1, 2 * k)] = -1.0;
    }
    let b = q.transpose() * j * q;
    (m, b)
}

/// Resolve the E3 orthogonal matrix from options: explicit `q` (validated)
/// or Haar-sampled from `q_seed` (default seed 0).
pub fn resolve_e3_q(options: &BuiltinOptions) -> Result<DMatrix<f64>> {
    if let Some(q) = &options.q {
        if q.nrows() != E3_DIM || q.ncols() != E3_DIM {
            return Err(CoreError::InvalidOption(format!(
                "E3 matrix must be {E3_DIM}x{E3_DIM}, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        let defect = (q.transpose() * q - DMatrix::identity(E3_DIM, E3_DIM)).norm();
        if defect > 1e-10 {
            return Err(CoreError::InvalidOption(format!(
                "E3 matrix is not orthogonal (||Q^T Q - I|| = {defect:.3e})"
            )));
        }
        return Ok(q.clone());
    }
    let seed = options.q_seed.unwrap_or(0);
    let mut rng = substream(seed, StreamDomain::Orthogonal, 0, 0);
    Ok(sample_orthogonal(E3_DIM, &mut rng))
}

/// Construct a built-in problem by name: E1, E2, E3, E4, LE1, LE2.
pub fn builtin_problem(name: &str, options: &BuiltinOptions) -> Result<ProblemSpec> {
    match name.to_ascii_lowercase().as_str() {
        "e1" => Ok(problem_e1()),
        "e2" => {
            let a = options.a.unwrap_or(E2_DEFAULT_A);
            if !(a > 0.0) {
                return Err(CoreError::InvalidOption(format!(
                    "E2 parameter a must be positive, got {a}"
                )));
            }
            Ok(problem_e2(a))
        }
        "e3" => {
            let q = resolve_e3_q(options)?;
            let r0 = options.cutoff_inner.unwrap_or(1.0);
            let r1 = options.cutoff_outer.unwrap_or(2.0);
            if !(r0 > 0.0 && r1 > r0) {
                return Err(CoreError::InvalidOption(format!(
                    "E3 cutoff radii must satisfy 0 < inner < outer, got ({r0}, {r1})"
                )));
            }
            Ok(problem_e3(&q, r0, r1))
        }
        "e4" => Ok(problem_e4()),
        "le1" => Ok(problem_le1()),
        "le2" => Ok(problem_le2()),
        other => Err(CoreError::UnknownProblem(other.to_string())),
    }
}

/// Circulating field used by E1 and E2:
/// b(x) = pi^{-1} (cos(pi x1) sin(pi x2), -sin(pi x1) cos(pi x2)).
#[inline]
fn circulation_drift(x: &[f64], out: &mut [f64]) {
    use std::f64::consts::PI;
    let (s1, c1) = (PI * x[0]).sin_cos();
    let (s2, c2) = (PI * x[1]).sin_cos();
    out[0] = c1 * s2 / PI;
    out[1] = -s1 * c2 / PI;
}

fn circulation_jacobian(x: &[f64]) -> DMatrix<f64> {
    use std::f64::consts::PI;
    let (s1, c1) = (PI * x[0]).sin_cos();
    let (s2, c2) = (PI * x[1]).sin_cos();
    DMatrix::from_row_slice(2, 2, &[-s1 * s2, c1 * c2, -c1 * c2, s1 * s2])
}

fn problem_e1() -> ProblemSpec {
    ProblemSpec {
        dim: 2,
        name: "e1".to_string(),
        potential: Box::new(|x| {
            0.5 * (x[0] * x[0] + x[1] * x[1])
                + 0.125 * (x[0].powi(4) + x[1].powi(4))
        }),
        grad_potential: Box::new(|x, out| {
            out[0] = x[0] + 0.5 * x[0].powi(3);
            out[1] = x[1] + 0.5 * x[1].powi(3);
        }),
        laplacian_potential: Box::new(|x| 2.0 + 1.5 * (x[0] * x[0] + x[1] * x[1])),
        drift: Box::new(circulation_drift),
        div_drift: Box::new(|_| 0.0),
        jac_drift: Some(Box::new(circulation_jacobian)),
    }
}

fn problem_e2(a: f64) -> ProblemSpec {
    ProblemSpec {
        dim: 2,
        name: format!("e2(a={a})"),
        potential: Box::new(move |x| {
            let (x1, x2) = (x[0], x[1]);
            x1.powi(4) - 2.0 * x1 * x1
                + (1.0 + a * (x1 - 1.0) * (x1 - 1.0)) * x2 * x2
                + x2.powi(4)
        }),
        grad_potential: Box::new(move |x, out| {
            let (x1, x2) = (x[0], x[1]);
            out[0] = 4.0 * x1.powi(3) - 4.0 * x1 + 2.0 * a * (x1 - 1.0) * x2 * x2;
            out[1] = 2.0 * (1.0 + a * (x1 - 1.0) * (x1 - 1.0)) * x2 + 4.0 * x2.powi(3);
        }),
        laplacian_potential: Box::new(move |x| {
            let (x1, x2) = (x[0], x[1]);
            12.0 * x1 * x1 - 4.0 + 2.0 * a * x2 * x2
                + 2.0 * (1.0 + a * (x1 - 1.0) * (x1 - 1.0))
                + 12.0 * x2 * x2
        }),
        drift: Box::new(circulation_drift),
        div_drift: Box::new(|_| 0.0),
        jac_drift: Some(Box::new(circulation_jacobian)),
    }
}

fn problem_e3(q: &DMatrix<f64>, r0: f64, r1: f64) -> ProblemSpec {
    let (_, b_mat) = e3_matrices(q);
    let m_diag = e3_m_diag();
    let tr_m: f64 = m_diag.iter().sum();
    let tr_b = b_mat.trace();
    let d = E3_DIM;
    let b_drift = b_mat.clone();
    let b_div = b_mat.clone();
    let b_jac = b_mat.clone();
    let m_grad = m_diag.clone();
    ProblemSpec {
        dim: d,
        name: "e3".to_string(),
        potential: Box::new(move |x| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            let quad: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| m_diag[i] * v * v)
                .sum();
            0.5 * quad + 4.0 * r2 * r2
        }),
        grad_potential: Box::new(move |x, out| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            for i in 0..x.len() {
                out[i] = m_grad[i] * x[i] + 16.0 * r2 * x[i];
            }
        }),
        laplacian_potential: Box::new(move |x| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            tr_m + 16.0 * (d as f64 + 2.0) * r2
        }),
        drift: Box::new(move |x, out| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (eta, _) = cutoff_eta(r, r0, r1);
            if eta == 0.0 {
                out.fill(0.0);
                return;
            }
            for i in 0..x.len() {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    acc += b_drift[(i, j)] * x[j];
                }
                out[i] = eta * acc;
            }
        }),
        div_drift: Box::new(move |x| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (eta, deta) = cutoff_eta(r, r0, r1);
            if deta == 0.0 {
                return eta * tr_b;
            }
            // div(eta(|x|) B x) = eta'(r)/r <x, Bx> + eta tr(B)
            let mut x_bx = 0.0;
            for i in 0..x.len() {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    acc += b_div[(i, j)] * x[j];
                }
                x_bx += x[i] * acc;
            }
            deta / r * x_bx + eta * tr_b
        }),
        jac_drift: Some(Box::new(move |x| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (eta, deta) = cutoff_eta(r, r0, r1);
            let mut jac = &b_jac * eta;
            if deta != 0.0 {
                let bx = &b_jac * nalgebra::DVector::from_column_slice(x);
                for i in 0..x.len() {
                    for j in 0..x.len() {
                        jac[(i, j)] += deta / r * bx[i] * x[j];
                    }
                }
            }
            jac
        })),
    }
}

fn problem_e4() -> ProblemSpec {
    ProblemSpec {
        dim: 2,
        name: "e4".to_string(),
        potential: Box::new(|x| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            -0.25 * r2 + 0.125 * r2 * r2
        }),
        grad_potential: Box::new(|x, out| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            let f = 0.5 * (r2 - 1.0);
            out[0] = f * x[0];
            out[1] = f * x[1];
        }),
        laplacian_potential: Box::new(|x| 2.0 * (x[0] * x[0] + x[1] * x[1]) - 1.0),
        drift: Box::new(|x, out| {
            let (s1, c1) = x[0].sin_cos();
            let (s2, c2) = x[1].sin_cos();
            out[0] = c1 * s2;
            out[1] = -s1 * c2;
        }),
        div_drift: Box::new(|_| 0.0),
        jac_drift: Some(Box::new(|x| {
            let (s1, c1) = x[0].sin_cos();
            let (s2, c2) = x[1].sin_cos();
            DMatrix::from_row_slice(2, 2, &[-s1 * s2, c1 * c2, -c1 * c2, s1 * s2])
        })),
    }
}

fn problem_le1() -> ProblemSpec {
    ProblemSpec {
        dim: 2,
        name: "le1".to_string(),
        potential: Box::new(|x| 0.5 * (x[0] * x[0] + x[1] * x[1])),
        grad_potential: Box::new(|x, out| {
            out[0] = x[0];
            out[1] = x[1];
        }),
        laplacian_potential: Box::new(|_| 2.0),
        drift: Box::new(|x, out| {
            out[0] = x[1];
            out[1] = -x[0];
        }),
        div_drift: Box::new(|_| 0.0),
        jac_drift: Some(Box::new(|_| {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
        })),
    }
}

fn problem_le2() -> ProblemSpec {
    ProblemSpec {
        dim: 2,
        name: "le2".to_string(),
        potential: Box::new(|x| -1.0 + 4.0 * (x[0] - 1.0) * (x[0] - 1.0) + x[1] * x[1]),
        grad_potential: Box::new(|x, out| {
            out[0] = 8.0 * (x[0] - 1.0);
            out[1] = 2.0 * x[1];
        }),
        laplacian_potential: Box::new(|_| 10.0),
        drift: Box::new(|x, out| {
            out[0] = -x[1];
            out[1] = x[0] - 1.0;
        }),
        div_drift: Box::new(|_| 0.0),
        jac_drift: Some(Box::new(|_| {
            DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
        })),
    }
}
