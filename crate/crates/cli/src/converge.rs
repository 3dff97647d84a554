//! Convergence harness: runs the particle method over a grid of horizons
//! or step sizes against a problem with a known exact eigenvalue, and
//! fits the error decay rate in log-log coordinates.

use ipm_core::engine::{run_ipm, InitialMeasure, RunConfig};
use ipm_core::model::ProblemSpec;
use ipm_core::reference::{le2_reference, limit_eigenvalue_e1};
use ipm_core::rng::derive_seed;
use ipm_core::{builtin_problem, BuiltinOptions, CoreError, Result, WeightParams};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Vary the total simulated time.
    Horizon,
    /// Vary the step size.
    Dt,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergencePoint {
    /// Grid value (a horizon or a step size).
    pub value: f64,
    /// Mean of |lambda_hat - lambda_exact| over the replicates.
    pub mean_abs_error: f64,
    /// Standard error of that mean.
    pub stderr: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub problem: String,
    pub axis: Axis,
    pub epsilon: f64,
    pub alpha: f64,
    pub lambda_exact: f64,
    pub points: Vec<ConvergencePoint>,
    /// Least-squares slope of log(error) against log(value).
    pub slope: f64,
    /// 95% half-width of the slope under the normal approximation.
    pub slope_half_width: f64,
}

/// Exact eigenvalue for the problems whose references hold at every
/// noise level.
pub fn exact_lambda(problem: &str, alpha: f64) -> Result<f64> {
    match problem {
        "le1" => limit_eigenvalue_e1(alpha),
        "le2" => le2_reference(alpha),
        other => Err(CoreError::InvalidConfig(format!(
            "no exact eigenvalue for `{other}`; use le1 or le2"
        ))),
    }
}

/// Ordinary least squares of y on x with the 95% half-width of the slope.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(CoreError::InvalidConfig(
            "slope fit needs at least 3 points".into(),
        ));
    }
    let xm = x.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    if sxx <= 0.0 {
        return Err(CoreError::InvalidConfig("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (intercept + slope * a)).powi(2))
        .sum();
    let se = (ss_res / (n - 2) as f64 / sxx).sqrt();
    Ok((slope, 1.96 * se))
}

pub struct HarnessConfig {
    pub problem: String,
    pub axis: Axis,
    /// Horizons or step sizes, depending on the axis.
    pub grid: Vec<f64>,
    pub epsilon: f64,
    pub alpha: f64,
    pub n_particles: usize,
    /// Step size when the axis is the horizon.
    pub dt: f64,
    /// Horizon when the axis is the step size.
    pub horizon: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Burn-in as a fraction of the horizon. Convergence studies default
    /// to 0 so the initial transient drives the error decay in T.
    pub burn_in_fraction: f64,
}

fn point_config(h: &HarnessConfig, value: f64, seed: u64) -> Result<RunConfig> {
    let (dt, horizon) = match h.axis {
        Axis::Horizon => (h.dt, value),
        Axis::Dt => (value, h.horizon),
    };
    Ok(RunConfig {
        params: WeightParams::new(h.epsilon, h.alpha)?,
        n_particles: h.n_particles,
        dt,
        horizon,
        burn_in: horizon * h.burn_in_fraction,
        seed,
        initial: InitialMeasure::StandardGaussian,
    })
}

fn run_point(
    problem: &ProblemSpec,
    h: &HarnessConfig,
    index: usize,
    value: f64,
    exact: f64,
) -> Result<ConvergencePoint> {
    let mut errors = Vec::with_capacity(h.replicates);
    for r in 0..h.replicates {
        let cfg = point_config(h, value, derive_seed(h.seed, index as u64, r as u64))?;
        cfg.validate(problem.dim)?;
        let out = run_ipm(problem, &cfg)?;
        errors.push((out.result.lambda_hat - exact).abs());
    }
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let stderr = if n >= 2 {
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(ConvergencePoint {
        value,
        mean_abs_error: mean,
        stderr,
        replicates: n,
    })
}

pub fn convergence_harness(h: &HarnessConfig) -> Result<ConvergenceReport> {
    if h.grid.len() < 3 {
        return Err(CoreError::InvalidConfig(
            "convergence grid needs at least 3 points".into(),
        ));
    }
    if !h.grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(CoreError::InvalidConfig(
            "convergence grid must be strictly increasing".into(),
        ));
    }
    if h.replicates == 0 {
        return Err(CoreError::InvalidConfig("replicates must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&h.burn_in_fraction) {
        return Err(CoreError::InvalidConfig(
            "burn_in_fraction must be in [0, 1)".into(),
        ));
    }
    let exact = exact_lambda(&h.problem, h.alpha)?;
    let problem = builtin_problem(&h.problem, &BuiltinOptions::default())?;
    let mut points = Vec::with_capacity(h.grid.len());
    for (i, &value) in h.grid.iter().enumerate() {
        points.push(run_point(&problem, h, i, value, exact)?);
    }
    let log_x: Vec<f64> = points.iter().map(|p| p.value.ln()).collect();
    let log_y: Vec<f64> = points.iter().map(|p| p.mean_abs_error.ln()).collect();
    let (slope, slope_half_width) = fit_slope(&log_x, &log_y)?;
    Ok(ConvergenceReport {
        problem: h.problem.clone(),
        axis: h.axis,
        epsilon: h.epsilon,
        alpha: h.alpha,
        lambda_exact: exact,
        points,
        slope,
        slope_half_width,
    })
}

pub fn write_report_csv(path: &Path, report: &ConvergenceReport) -> Result<()> {
    let mut out = String::from("value,mean_abs_error,stderr,replicates\n");
    for p in &report.points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.value, p.mean_abs_error, p.stderr, p.replicates
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_fit_recovers_exact_line() {
        let x: Vec<f64> = (1..=5).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let (slope, hw) = fit_slope(&x, &y).unwrap();
        assert!((slope + 2.0).abs() < 1e-12);
        assert!(hw < 1e-10);
        assert!(fit_slope(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn exact_values_come_from_the_references() {
        let v = exact_lambda("le1", 0.25).unwrap();
        assert!((v - (1.0 - 1.75f64.sqrt())).abs() < 1e-12);
        assert!(exact_lambda("e1", 0.25).is_err());
    }

    #[test]
    fn harness_validates_grid() {
        let h = HarnessConfig {
            problem: "le1".into(),
            axis: Axis::Horizon,
            grid: vec![1.0, 2.0],
            epsilon: 0.1,
            alpha: 0.25,
            n_particles: 10,
            dt: 0.125,
            horizon: 2.0,
            replicates: 1,
            seed: 0,
            burn_in_fraction: 0.0,
        };
        assert!(convergence_harness(&h).is_err());
    }
}
