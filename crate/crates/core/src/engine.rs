//! The interacting particle method itself: Euler propagation under the
//! tilted drift, exponential reweighting by the weight potential, and
//! multinomial resampling, with the per-step log mean weight accumulated
//! into the eigenvalue estimate.

use crate::error::{CoreError, Result};
use crate::model::{evaluate_u, u_from_parts, ProblemSpec, WeightParams};
use crate::rng::{substream, StreamDomain};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

/// An equally weighted ensemble of particle positions, stored flat with
/// particle `p` occupying `positions[p*dim .. (p+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub dim: usize,
    pub positions: Vec<f64>,
    /// Number of propagation steps this ensemble has undergone.
    pub step: u64,
}

impl Ensemble {
    pub fn new(dim: usize, positions: Vec<f64>) -> Self {
        Self {
            dim,
            positions,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn particle(&self, p: usize) -> &[f64] {
        &self.positions[p * self.dim..(p + 1) * self.dim]
    }
}

/// Where the particles start.
#[derive(Debug, Clone)]
pub enum InitialMeasure {
    /// Independent standard Gaussians in every coordinate.
    StandardGaussian,
    /// Every particle at the same point.
    PointMass(Vec<f64>),
    /// Explicit flat positions, length `n_particles * dim` (warm starts).
    Positions(Vec<f64>),
}

/// Parameters of one particle run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: WeightParams,
    pub n_particles: usize,
    pub dt: f64,
    /// Total simulated time; the number of steps is `horizon / dt`.
    pub horizon: f64,
    /// Initial stretch of time excluded from the eigenvalue average;
    /// must be a multiple of `dt` in `[0, horizon)`.
    pub burn_in: f64,
    pub seed: u64,
    pub initial: InitialMeasure,
}

fn near_integer(x: f64) -> Option<usize> {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) && r >= 0.0 {
        Some(r as usize)
    } else {
        None
    }
}

impl RunConfig {
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in / self.dt).round() as usize
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_particles < 1 {
            return Err(CoreError::InvalidConfig(
                "need at least 1 particle".into(),
            ));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "dt must be a positive real, got {}",
                self.dt
            )));
        }
        match near_integer(self.horizon / self.dt) {
            Some(n) if n >= 1 => {}
            _ => {
                return Err(CoreError::InvalidConfig(format!(
                    "horizon {} must be a positive multiple of dt = {}",
                    self.horizon, self.dt
                )))
            }
        }
        if !(self.burn_in >= 0.0)
            || near_integer(self.burn_in / self.dt).is_none()
            || self.burn_in_steps() >= self.n_steps()
        {
            return Err(CoreError::InvalidConfig(format!(
                "burn-in {} must be a multiple of dt in [0, horizon = {})",
                self.burn_in, self.horizon
            )));
        }
        match &self.initial {
            InitialMeasure::PointMass(x) if x.len() != dim => {
                return Err(CoreError::DimensionMismatch(format!(
                    "point mass has {} coordinates, problem has {dim}",
                    x.len()
                )))
            }
            InitialMeasure::Positions(v) if v.len() != self.n_particles * dim => {
                return Err(CoreError::DimensionMismatch(format!(
                    "initial positions hold {} values, expected {} * {dim}",
                    v.len(),
                    self.n_particles
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Result of a run: the eigenvalue estimate, its per-step trace, and an
/// echo of the configuration that produced it.
#[derive(Debug, Clone)]
pub struct EigenvalueResult {
    /// Time-averaged estimate over the retained steps, per unit time.
    pub lambda_hat: f64,
    /// Log mean weight of each step (one step's contribution, not yet
    /// divided by dt).
    pub per_step: Vec<f64>,
    /// Effective sample size of each step's resampling weights.
    pub ess_trace: Vec<f64>,
    pub burn_in_steps: usize,
    pub config_echo: RunConfig,
    pub problem_name: String,
    pub wall_time_secs: f64,
}

impl EigenvalueResult {
    /// Smallest effective sample size seen across the run.
    pub fn min_ess(&self) -> f64 {
        self.ess_trace.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug)]
pub struct IpmOutput {
    pub result: EigenvalueResult,
    pub final_ensemble: Ensemble,
}

/// Supplies the propagation normals, keyed by step and particle so the
/// numbers do not depend on evaluation order.
pub trait NoiseSource {
    fn fill_standard_normal(&self, step: u64, particle: u64, out: &mut [f64]);
}

/// Counter-based Gaussian noise derived from a master seed.
pub struct SeededNoise {
    pub seed: u64,
}

impl NoiseSource for SeededNoise {
    fn fill_standard_normal(&self, step: u64, particle: u64, out: &mut [f64]) {
        let mut rng = substream(self.seed, StreamDomain::Propagate, step, particle);
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
}

/// Zero noise, for exercising the deterministic drift in tests.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill_standard_normal(&self, _: u64, _: u64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Per-step callback; `positions` are the post-resampling particles.
pub trait RunObserver {
    fn on_step(&mut self, step: usize, lambda_step: f64, ess: f64, positions: &[f64]);
}

/// Draw the initial ensemble.
pub fn init_ensemble(
    dim: usize,
    n_particles: usize,
    initial: &InitialMeasure,
    seed: u64,
) -> Result<Ensemble> {
    let mut positions = vec![0.0; n_particles * dim];
    match initial {
        InitialMeasure::StandardGaussian => {
            for p in 0..n_particles {
                let mut rng = substream(seed, StreamDomain::Init, 0, p as u64);
                for v in &mut positions[p * dim..(p + 1) * dim] {
                    *v = rng.sample(StandardNormal);
                }
            }
        }
        InitialMeasure::PointMass(x) => {
            if x.len() != dim {
                return Err(CoreError::DimensionMismatch(format!(
                    "point mass has {} coordinates, expected {dim}",
                    x.len()
                )));
            }
            for p in 0..n_particles {
                positions[p * dim..(p + 1) * dim].copy_from_slice(x);
            }
        }
        InitialMeasure::Positions(v) => {
            if v.len() != n_particles * dim {
                return Err(CoreError::DimensionMismatch(format!(
                    "{} position values, expected {n_particles} * {dim}",
                    v.len()
                )));
            }
            positions.copy_from_slice(v);
        }
    }
    Ok(Ensemble::new(dim, positions))
}

/// The Euler move shared by `em_step` and the run loop, so both produce
/// bit-identical trajectories: x += (1 - 2 alpha) b dt + sqrt(2 eps dt) G.
#[inline]
fn move_particle(x: &mut [f64], b: &[f64], drift_coef: f64, dt: f64, noise_scale: f64, g: &[f64]) {
    for i in 0..x.len() {
        x[i] += drift_coef * b[i] * dt + noise_scale * g[i];
    }
}

/// One Euler step of the whole ensemble under the tilted drift; the
/// ensemble's step counter is advanced and keys the noise.
pub fn em_step(
    problem: &ProblemSpec,
    params: WeightParams,
    ensemble: &mut Ensemble,
    dt: f64,
    noise: &dyn NoiseSource,
) -> Result<()> {
    if ensemble.dim != problem.dim {
        return Err(CoreError::DimensionMismatch(format!(
            "ensemble dim {} vs problem dim {}",
            ensemble.dim, problem.dim
        )));
    }
    if !(dt > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let d = problem.dim;
    let drift_coef = 1.0 - 2.0 * params.alpha;
    let noise_scale = (2.0 * params.epsilon * dt).sqrt();
    let step = ensemble.step + 1;
    let mut b = vec![0.0; d];
    let mut g = vec![0.0; d];
    for (p, x) in ensemble.positions.chunks_exact_mut(d).enumerate() {
        (problem.drift)(x, &mut b);
        if b.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                term: "b".into(),
                particle: format!(" for particle {p}"),
                position: x.to_vec(),
            });
        }
        noise.fill_standard_normal(step, p as u64, &mut g);
        move_particle(x, &b, drift_coef, dt, noise_scale, &g);
    }
    ensemble.step = step;
    Ok(())
}

/// Log-weights of every particle at its current position: l = dt U(q).
pub fn compute_log_weights(
    problem: &ProblemSpec,
    params: WeightParams,
    ensemble: &Ensemble,
    dt: f64,
) -> Result<Vec<f64>> {
    if ensemble.dim != problem.dim {
        return Err(CoreError::DimensionMismatch(format!(
            "ensemble dim {} vs problem dim {}",
            ensemble.dim, problem.dim
        )));
    }
    let mut out = Vec::with_capacity(ensemble.len());
    for p in 0..ensemble.len() {
        let u = evaluate_u(problem, params, ensemble.particle(p)).map_err(|e| match e {
            CoreError::NonFinite { term, position, .. } => CoreError::NonFinite {
                term,
                particle: format!(" for particle {p}"),
                position,
            },
            other => other,
        })?;
        out.push(dt * u);
    }
    Ok(out)
}

/// Log of the mean of `exp(log_w)`, computed with the max shift. Entries
/// of -inf (vanished weights) are fine; an empty or NaN input, or all
/// weights vanishing, is an error.
pub fn log_mean_weight(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(CoreError::EmptyInput("no weights".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &w in log_w {
        if w.is_nan() || w == f64::INFINITY {
            return Err(CoreError::Domain(format!("weight log {w} is not usable")));
        }
        if w > max {
            max = w;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(CoreError::Domain("all weights vanish".into()));
    }
    let sum: f64 = log_w.iter().map(|&w| (w - max).exp()).sum();
    Ok(max + sum.ln() - (log_w.len() as f64).ln())
}

/// Normalize log weights into probabilities (max-shifted softmax) and
/// return the effective sample size 1 / sum p^2.
pub fn normalized_weights(log_w: &[f64], probs: &mut [f64]) -> Result<f64> {
    if probs.len() != log_w.len() {
        return Err(CoreError::DimensionMismatch(
            "probs buffer length differs from weights".into(),
        ));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(CoreError::Domain("all weights vanish".into()));
    }
    let mut sum = 0.0;
    for (p, &w) in probs.iter_mut().zip(log_w) {
        *p = (w - max).exp();
        sum += *p;
    }
    let mut sum_sq = 0.0;
    for p in probs.iter_mut() {
        *p /= sum;
        sum_sq += *p * *p;
    }
    Ok(1.0 / sum_sq)
}

/// Multinomial counts by the sorted-uniform merge: `n_draws + 1`
/// exponential spacings give sorted uniforms in one pass, which are then
/// merged against the cumulative probabilities in O(n + m). `probs` may
/// be unnormalized; only proportions matter.
pub fn multinomial_counts<R: Rng>(probs: &[f64], n_draws: usize, rng: &mut R) -> Vec<usize> {
    let mut counts = vec![0usize; probs.len()];
    let mut spacings = Vec::new();
    multinomial_counts_into(probs, n_draws, rng, &mut counts, &mut spacings);
    counts
}

/// Buffer-reusing form of `multinomial_counts` for the run loop.
fn multinomial_counts_into<R: Rng>(
    probs: &[f64],
    n_draws: usize,
    rng: &mut R,
    counts: &mut Vec<usize>,
    spacings: &mut Vec<f64>,
) {
    let m = probs.len();
    counts.clear();
    counts.resize(m, 0);
    if m == 0 || n_draws == 0 {
        return;
    }
    spacings.clear();
    let mut total = 0.0;
    for _ in 0..=n_draws {
        let e: f64 = rng.sample(Exp1);
        total += e;
        spacings.push(total);
    }
    // scale the weight CDF by total instead of normalizing the uniforms
    let weight_sum: f64 = probs.iter().sum();
    let scale = total / weight_sum;
    let mut cdf = 0.0;
    let mut cell = 0;
    let mut next_edge = probs[0] * scale;
    for s in spacings.iter().take(n_draws) {
        while cell < m - 1 && *s > next_edge {
            cdf += probs[cell] * scale;
            cell += 1;
            next_edge = cdf + probs[cell] * scale;
        }
        counts[cell] += 1;
    }
}

/// Resample `ensemble` in place according to `counts` (sum = ensemble
/// size), using `scratch` as the target buffer.
fn resample_into(ensemble: &mut Ensemble, counts: &[usize], scratch: &mut Vec<f64>) {
    let d = ensemble.dim;
    scratch.clear();
    for (p, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            scratch.extend_from_slice(&ensemble.positions[p * d..(p + 1) * d]);
        }
    }
    std::mem::swap(&mut ensemble.positions, scratch);
}

/// Multinomial resampling of the ensemble under the probabilities
/// exp(l_m - logsumexp(l)), randomness keyed by (seed, step).
pub fn multinomial_resample(
    ensemble: &mut Ensemble,
    log_weights: &[f64],
    seed: u64,
    step: u64,
) -> Result<()> {
    if log_weights.len() != ensemble.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} weights for {} particles",
            log_weights.len(),
            ensemble.len()
        )));
    }
    let mut probs = vec![0.0; log_weights.len()];
    normalized_weights(log_weights, &mut probs)?;
    let mut rng = substream(seed, StreamDomain::Resample, step, 0);
    let counts = multinomial_counts(&probs, ensemble.len(), &mut rng);
    let mut scratch = Vec::with_capacity(ensemble.positions.len());
    resample_into(ensemble, &counts, &mut scratch);
    Ok(())
}

/// Run the particle method with seeded noise.
pub fn run_ipm(problem: &ProblemSpec, config: &RunConfig) -> Result<IpmOutput> {
    let noise = SeededNoise { seed: config.seed };
    run_ipm_with(problem, config, &noise, None)
}

/// Run the particle method with an explicit noise source and optional
/// per-step observer.
///
/// Each step weights the particles at their current (pre-move) positions
/// with exp(dt U), moves them under the tilted drift, records the log
/// mean weight, and multinomially resamples the moved particles. The
/// estimate is the average log mean weight over the retained steps,
/// divided by dt.
pub fn run_ipm_with(
    problem: &ProblemSpec,
    config: &RunConfig,
    noise: &dyn NoiseSource,
    mut observer: Option<&mut dyn RunObserver>,
) -> Result<IpmOutput> {
    config.validate(problem.dim)?;
    let start = std::time::Instant::now();
    let d = problem.dim;
    let m = config.n_particles;
    let params = config.params;
    let dt = config.dt;
    let drift_coef = 1.0 - 2.0 * params.alpha;
    let noise_scale = (2.0 * params.epsilon * dt).sqrt();
    let n_steps = config.n_steps();
    let burn_in_steps = config.burn_in_steps();

    let mut ensemble = init_ensemble(d, m, &config.initial, config.seed)?;
    let mut log_w = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let mut counts: Vec<usize> = Vec::with_capacity(m);
    let mut spacings: Vec<f64> = Vec::with_capacity(m + 1);
    let mut scratch: Vec<f64> = Vec::with_capacity(m * d);
    let mut grad = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut per_step = Vec::with_capacity(n_steps);
    let mut ess_trace = Vec::with_capacity(n_steps);

    for step in 1..=n_steps {
        // fused pass: weight at the pre-move position (reusing the drift
        // evaluation), then the Euler move, tracking the running max of
        // the log-weights for the shifted reduction below
        let mut max_lw = f64::NEG_INFINITY;
        for (p, x) in ensemble.positions.chunks_exact_mut(d).enumerate() {
            (problem.grad_potential)(x, &mut grad);
            (problem.drift)(x, &mut b);
            let lap = (problem.laplacian_potential)(x);
            let div = (problem.div_drift)(x);
            let lw = dt * u_from_parts(params, &b, &grad, lap, div);
            if lw.is_nan() || lw == f64::INFINITY {
                // x is still the pre-move position; name the bad term
                return Err(match evaluate_u(problem, params, x) {
                    Err(CoreError::NonFinite { term, position, .. }) => CoreError::NonFinite {
                        term,
                        particle: format!(" for particle {p} at step {step}"),
                        position,
                    },
                    _ => CoreError::NonFinite {
                        term: "weight".into(),
                        particle: format!(" for particle {p} at step {step}"),
                        position: x.to_vec(),
                    },
                });
            }
            log_w[p] = lw;
            if lw > max_lw {
                max_lw = lw;
            }
            noise.fill_standard_normal(step as u64, p as u64, &mut g);
            move_particle(x, &b, drift_coef, dt, noise_scale, &g);
        }
        if max_lw == f64::NEG_INFINITY {
            return Err(CoreError::DegenerateEnsemble { step: step as u64 });
        }

        // single shifted-exp pass: mean weight, ESS, and the unnormalized
        // probabilities used by the resampler
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for (w, &lw) in weights.iter_mut().zip(&log_w) {
            let e = (lw - max_lw).exp();
            *w = e;
            sum += e;
            sum_sq += e * e;
        }
        let lambda_step = max_lw + (sum / m as f64).ln();
        let ess = sum * sum / sum_sq;

        let mut rng = substream(config.seed, StreamDomain::Resample, step as u64, 0);
        multinomial_counts_into(&weights, m, &mut rng, &mut counts, &mut spacings);
        resample_into(&mut ensemble, &counts, &mut scratch);
        ensemble.step = step as u64;

        per_step.push(lambda_step);
        ess_trace.push(ess);
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_step(step, lambda_step, ess, &ensemble.positions);
        }
    }

    let retained = &per_step[burn_in_steps..];
    let lambda_hat = retained.iter().sum::<f64>() / (retained.len() as f64 * dt);
    Ok(IpmOutput {
        result: EigenvalueResult {
            lambda_hat,
            per_step,
            ess_trace,
            burn_in_steps,
            config_echo: config.clone(),
            problem_name: problem.name.clone(),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
        final_ensemble: ensemble,
    })
}

/// A 2-D marginal histogram of the ensemble over a coordinate pair,
/// normalized so the bin masses sum to one.
#[derive(Debug, Clone)]
pub struct DensityHistogram {
    pub axes: (usize, usize),
    /// `bins + 1` uniformly spaced edges along each axis.
    pub edges_x: Vec<f64>,
    pub edges_y: Vec<f64>,
    /// Row-major masses: `masses[i * bins_y + j]` is the mass of the bin
    /// with x in `[edges_x[i], edges_x[i+1])`, y likewise.
    pub masses: Vec<f64>,
}

impl DensityHistogram {
    pub fn bins(&self) -> (usize, usize) {
        (self.edges_x.len() - 1, self.edges_y.len() - 1)
    }
}

fn axis_edges(values: impl Iterator<Item = f64>, bins: usize, range: Option<(f64, f64)>) -> Result<(f64, f64)> {
    match range {
        Some((lo, hi)) if hi > lo => Ok((lo, hi)),
        Some((lo, hi)) => Err(CoreError::InvalidConfig(format!(
            "bad histogram range ({lo}, {hi})"
        ))),
        None => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in values {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let pad = 0.5 * (hi - lo).max(1e-12) / bins as f64;
            Ok((lo - pad, hi + pad))
        }
    }
}

/// Bin the ensemble over two coordinates. Without an explicit bounding
/// box the data extent is used, padded by half a bin per side; particles
/// outside an explicit box are dropped before normalizing.
pub fn final_density(
    ensemble: &Ensemble,
    axes: (usize, usize),
    bins: (usize, usize),
    range: Option<((f64, f64), (f64, f64))>,
) -> Result<DensityHistogram> {
    if ensemble.is_empty() {
        return Err(CoreError::EmptyInput("empty ensemble".into()));
    }
    let d = ensemble.dim;
    if axes.0 >= d || axes.1 >= d || axes.0 == axes.1 {
        return Err(CoreError::DimensionMismatch(format!(
            "axes {axes:?} invalid for dimension {d}"
        )));
    }
    if bins.0 == 0 || bins.1 == 0 {
        return Err(CoreError::InvalidConfig("need at least one bin per axis".into()));
    }
    let n = ensemble.len();
    let xs = |a: usize| (0..n).map(move |p| ensemble.positions[p * d + a]);
    let (x_lo, x_hi) = axis_edges(xs(axes.0), bins.0, range.map(|r| r.0))?;
    let (y_lo, y_hi) = axis_edges(xs(axes.1), bins.1, range.map(|r| r.1))?;
    let wx = (x_hi - x_lo) / bins.0 as f64;
    let wy = (y_hi - y_lo) / bins.1 as f64;
    let mut counts = vec![0u64; bins.0 * bins.1];
    for p in 0..n {
        let x = ensemble.positions[p * d + axes.0];
        let y = ensemble.positions[p * d + axes.1];
        if x < x_lo || x > x_hi || y < y_lo || y > y_hi {
            continue;
        }
        let i = (((x - x_lo) / wx) as usize).min(bins.0 - 1);
        let j = (((y - y_lo) / wy) as usize).min(bins.1 - 1);
        counts[i * bins.1 + j] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(CoreError::EmptyInput(
            "no particles fall inside the histogram range".into(),
        ));
    }
    let masses = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let edges_x = (0..=bins.0).map(|i| x_lo + i as f64 * wx).collect();
    let edges_y = (0..=bins.1).map(|j| y_lo + j as f64 * wy).collect();
    Ok(DensityHistogram {
        axes,
        edges_x,
        edges_y,
        masses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_problem, BuiltinOptions};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn le1() -> ProblemSpec {
        builtin_problem("le1", &BuiltinOptions::default()).unwrap()
    }

    fn small_config() -> RunConfig {
        RunConfig {
            params: WeightParams::new(0.1, 0.25).unwrap(),
            n_particles: 200,
            dt: 1.0 / 32.0,
            horizon: 4.0,
            burn_in: 1.0,
            seed: 7,
            initial: InitialMeasure::StandardGaussian,
        }
    }

    #[test]
    fn estimator_identity() {
        let out = run_ipm(&le1(), &small_config()).unwrap();
        let r = &out.result;
        let retained = &r.per_step[r.burn_in_steps..];
        let recomputed =
            retained.iter().sum::<f64>() / (retained.len() as f64 * r.config_echo.dt);
        assert!((r.lambda_hat - recomputed).abs() <= 1e-12);
        assert_eq!(r.per_step.len(), small_config().n_steps());
        assert_eq!(out.final_ensemble.step, small_config().n_steps() as u64);
    }

    #[test]
    fn runs_are_bit_identical() {
        let a = run_ipm(&le1(), &small_config()).unwrap();
        let b = run_ipm(&le1(), &small_config()).unwrap();
        assert_eq!(a.result.per_step, b.result.per_step);
        assert_eq!(a.final_ensemble.positions, b.final_ensemble.positions);
    }

    #[test]
    fn particle_count_is_conserved() {
        let cfg = small_config();
        let out = run_ipm(&le1(), &cfg).unwrap();
        assert_eq!(out.final_ensemble.len(), cfg.n_particles);
        assert!(out.final_ensemble.positions.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_validation_rejects_misaligned_times() {
        let p = le1();
        let mut cfg = small_config();
        cfg.horizon = 4.01;
        assert!(cfg.validate(p.dim).is_err());
        let mut cfg = small_config();
        cfg.burn_in = 0.013;
        assert!(cfg.validate(p.dim).is_err());
        let mut cfg = small_config();
        cfg.burn_in = cfg.horizon;
        assert!(cfg.validate(p.dim).is_err());
    }

    #[test]
    fn initial_measures() {
        // point mass
        let ens = init_ensemble(2, 3, &InitialMeasure::PointMass(vec![0.0, 0.0]), 1).unwrap();
        assert_eq!(ens.positions, vec![0.0; 6]);
        // standard Gaussian moments at M = 1e5
        let m = 100_000;
        let ens = init_ensemble(2, m, &InitialMeasure::StandardGaussian, 2).unwrap();
        for a in 0..2 {
            let vals: Vec<f64> = (0..m).map(|p| ens.positions[p * 2 + a]).collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            assert!(mean.abs() <= 4.0 / (m as f64).sqrt());
            assert!((var - 1.0).abs() <= 0.05);
        }
        // determinism
        let again = init_ensemble(2, m, &InitialMeasure::StandardGaussian, 2).unwrap();
        assert_eq!(ens.positions, again.positions);
    }

    #[test]
    fn em_step_hand_checks() {
        let p = le1();
        // alpha = 1/2 kills the drift
        let mut ens = Ensemble::new(2, vec![1.0, 0.0]);
        em_step(&p, WeightParams::new(0.3, 0.5).unwrap(), &mut ens, 0.1, &ZeroNoise).unwrap();
        assert_eq!(ens.positions, vec![1.0, 0.0]);
        assert_eq!(ens.step, 1);
        // alpha = 0, dt = 0.1: b(1,0) = (0,-1) moves the particle to (1,-0.1)
        let mut ens = Ensemble::new(2, vec![1.0, 0.0]);
        em_step(&p, WeightParams::new(0.3, 0.0).unwrap(), &mut ens, 0.1, &ZeroNoise).unwrap();
        assert_relative_eq!(ens.positions[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(ens.positions[1], -0.1, epsilon = 1e-15);
        // E1 origin is a fixed point of the noiseless flow
        let e1 = builtin_problem("e1", &BuiltinOptions::default()).unwrap();
        let mut ens = Ensemble::new(2, vec![0.0, 0.0]);
        em_step(&e1, WeightParams::new(1.0, 0.0).unwrap(), &mut ens, 0.1, &ZeroNoise).unwrap();
        assert_eq!(ens.positions, vec![0.0, 0.0]);
    }

    #[test]
    fn log_weights_hand_checks() {
        // all particles at E1's origin: every entry dt * 1.0
        let e1 = builtin_problem("e1", &BuiltinOptions::default()).unwrap();
        let ens = Ensemble::new(2, vec![0.0; 8]);
        let dt = 2f64.powi(-8);
        let lw = compute_log_weights(&e1, WeightParams::new(0.1, 0.7).unwrap(), &ens, dt).unwrap();
        for v in lw {
            assert_relative_eq!(v, dt, epsilon = 1e-15);
        }
        // dt = 0 gives all zeros
        let lw = compute_log_weights(&e1, WeightParams::new(0.1, 0.7).unwrap(), &ens, 0.0).unwrap();
        assert!(lw.iter().all(|v| *v == 0.0));
        // far-field LE1 weight is huge and negative but finite in log form
        let p = le1();
        let ens = Ensemble::new(2, vec![10.0, 0.0]);
        let lw = compute_log_weights(&p, WeightParams::new(0.001, 0.0).unwrap(), &ens, 1.0).unwrap();
        assert_relative_eq!(lw[0], -100.0 / 0.004 + 1.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_noise_point_mass_reproduces_u() {
        // At alpha = 1/2 the tilted drift vanishes, so with zero noise a
        // point mass stays put and every step contributes exactly dt U(x0).
        let p = le1();
        let params = WeightParams::new(1.0, 0.5).unwrap();
        let x0 = vec![1.0, 0.0];
        let cfg = RunConfig {
            params,
            n_particles: 16,
            dt: 0.25,
            horizon: 2.0,
            burn_in: 0.0,
            seed: 1,
            initial: InitialMeasure::PointMass(x0.clone()),
        };
        let out = run_ipm_with(&p, &cfg, &ZeroNoise, None).unwrap();
        let u = evaluate_u(&p, params, &x0).unwrap();
        assert_relative_eq!(out.result.lambda_hat, u, epsilon = 1e-12);
        for &s in &out.result.per_step {
            assert_relative_eq!(s, cfg.dt * u, epsilon = 1e-12);
        }
        for &e in &out.result.ess_trace {
            assert_relative_eq!(e, 16.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn em_step_matches_run_loop_first_step() {
        // The same kernel drives em_step and run_ipm, so one em_step from
        // the initial ensemble plus the same weighting and resampling is
        // bit-identical to a one-step run.
        let p = le1();
        let cfg = RunConfig {
            horizon: 1.0 / 32.0,
            burn_in: 0.0,
            ..small_config()
        };
        let noise = SeededNoise { seed: cfg.seed };
        let pre = init_ensemble(p.dim, cfg.n_particles, &cfg.initial, cfg.seed).unwrap();
        let log_w = compute_log_weights(&p, cfg.params, &pre, cfg.dt).unwrap();
        let mut ens = pre.clone();
        em_step(&p, cfg.params, &mut ens, cfg.dt, &noise).unwrap();
        multinomial_resample(&mut ens, &log_w, cfg.seed, 1).unwrap();

        let out = run_ipm(&p, &cfg).unwrap();
        assert_eq!(ens.positions, out.final_ensemble.positions);
        assert_relative_eq!(
            out.result.per_step[0],
            log_mean_weight(&log_w).unwrap(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn log_mean_weight_edge_cases() {
        assert!(log_mean_weight(&[]).is_err());
        assert!(log_mean_weight(&[f64::NAN, 0.0]).is_err());
        assert!(log_mean_weight(&[f64::NEG_INFINITY; 3]).is_err());
        // constants map to themselves, even extreme ones
        for c in [0.0, -1e6, 42.5] {
            assert_relative_eq!(log_mean_weight(&[c; 5]).unwrap(), c, epsilon = 1e-12);
        }
        // mean of 2 and 4 is 3
        let v = log_mean_weight(&[2.0f64.ln(), 4.0f64.ln()]).unwrap();
        assert_relative_eq!(v, 3.0f64.ln(), epsilon = 1e-14);
        // dominance without NaN
        let v = log_mean_weight(&[0.0, -1e9]).unwrap();
        assert_relative_eq!(v, 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_ensemble_is_reported() {
        // a potential gradient so large that U = -inf everywhere: every
        // weight vanishes at the first step
        let p = ProblemSpec {
            dim: 1,
            name: "sink".into(),
            potential: Box::new(|_| 0.0),
            grad_potential: Box::new(|_, out| out.fill(f64::MAX.sqrt())),
            laplacian_potential: Box::new(|_| 0.0),
            drift: Box::new(|_, out| out.fill(0.0)),
            div_drift: Box::new(|_| 0.0),
            jac_drift: None,
        };
        let cfg = RunConfig {
            params: WeightParams::new(1e-3, 0.0).unwrap(),
            n_particles: 8,
            dt: 1.0,
            horizon: 2.0,
            burn_in: 0.0,
            seed: 3,
            initial: InitialMeasure::StandardGaussian,
        };
        match run_ipm(&p, &cfg) {
            Err(CoreError::DegenerateEnsemble { step }) => assert_eq!(step, 1),
            other => panic!("expected degenerate ensemble, got {other:?}"),
        }
    }

    #[test]
    fn resample_edge_cases() {
        // one finite weight: all copies of the survivor
        let mut ens = Ensemble::new(1, vec![1.0, 2.0, 3.0]);
        let lw = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        multinomial_resample(&mut ens, &lw, 5, 1).unwrap();
        assert_eq!(ens.positions, vec![2.0, 2.0, 2.0]);
        // all weights vanished
        let mut ens = Ensemble::new(1, vec![1.0, 2.0]);
        assert!(multinomial_resample(&mut ens, &[f64::NEG_INFINITY; 2], 5, 1).is_err());
    }

    #[test]
    fn multinomial_counts_sum_and_support() {
        let probs = [0.0, 0.5, 0.25, 0.25, 0.0];
        let mut rng = substream(9, StreamDomain::Resample, 0, 0);
        for _ in 0..50 {
            let counts = multinomial_counts(&probs, 100, &mut rng);
            assert_eq!(counts.iter().sum::<usize>(), 100);
            assert_eq!(counts[0], 0);
            assert_eq!(counts[4], 0);
        }
    }

    #[test]
    fn multinomial_counts_mean_is_unbiased() {
        let probs = [0.75, 0.25];
        let mut rng = substream(11, StreamDomain::Resample, 0, 0);
        let trials = 20_000;
        let draws = 2;
        let mut sum_k1 = 0usize;
        for _ in 0..trials {
            sum_k1 += multinomial_counts(&probs, draws, &mut rng)[1];
        }
        let mean = sum_k1 as f64 / trials as f64;
        // E[K_1] = 0.5, sd of the mean = sqrt(2 * .25 * .75 / trials)
        let se = (draws as f64 * 0.25 * 0.75 / trials as f64).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn resampling_preserves_expectations() {
        // MC average over repeated resamplings of (1/M) sum phi matches
        // sum p_m phi(q_m) within 3 standard errors
        let phi = |x: f64| x * x - 0.5;
        let positions = [0.0, 1.0, 2.0, 3.0];
        let log_w = [0.0, -1.0, 0.5, -0.25];
        let mut probs = vec![0.0; 4];
        normalized_weights(&log_w, &mut probs).unwrap();
        let target: f64 = probs.iter().zip(&positions).map(|(p, &x)| p * phi(x)).sum();
        let trials = 40_000;
        let mut rng = substream(13, StreamDomain::Resample, 0, 0);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let counts = multinomial_counts(&probs, 4, &mut rng);
            let v: f64 = counts
                .iter()
                .zip(&positions)
                .map(|(&k, &x)| k as f64 * phi(x))
                .sum::<f64>()
                / 4.0;
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / trials as f64;
        let var = sum_sq / trials as f64 - mean * mean;
        let se = (var / trials as f64).sqrt();
        assert!((mean - target).abs() <= 3.0 * se, "{mean} vs {target} (se {se})");
    }

    #[test]
    fn histogram_masses_and_point_mass() {
        // point mass: one bin carries everything
        let ens = Ensemble::new(2, vec![0.0, 0.0, 0.0, 0.0]);
        let h = final_density(&ens, (0, 1), (3, 3), Some(((-1.0, 1.0), (-1.0, 1.0)))).unwrap();
        assert_relative_eq!(h.masses.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(h.masses.iter().filter(|&&m| m > 0.0).count(), 1);
        assert_relative_eq!(h.masses[1 * 3 + 1], 1.0, epsilon = 1e-12);

        // uniform synthetic particles: 2x2 bins each near 1/4
        let m = 40_000;
        let mut rng = substream(17, StreamDomain::Init, 1, 0);
        let mut pos = Vec::with_capacity(2 * m);
        for _ in 0..2 * m {
            pos.push(rng.random_range(0.0..1.0));
        }
        let ens = Ensemble::new(2, pos);
        let h = final_density(&ens, (0, 1), (2, 2), Some(((0.0, 1.0), (0.0, 1.0)))).unwrap();
        let tol = 4.0 / (m as f64).sqrt();
        for &mass in &h.masses {
            assert!((mass - 0.25).abs() <= tol, "mass {mass}");
        }
        assert_relative_eq!(h.masses.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        assert!(final_density(&ens, (0, 5), (2, 2), None).is_err());
        assert!(final_density(&ens, (0, 0), (2, 2), None).is_err());
    }

    proptest! {
        #[test]
        fn log_mean_weight_shift_invariance(
            mut w in proptest::collection::vec(-50.0f64..50.0, 1..40),
            c in -100.0f64..100.0,
        ) {
            let base = log_mean_weight(&w).unwrap();
            for v in w.iter_mut() { *v += c; }
            let shifted = log_mean_weight(&w).unwrap();
            prop_assert!((shifted - (base + c)).abs() <= 1e-9);
        }

        #[test]
        fn normalized_weights_are_a_distribution(
            w in proptest::collection::vec(-700.0f64..700.0, 2..60),
        ) {
            let mut probs = vec![0.0; w.len()];
            let ess = normalized_weights(&w, &mut probs).unwrap();
            let sum: f64 = probs.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(probs.iter().all(|p| *p >= 0.0));
            prop_assert!(ess >= 1.0 - 1e-12 && ess <= w.len() as f64 + 1e-9);
        }
    }
}
