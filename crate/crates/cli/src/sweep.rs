//! Sweep driver: runs the particle method over an (epsilon, alpha) grid,
//! optionally warm-starting each noise level from the previous one, and
//! writes summary CSVs, rate tables, reference overlays, histograms, and
//! per-run JSON metadata.

use crate::config::SweepConfig;
use ipm_core::engine::{final_density, run_ipm, InitialMeasure, RunConfig};
use ipm_core::io::{read_ensemble_csv, write_ensemble_csv, write_histogram_csv, EnsembleMeta};
use ipm_core::model::{resolve_e3_q, ProblemSpec};
use ipm_core::analysis::{
    gc_symmetry_report, legendre_transform_default, rescale_for_singular_limit, CurveProvenance,
    EigenvalueCurve, RateFunctionTable,
};
use ipm_core::reference::{
    e3_limit_eigenvalue, le2_reference, limit_eigenvalue_e1, limit_eigenvalue_e2,
};
use ipm_core::rng::derive_seed;
use ipm_core::model::E2_DEFAULT_A;
use ipm_core::{builtin_problem, CoreError, Result, WeightParams};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// One line of the sweep summary.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub epsilon: f64,
    pub alpha: f64,
    pub lambda_hat: f64,
    /// Sample standard error over replicates; absent for single runs.
    pub stderr: Option<f64>,
    pub n_replicates: usize,
    pub burn_in: f64,
    pub n_particles: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Cell seed from which the replicate seeds are derived.
    pub seed: u64,
}

pub const SUMMARY_HEADER: &str = "epsilon,alpha,lambda_hat,stderr,n_replicates,burn_in,M,dt,T,seed";

impl SummaryRow {
    pub fn to_csv_line(&self) -> String {
        let stderr = match self.stderr {
            Some(s) => format!("{s}"),
            None => String::new(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epsilon,
            self.alpha,
            self.lambda_hat,
            stderr,
            self.n_replicates,
            self.burn_in,
            self.n_particles,
            self.dt,
            self.horizon,
            self.seed
        )
    }
}

/// Provenance and results of a single run, written as JSON next to the
/// summary so every row's configuration can be reconstructed exactly.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub problem: String,
    pub epsilon: f64,
    pub alpha: f64,
    pub replicate: usize,
    pub seed: u64,
    pub n_particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub burn_in: f64,
    pub lambda_hat: f64,
    pub min_ess: f64,
    pub wall_time_secs: f64,
    /// Ensemble file this run was warm-started from, with its hash.
    pub warm_start_source: Option<FileRef>,
    /// Final ensemble written by this run, with its hash.
    pub ensemble_out: Option<FileRef>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRecord {
    pub epsilon: f64,
    pub alpha: f64,
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<FailureRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Seed of an (epsilon index, alpha index) cell.
pub fn cell_seed(master: u64, eps_index: usize, alpha_index: usize) -> u64 {
    derive_seed(master, eps_index as u64, alpha_index as u64)
}

/// Seed of one replicate within a cell.
pub fn replicate_seed(cell: u64, replicate: usize) -> u64 {
    derive_seed(cell, 0, replicate as u64)
}

fn ensemble_path(dir: &Path, eps: f64, alpha_index: usize, replicate: usize) -> PathBuf {
    dir.join(format!("ensembles/eps{eps}_alpha{alpha_index}_rep{replicate}.csv"))
}

struct JobResult {
    lambda_hat: f64,
    metadata: RunMetadata,
    final_positions: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    problem: &ProblemSpec,
    config: &SweepConfig,
    epsilon: f64,
    alpha: f64,
    alpha_index: usize,
    replicate: usize,
    seed: u64,
    warm_source: Option<&Path>,
) -> Result<JobResult> {
    let (initial, burn_in, warm_ref) = match warm_source {
        Some(src) => {
            let (ens, _) = read_ensemble_csv(src)?;
            if ens.dim != problem.dim || ens.len() != config.n_particles {
                return Err(CoreError::InvalidConfig(format!(
                    "warm-start ensemble {} is {}x{}, run needs {}x{}",
                    src.display(),
                    ens.len(),
                    ens.dim,
                    config.n_particles,
                    problem.dim
                )));
            }
            let hash = sha256_file(src)?;
            (
                InitialMeasure::Positions(ens.positions),
                config.warm_burn_in(),
                Some(FileRef {
                    path: src.display().to_string(),
                    sha256: hash,
                }),
            )
        }
        None => (
            InitialMeasure::StandardGaussian,
            config.fresh_burn_in(),
            None,
        ),
    };
    let run_config = RunConfig {
        params: WeightParams::new(epsilon, alpha)?,
        n_particles: config.n_particles,
        dt: config.dt,
        horizon: config.horizon,
        burn_in,
        seed,
        initial,
    };
    let out = run_ipm(problem, &run_config)?;
    let metadata = RunMetadata {
        problem: config.problem.clone(),
        epsilon,
        alpha,
        replicate,
        seed,
        n_particles: config.n_particles,
        dt: config.dt,
        horizon: config.horizon,
        burn_in,
        lambda_hat: out.result.lambda_hat,
        min_ess: out.result.min_ess(),
        wall_time_secs: out.result.wall_time_secs,
        warm_start_source: warm_ref,
        ensemble_out: None,
    };
    let _ = alpha_index;
    Ok(JobResult {
        lambda_hat: out.result.lambda_hat,
        metadata,
        final_positions: out.final_ensemble.positions,
    })
}

/// Run every job of one epsilon stage, spreading cells over `workers`
/// threads. Job order never affects results: every job is seed-keyed.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    problem: &ProblemSpec,
    config: &SweepConfig,
    epsilon: f64,
    eps_index: usize,
    alphas: &[f64],
    warm_sources: Option<&[Vec<PathBuf>]>,
    results: &mut Vec<Vec<Option<JobResult>>>,
    failures: &mut Vec<FailureRecord>,
) {
    let jobs: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|j| (0..config.replicates).map(move |r| (j, r)))
        .collect();
    let slot: Vec<Mutex<Option<std::result::Result<JobResult, String>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= jobs.len() {
                    break;
                }
                let (j, r) = jobs[k];
                let seed = replicate_seed(cell_seed(config.seed, eps_index, j), r);
                let warm = warm_sources.map(|w| w[j][r].as_path());
                let res = run_one(
                    problem, config, epsilon, alphas[j], j, r, seed, warm,
                )
                .map_err(|e| e.to_string());
                *slot[k].lock().unwrap() = Some(res);
            });
        }
    });
    for (k, &(j, r)) in jobs.iter().enumerate() {
        match slot[k].lock().unwrap().take().unwrap() {
            Ok(out) => results[j][r] = Some(out),
            Err(msg) => failures.push(FailureRecord {
                epsilon,
                alpha: alphas[j],
                replicate: r,
                error: msg,
            }),
        }
    }
}

/// Reference eigenvalue for an alpha, when the problem has one.
/// `le1`/`le2` are exact at every noise level; `e1`/`e2`/`e3` are the
/// vanishing-noise limits.
fn reference_value(
    problem: &str,
    a: f64,
    q: Option<&nalgebra::DMatrix<f64>>,
    alpha: f64,
) -> Option<Result<f64>> {
    match problem {
        "le1" | "e1" => Some(limit_eigenvalue_e1(alpha)),
        "le2" => Some(le2_reference(alpha)),
        "e2" => Some(limit_eigenvalue_e2(a, alpha)),
        "e3" => q.map(|q| e3_limit_eigenvalue(q, alpha)),
        _ => None,
    }
}

/// Write the `alpha,lambda_limit` overlay; alphas outside a formula's
/// domain are skipped.
pub fn write_reference_csv(
    path: &Path,
    problem: &str,
    a: f64,
    q: Option<&nalgebra::DMatrix<f64>>,
    alphas: &[f64],
) -> Result<bool> {
    let mut out = String::from("alpha,lambda_limit\n");
    let mut any = false;
    for &alpha in alphas {
        match reference_value(problem, a, q, alpha) {
            Some(Ok(v)) => {
                let _ = writeln!(out, "{alpha},{v}");
                any = true;
            }
            Some(Err(CoreError::Domain(_))) => continue,
            Some(Err(e)) => return Err(e),
            None => return Ok(false),
        }
    }
    if any {
        std::fs::write(path, out)?;
    }
    Ok(any)
}

pub fn write_rate_table_csv(path: &Path, table: &RateFunctionTable) -> Result<()> {
    let mut out = String::from("s,I,argmax_alpha,boundary_flag\n");
    for i in 0..table.s.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            table.s[i],
            table.rate[i],
            table.argmax_alpha[i],
            u8::from(table.boundary[i])
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_q_csv(path: &Path, q: &nalgebra::DMatrix<f64>, seed: u64) -> Result<()> {
    let mut out = format!("# q_seed={seed}\n");
    for i in 0..q.nrows() {
        for j in 0..q.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", q[(i, j)]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Run a full sweep, writing everything under the configured output
/// directory. Failures of individual runs are recorded and skipped.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let options = config.options.to_builtin();
    let problem = builtin_problem(&config.problem, &options)?;
    let alphas = config.alpha_grid.values();

    let dir = &config.output_dir;
    std::fs::create_dir_all(dir.join("runs"))?;
    if config.warm_start {
        std::fs::create_dir_all(dir.join("ensembles"))?;
    }
    config.write_frozen(&dir.join("config.resolved.toml"))?;

    // validate the run template once up front: template errors abort
    RunConfig {
        params: WeightParams::new(config.epsilon_list[0], alphas[0])?,
        n_particles: config.n_particles,
        dt: config.dt,
        horizon: config.horizon,
        burn_in: config.fresh_burn_in(),
        seed: 0,
        initial: InitialMeasure::StandardGaussian,
    }
    .validate(problem.dim)?;
    if config.warm_start {
        RunConfig {
            params: WeightParams::new(config.epsilon_list[0], alphas[0])?,
            n_particles: config.n_particles,
            dt: config.dt,
            horizon: config.horizon,
            burn_in: config.warm_burn_in(),
            seed: 0,
            initial: InitialMeasure::StandardGaussian,
        }
        .validate(problem.dim)?;
    }

    let e3_q = if config.problem == "e3" {
        let q = resolve_e3_q(&options)?;
        write_q_csv(&dir.join("q_matrix.csv"), &q, options.q_seed.unwrap_or(0))?;
        Some(q)
    } else {
        None
    };
    let a = config.options.a.unwrap_or(E2_DEFAULT_A);
    write_reference_csv(
        &dir.join("reference.csv"),
        &config.problem,
        a,
        e3_q.as_ref(),
        &alphas,
    )?;

    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut failures: Vec<FailureRecord> = Vec::new();
    // warm-start source paths for the next stage, per [alpha][replicate]
    let mut warm_next: Option<Vec<Vec<PathBuf>>> = None;

    for (eps_index, &epsilon) in config.epsilon_list.iter().enumerate() {
        let mut results: Vec<Vec<Option<JobResult>>> = alphas
            .iter()
            .map(|_| (0..config.replicates).map(|_| None).collect())
            .collect();
        run_stage(
            &problem,
            config,
            epsilon,
            eps_index,
            &alphas,
            warm_next.as_deref(),
            &mut results,
            &mut failures,
        );

        let persist = config.warm_start && eps_index + 1 < config.epsilon_list.len();
        let mut next_sources: Vec<Vec<PathBuf>> = Vec::new();
        let mut curve_alphas = Vec::new();
        let mut curve_lambdas = Vec::new();
        for (j, per_alpha) in results.iter_mut().enumerate() {
            let mut next_row = Vec::new();
            let mut lambdas = Vec::new();
            let mut seeds_ok = true;
            for (r, job) in per_alpha.iter_mut().enumerate() {
                let Some(job) = job.as_mut() else {
                    seeds_ok = false;
                    continue;
                };
                lambdas.push(job.lambda_hat);
                if r == 0
                    && problem.dim >= 2
                    && config
                        .histogram_alphas
                        .iter()
                        .any(|&ha| (alphas[j] - ha).abs() <= 1e-9)
                {
                    let ens = ipm_core::engine::Ensemble::new(
                        problem.dim,
                        job.final_positions.clone(),
                    );
                    let hist = final_density(&ens, (0, 1), config.histogram_bins, None)?;
                    write_histogram_csv(
                        &dir.join(format!("hist_eps{epsilon}_alpha{}.csv", alphas[j])),
                        &hist,
                    )?;
                }
                if persist {
                    let path = ensemble_path(dir, epsilon, j, r);
                    let ens = ipm_core::engine::Ensemble::new(
                        problem.dim,
                        std::mem::take(&mut job.final_positions),
                    );
                    write_ensemble_csv(
                        &path,
                        &ens,
                        &EnsembleMeta {
                            problem: config.problem.clone(),
                            epsilon,
                            alpha: alphas[j],
                            seed: job.metadata.seed,
                        },
                    )?;
                    job.metadata.ensemble_out = Some(FileRef {
                        path: path.display().to_string(),
                        sha256: sha256_file(&path)?,
                    });
                    next_row.push(path);
                }
                let meta_path = dir.join(format!("runs/eps{epsilon}_alpha{j}_rep{r}.json"));
                std::fs::write(
                    &meta_path,
                    serde_json::to_string_pretty(&job.metadata)
                        .map_err(|e| CoreError::InvalidConfig(e.to_string()))?,
                )?;
            }
            if persist {
                if seeds_ok {
                    next_sources.push(next_row);
                } else {
                    // a failed replicate breaks this alpha's chain: mark
                    // the whole next-stage cell as fresh via empty paths
                    next_sources.push(Vec::new());
                }
            }
            if lambdas.is_empty() {
                continue;
            }
            let n = lambdas.len();
            let mean = lambdas.iter().sum::<f64>() / n as f64;
            let stderr = if n >= 2 {
                let var =
                    lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                Some((var / n as f64).sqrt())
            } else {
                None
            };
            let burn_in = if warm_next.is_some() {
                config.warm_burn_in()
            } else {
                config.fresh_burn_in()
            };
            rows.push(SummaryRow {
                epsilon,
                alpha: alphas[j],
                lambda_hat: mean,
                stderr,
                n_replicates: n,
                burn_in,
                n_particles: config.n_particles,
                dt: config.dt,
                horizon: config.horizon,
                seed: cell_seed(config.seed, eps_index, j),
            });
            curve_alphas.push(alphas[j]);
            curve_lambdas.push(mean);
        }

        // rate table and symmetry report from this stage's curve
        if curve_alphas.len() >= 2 {
            let curve = EigenvalueCurve::new(
                curve_alphas,
                curve_lambdas,
                epsilon,
                CurveProvenance::Ipm,
            )?;
            let table = legendre_transform_default(&curve)?;
            write_rate_table_csv(&dir.join(format!("rate_eps{epsilon}.csv")), &table)?;
            if let Ok(rep) = gc_symmetry_report(&curve) {
                std::fs::write(
                    dir.join(format!("gc_eps{epsilon}.json")),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "epsilon": epsilon,
                        "max_deviation": rep.max_deviation,
                        "mean_deviation": rep.mean_deviation,
                        "pairs": rep.pairs,
                    }))
                    .map_err(|e| CoreError::InvalidConfig(e.to_string()))?,
                )?;
            }
            if config.problem == "e4" {
                let (_, rescaled) = rescale_for_singular_limit(&curve, &table)?;
                write_rate_table_csv(
                    &dir.join(format!("rate_rescaled_eps{epsilon}.csv")),
                    &rescaled,
                )?;
            }
        }

        warm_next = if persist {
            // alphas whose chain broke fall back to fresh starts
            Some(
                next_sources
                    .iter()
                    .map(|row| row.clone())
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        if let Some(w) = &warm_next {
            if w.iter().any(|row| row.len() != config.replicates) {
                // cannot warm-start from a broken chain; downgrade those
                // cells by aborting warm start for safety
                if w.iter().all(|row| row.is_empty()) {
                    warm_next = None;
                } else if w.iter().any(|row| row.is_empty()) {
                    return Err(CoreError::InvalidConfig(
                        "warm-start chain broken for some alpha cells; rerun without warm_start"
                            .into(),
                    ));
                }
            }
        }
    }

    // summary CSV
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in &rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    std::fs::write(dir.join("summary.csv"), out)?;

    if !failures.is_empty() {
        let mut out = String::from("epsilon,alpha,replicate,error\n");
        for f in &failures {
            let _ = writeln!(
                out,
                "{},{},{},\"{}\"",
                f.epsilon,
                f.alpha,
                f.replicate,
                f.error.replace('"', "'")
            );
        }
        std::fs::write(dir.join("failures.csv"), out)?;
    }

    Ok(SweepOutcome { rows, failures })
}
