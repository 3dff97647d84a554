use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ipm_cli::config::SweepConfig;
use ipm_cli::converge::{convergence_harness, Axis, HarnessConfig};
use ipm_cli::sweep::{run_sweep, write_reference_csv, SUMMARY_HEADER};
use ipm_cli::{exit_code, EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL};
use ipm_core::engine::{final_density, run_ipm, InitialMeasure, RunConfig};
use ipm_core::io::{read_ensemble_csv, write_ensemble_csv, write_histogram_csv, write_series_csv, EnsembleMeta};
use ipm_core::model::{resolve_e3_q, E2_DEFAULT_A};
use ipm_core::reference::direct_entropy_production;
use ipm_core::{builtin_problem, BuiltinOptions, CoreError, WeightParams};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ipm",
    about = "Interacting particle method for entropy-production eigenvalues"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle method once and print a summary row.
    Run(RunArgs),
    /// Run an (epsilon, alpha) sweep described by a TOML config.
    Sweep(SweepArgs),
    /// Convergence harness against an exact eigenvalue.
    Converge(ConvergeArgs),
    /// Emit a reference eigenvalue curve as CSV.
    Reference(ReferenceArgs),
    /// Histogram a saved ensemble over two coordinates.
    Density(DensityArgs),
    /// Direct Stratonovich estimator of the mean entropy production.
    EpDirect(EpDirectArgs),
}

#[derive(Args)]
struct ProblemArgs {
    /// Problem name: e1, e2, e3, e4, le1, le2.
    #[arg(long)]
    problem: String,
    /// Double-well coupling strength (e2).
    #[arg(long)]
    a: Option<f64>,
    /// Seed of the sampled orthogonal matrix (e3).
    #[arg(long)]
    q_seed: Option<u64>,
}

impl ProblemArgs {
    fn options(&self) -> BuiltinOptions {
        BuiltinOptions {
            a: self.a,
            q: None,
            q_seed: self.q_seed,
            cutoff_inner: None,
            cutoff_outer: None,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    alpha: f64,
    /// Particle count M.
    #[arg(long, short = 'M')]
    particles: usize,
    #[arg(long)]
    dt: f64,
    /// Total simulated time T.
    #[arg(long, short = 'T')]
    horizon: f64,
    /// Defaults to T/2, or T/8 when warm-started from an ensemble.
    #[arg(long)]
    burn_in: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Warm-start positions from a saved ensemble CSV.
    #[arg(long)]
    init_ensemble: Option<PathBuf>,
    /// Directory for JSON metadata, the per-step series, and the final
    /// ensemble; nothing is written without it.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML sweep configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    /// Vary the total simulated time.
    T,
    /// Vary the step size.
    Dt,
}

#[derive(Args)]
struct ConvergeArgs {
    /// Problem with an exact eigenvalue: le1 or le2.
    #[arg(long)]
    problem: String,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated grid of horizons or step sizes.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    alpha: f64,
    #[arg(long, short = 'M')]
    particles: usize,
    /// Step size, used when the axis is t.
    #[arg(long, default_value_t = 0.0078125)]
    dt: f64,
    /// Horizon, used when the axis is dt.
    #[arg(long, short = 'T', default_value_t = 512.0)]
    horizon: f64,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    /// Burn-in as a fraction of each run's horizon.
    #[arg(long, default_value_t = 0.0)]
    burn_in_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the report CSV and JSON.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReferenceArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = -0.1)]
    alpha_min: f64,
    #[arg(long, default_value_t = 1.1)]
    alpha_max: f64,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DensityArgs {
    /// Saved ensemble CSV.
    #[arg(long)]
    ensemble: PathBuf,
    /// Two coordinate indices, e.g. 0,1.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    axes: Vec<usize>,
    /// Bin counts per axis.
    #[arg(long, value_delimiter = ',', default_value = "100,100")]
    bins: Vec<usize>,
    /// Explicit range x_min,x_max,y_min,y_max; auto-fitted if absent.
    #[arg(long, value_delimiter = ',')]
    range: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EpDirectArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.005)]
    dt: f64,
    #[arg(long, short = 'T', default_value_t = 40.0)]
    horizon: f64,
    #[arg(long, default_value_t = 4.0)]
    burn_in: f64,
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_run(args: &RunArgs) -> Result<(), CoreError> {
    let problem = builtin_problem(&args.problem.problem, &args.problem.options())?;
    let (initial, default_burn) = match &args.init_ensemble {
        Some(path) => {
            let (ens, _) = read_ensemble_csv(path)?;
            if ens.dim != problem.dim {
                return Err(CoreError::DimensionMismatch(format!(
                    "ensemble dimension {} does not match problem dimension {}",
                    ens.dim, problem.dim
                )));
            }
            (InitialMeasure::Positions(ens.positions), args.horizon / 8.0)
        }
        None => (InitialMeasure::StandardGaussian, args.horizon / 2.0),
    };
    let burn_in = args.burn_in.unwrap_or(default_burn);
    let config = RunConfig {
        params: WeightParams::new(args.epsilon, args.alpha)?,
        n_particles: args.particles,
        dt: args.dt,
        horizon: args.horizon,
        burn_in,
        seed: args.seed,
        initial,
    };
    config.validate(problem.dim)?;
    let out = run_ipm(&problem, &config)?;
    println!("{SUMMARY_HEADER}");
    println!(
        "{},{},{},,1,{},{},{},{},{}",
        args.epsilon,
        args.alpha,
        out.result.lambda_hat,
        burn_in,
        args.particles,
        args.dt,
        args.horizon,
        args.seed
    );
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::json!({
            "problem": args.problem.problem,
            "epsilon": args.epsilon,
            "alpha": args.alpha,
            "seed": args.seed,
            "n_particles": args.particles,
            "dt": args.dt,
            "horizon": args.horizon,
            "burn_in": burn_in,
            "lambda_hat": out.result.lambda_hat,
            "min_ess": out.result.min_ess(),
            "wall_time_secs": out.result.wall_time_secs,
            "warm_start_source": args.init_ensemble.as_ref().map(|p| p.display().to_string()),
        });
        std::fs::write(
            dir.join("run.json"),
            serde_json::to_string_pretty(&meta)
                .map_err(|e| CoreError::InvalidConfig(e.to_string()))?,
        )?;
        write_series_csv(&dir.join("series.csv"), &out.result.per_step, args.dt)?;
        write_ensemble_csv(
            &dir.join("ensemble.csv"),
            &out.final_ensemble,
            &EnsembleMeta {
                problem: args.problem.problem.clone(),
                epsilon: args.epsilon,
                alpha: args.alpha,
                seed: args.seed,
            },
        )?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32, CoreError> {
    let mut config = SweepConfig::from_toml_file(&args.config)?;
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let outcome = run_sweep(&config)?;
    eprintln!(
        "sweep: {} rows, {} failed runs -> {}",
        outcome.rows.len(),
        outcome.failures.len(),
        config.output_dir.display()
    );
    Ok(if outcome.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}

fn cmd_converge(args: &ConvergeArgs) -> Result<(), CoreError> {
    let mut grid = args.grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = HarnessConfig {
        problem: args.problem.clone(),
        axis: match args.axis {
            AxisArg::T => Axis::Horizon,
            AxisArg::Dt => Axis::Dt,
        },
        grid,
        epsilon: args.epsilon,
        alpha: args.alpha,
        n_particles: args.particles,
        dt: args.dt,
        horizon: args.horizon,
        replicates: args.replicates,
        seed: args.seed,
        burn_in_fraction: args.burn_in_fraction,
    };
    let report = convergence_harness(&h)?;
    std::fs::create_dir_all(&args.out_dir)?;
    ipm_cli::converge::write_report_csv(&args.out_dir.join("convergence.csv"), &report)?;
    std::fs::write(
        args.out_dir.join("convergence.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| CoreError::InvalidConfig(e.to_string()))?,
    )?;
    println!(
        "slope {} +- {} over {} points",
        report.slope,
        report.slope_half_width,
        report.points.len()
    );
    Ok(())
}

fn cmd_reference(args: &ReferenceArgs) -> Result<(), CoreError> {
    if args.count < 1 {
        return Err(CoreError::InvalidConfig("count must be >= 1".into()));
    }
    let alphas: Vec<f64> = if args.count == 1 {
        vec![args.alpha_min]
    } else {
        (0..args.count)
            .map(|j| {
                args.alpha_min
                    + j as f64 * (args.alpha_max - args.alpha_min) / (args.count - 1) as f64
            })
            .collect()
    };
    let q = if args.problem.problem == "e3" {
        Some(resolve_e3_q(&args.problem.options())?)
    } else {
        None
    };
    let a = args.problem.a.unwrap_or(E2_DEFAULT_A);
    let wrote = write_reference_csv(&args.out, &args.problem.problem, a, q.as_ref(), &alphas)?;
    if !wrote {
        return Err(CoreError::InvalidConfig(format!(
            "problem `{}` has no reference curve",
            args.problem.problem
        )));
    }
    Ok(())
}

fn cmd_density(args: &DensityArgs) -> Result<(), CoreError> {
    if args.axes.len() != 2 || args.bins.len() != 2 {
        return Err(CoreError::InvalidConfig(
            "--axes and --bins each take exactly two values".into(),
        ));
    }
    let range = match &args.range {
        None => None,
        Some(v) if v.len() == 4 => Some(((v[0], v[1]), (v[2], v[3]))),
        Some(_) => {
            return Err(CoreError::InvalidConfig(
                "--range takes x_min,x_max,y_min,y_max".into(),
            ))
        }
    };
    let (ens, _) = read_ensemble_csv(&args.ensemble)?;
    let hist = final_density(
        &ens,
        (args.axes[0], args.axes[1]),
        (args.bins[0], args.bins[1]),
        range,
    )?;
    write_histogram_csv(&args.out, &hist)?;
    Ok(())
}

fn cmd_ep_direct(args: &EpDirectArgs) -> Result<(), CoreError> {
    let problem = builtin_problem(&args.problem.problem, &args.problem.options())?;
    let rate = direct_entropy_production(
        &problem,
        args.epsilon,
        args.dt,
        args.horizon,
        args.burn_in,
        args.paths,
        args.seed,
    )?;
    println!("mean_ep_rate,{rate}");
    Ok(())
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|()| EXIT_OK),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Converge(args) => cmd_converge(args).map(|()| EXIT_OK),
        Command::Reference(args) => cmd_reference(args).map(|()| EXIT_OK),
        Command::Density(args) => cmd_density(args).map(|()| EXIT_OK),
        Command::EpDirect(args) => cmd_ep_direct(args).map(|()| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() {
    std::process::exit(real_main());
}
