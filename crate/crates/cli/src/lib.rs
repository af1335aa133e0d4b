//! Command-line front end: instance generation, identifiability checks,
//! single solves, and the two experiment campaigns.
//!
//! Exit codes: 0 on success, 1 when `solve` does not converge, 2 on bad
//! input (unreadable or malformed files, invalid flags).

pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mcbd::experiments::{
    fit_log_slope, run_noise_sweep, run_phase_grid, sample_instance, GridSpec, NoiseSpec,
};
use mcbd::identifiability::{analyze_with, make_counterexample, AnalysisOptions, CounterexampleKind, IdentifiabilityReport};
use mcbd::instance_file::{InstanceFile, NoiseBlock};
use mcbd::model::{make_instance, relative_outer_error, ProblemDims};
use mcbd::solver::{solve_traced, SolverConfig, TraceRow};

#[derive(Debug, Parser)]
#[command(name = "mcbd", version, about = "Multi-channel blind deconvolution with short filters")]
struct Cli {
    /// Seed for every random draw (instances, noise, initializations).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for CSV and SVG outputs [default: current directory].
    #[arg(long, global = true, env = "MCBD_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// Use the full-size experiment presets instead of the desk-scale ones.
    #[arg(long, global = true)]
    full_scale: bool,

    #[command(flatten)]
    solver: SolverArgs,

    #[command(subcommand)]
    command: Command,
}

/// Overrides for the solver configuration. Unset flags keep the defaults.
#[derive(Debug, Args)]
struct SolverArgs {
    /// Relative misfit threshold ‖A(pqᵀ) − ŷ‖² ≤ tol·‖ŷ‖² [default: 1e-12; 1.1·σ_noise² for noisy data]
    #[arg(long, global = true)]
    tol_misfit: Option<f64>,
    /// Initial penalty σ₀ [default: 1]
    #[arg(long, global = true)]
    sigma0: Option<f64>,
    /// Penalty growth factor applied when feasibility stalls [default: 10]
    #[arg(long, global = true)]
    penalty_growth: Option<f64>,
    /// Required feasibility shrink factor η per outer iteration [default: 0.25]
    #[arg(long, global = true)]
    feasibility_factor: Option<f64>,
    /// Cap on outer iterations summed over all attempts [default: 2000]
    #[arg(long, global = true)]
    max_outer_iters: Option<usize>,
    /// L-BFGS history length [default: 10]
    #[arg(long, global = true)]
    lbfgs_memory: Option<usize>,
    /// L-BFGS stop: ‖∇‖∞ ≤ tol·max(1, |L|) [default: 1e-8]
    #[arg(long, global = true)]
    lbfgs_grad_tol: Option<f64>,
    /// L-BFGS iteration cap per outer iteration [default: 500]
    #[arg(long, global = true)]
    lbfgs_max_iters: Option<usize>,
    /// Outer iterations inspected by the plateau test [default: 20]
    #[arg(long, global = true)]
    plateau_window: Option<usize>,
    /// Relative misfit decrease over the window that counts as progress [default: 1e-3]
    #[arg(long, global = true)]
    plateau_rel_decrease: Option<f64>,
    /// A plateau only triggers a restart above this multiple of the target misfit [default: 1e3]
    #[arg(long, global = true)]
    plateau_misfit_factor: Option<f64>,
    /// Restarts allowed before giving up [default: 50]
    #[arg(long, global = true)]
    max_restarts: Option<usize>,
    /// Seed for the solver's initializations [default: --seed for `solve`, 0 for experiments]
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    /// Below tolerance, keep iterating until an outer step gains less than this fraction [default: 0; 1e-3 for noisy data]
    #[arg(long, global = true)]
    refine_rel_decrease: Option<f64>,
}

impl SolverArgs {
    fn apply(&self, mut c: SolverConfig) -> SolverConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            tol_misfit,
            sigma0,
            penalty_growth,
            feasibility_factor,
            max_outer_iters,
            lbfgs_memory,
            lbfgs_grad_tol,
            lbfgs_max_iters,
            plateau_window,
            plateau_rel_decrease,
            plateau_misfit_factor,
            max_restarts,
            rng_seed,
            refine_rel_decrease
        );
        c
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample an instance and write it in the instance file format.
    Gen {
        #[arg(long = "L", visible_alias = "signal-len")]
        signal_len: usize,
        #[arg(long = "K", visible_alias = "filter-len")]
        filter_len: usize,
        #[arg(long = "N", visible_alias = "channels")]
        num_channels: usize,
        /// Append a NOISE line at this per-channel SNR (dB).
        #[arg(long)]
        snr: Option<f64>,
        /// Replace the channels by a condition-violating family:
        /// `no-top-tap` or `shared-root[:β]`.
        #[arg(long)]
        counterexample: Option<CounterexampleKind>,
        /// Output file [default: stdout].
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Report the identifiability conditions and Jacobian spectrum of an instance.
    Check {
        file: PathBuf,
        /// Relative singular-value cutoff for the null-space count.
        #[arg(long)]
        rel_tol: Option<f64>,
        /// Print only the CSV header and row.
        #[arg(long)]
        csv: bool,
    },
    /// Solve one instance and compare with its ground truth.
    Solve {
        file: PathBuf,
        /// Write a per-outer-iteration trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the phase-transition grid.
    Phase {
        #[arg(long)]
        signal_len: Option<usize>,
        /// Channel counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        channels: Vec<usize>,
        /// Filter lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        filters: Vec<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Relative outer-product error below which a trial counts as a success.
        #[arg(long)]
        threshold: Option<f64>,
        /// Worker threads [default: all cores].
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        no_plots: bool,
    },
    /// Run the noise-robustness sweep.
    Noise {
        #[arg(long)]
        signal_len: Option<usize>,
        #[arg(long)]
        filter_len: Option<usize>,
        /// Channel counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        channels: Vec<usize>,
        /// SNR values in dB, comma separated (`inf` for noiseless).
        #[arg(long, value_delimiter = ',')]
        snr: Vec<f64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        no_plots: bool,
    },
    /// Render SVG figures from previously written CSVs.
    Plot {
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Boundary CSV; recomputed from the grid when omitted.
        #[arg(long)]
        boundary: Option<PathBuf>,
        #[arg(long)]
        noise: Option<PathBuf>,
    },
}

enum Failure {
    Input(String),
    NotConverged,
}

impl From<mcbd::Error> for Failure {
    fn from(e: mcbd::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::NotConverged) => 1,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Gen {
            signal_len,
            filter_len,
            num_channels,
            snr,
            counterexample,
            output,
        } => {
            let dims = ProblemDims::new(*signal_len, *filter_len, *num_channels)?;
            gen(cli.seed, dims, *snr, *counterexample, output.as_deref())
        }
        Command::Check { file, rel_tol, csv } => check(file, *rel_tol, *csv),
        Command::Solve { file, trace } => solve_file(cli, file, trace.as_deref()),
        Command::Phase {
            signal_len,
            channels,
            filters,
            trials,
            threshold,
            jobs,
            no_plots,
        } => {
            let mut spec = if cli.full_scale {
                GridSpec::full_scale(cli.seed)
            } else {
                GridSpec::desk(cli.seed)
            };
            if let Some(l) = signal_len {
                spec.signal_len = *l;
                if filters.is_empty() {
                    spec.filter_lens.retain(|k| k <= l);
                }
            }
            if !channels.is_empty() {
                spec.channel_counts = channels.clone();
            }
            if !filters.is_empty() {
                spec.filter_lens = filters.clone();
            }
            if let Some(t) = trials {
                spec.trials_per_cell = *t;
            }
            if let Some(t) = threshold {
                spec.success_threshold = *t;
            }
            phase(cli, &spec, *jobs, !no_plots)
        }
        Command::Noise {
            signal_len,
            filter_len,
            channels,
            snr,
            trials,
            threshold,
            jobs,
            no_plots,
        } => {
            let mut spec = if cli.full_scale {
                NoiseSpec::full_scale(cli.seed)
            } else {
                NoiseSpec::desk(cli.seed)
            };
            let l = signal_len.unwrap_or(spec.configs[0].signal_len);
            let k = filter_len.unwrap_or(spec.configs[0].filter_len);
            let ns: Vec<usize> = if channels.is_empty() {
                spec.configs.iter().map(|d| d.num_channels).collect()
            } else {
                channels.clone()
            };
            spec.configs = ns
                .iter()
                .map(|&n| ProblemDims::new(l, k, n))
                .collect::<mcbd::Result<_>>()?;
            if !snr.is_empty() {
                spec.snr_db_list = snr.clone();
            }
            if let Some(t) = trials {
                spec.trials_per_point = *t;
            }
            if let Some(t) = threshold {
                spec.success_threshold = *t;
            }
            noise(cli, &spec, *jobs, !no_plots)
        }
        Command::Plot {
            grid,
            boundary,
            noise,
        } => plot_command(cli, grid.as_deref(), boundary.as_deref(), noise.as_deref()),
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf, Failure> {
    let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn read_instance(path: &Path) -> Result<InstanceFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    text.parse()
        .map_err(|e: mcbd::Error| Failure::Input(format!("{}: {e}", path.display())))
}

fn gen(
    seed: u64,
    dims: ProblemDims,
    snr: Option<f64>,
    counterexample: Option<CounterexampleKind>,
    output: Option<&Path>,
) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inst = sample_instance(dims, &mut rng);
    if let Some(kind) = counterexample {
        let channels = make_counterexample(dims, kind, &mut rng)?;
        inst = make_instance(dims, inst.signal().to_vec(), channels)?;
    }
    if let Some(s) = snr {
        if s.is_nan() || s == f64::NEG_INFINITY {
            return Err(Failure::Input("--snr must be a number or inf".into()));
        }
    }
    let noise = snr.map(|snr_db| NoiseBlock {
        snr_db,
        seed: seed.wrapping_add(1),
    });
    let file = InstanceFile::from_instance(&inst, noise);
    // Fail now rather than on load (e.g. zero observations with noise).
    file.load()?;
    match output {
        Some(path) => write_file(path, &file.to_string()),
        None => {
            print!("{file}");
            Ok(())
        }
    }
}

fn check(path: &Path, rel_tol: Option<f64>, csv_only: bool) -> Outcome {
    let inst = read_instance(path)?.load()?;
    let mut opts = AnalysisOptions::default();
    if let Some(t) = rel_tol {
        if !(t > 0.0 && t < 1.0) {
            return Err(Failure::Input("--rel-tol must lie in (0, 1)".into()));
        }
        opts.nullspace_rel_tol = t;
    }
    let report = analyze_with(&inst, &opts)?;
    if !csv_only {
        println!("{report}");
        println!(
            "identifiable (all conditions) {}",
            if report.predicts_identifiable() { "yes" } else { "no" }
        );
        println!();
    }
    println!("{}", IdentifiabilityReport::CSV_HEADER);
    println!("{}", report.to_csv());
    Ok(())
}

fn solve_file(cli: &Cli, path: &Path, trace_path: Option<&Path>) -> Outcome {
    let file = read_instance(path)?;
    let inst = file.load()?;
    let mut base = SolverConfig {
        rng_seed: cli.seed,
        ..SolverConfig::default()
    };
    if let Some(noise) = file.noise {
        base = base.with_noise_budget(noise.snr_db);
    }
    let config = cli.solver.apply(base);

    let mut rows = Vec::new();
    let result = solve_traced(&inst, &config, |r| {
        if trace_path.is_some() {
            rows.push(r);
        }
    })?;
    if let Some(tp) = trace_path {
        let mut text = String::from(TraceRow::CSV_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        write_file(tp, &text)?;
    }
    let rel_error = relative_outer_error(&inst.ground_truth(), &result.solution)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "instance         {}", inst.dims());
    let _ = writeln!(out, "converged        {}", result.converged);
    let _ = writeln!(out, "attempts         {}", result.attempts);
    let _ = writeln!(out, "outer iterations {}", result.outer_iters_total);
    let _ = writeln!(
        out,
        "relative misfit  {:.3e}",
        result.final_misfit / inst.observation_energy()
    );
    let _ = writeln!(out, "rel_error        {rel_error:.3e}");
    if result.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Failure::Input("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Input(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn phase(cli: &Cli, spec: &GridSpec, jobs: Option<usize>, plots: bool) -> Outcome {
    let config = cli.solver.apply(SolverConfig::default());
    let dir = out_dir(cli)?;
    let report = with_pool(jobs, || run_phase_grid(spec, &config))??;
    let grid_path = dir.join("phase_grid.csv");
    let boundary_path = dir.join("boundary.csv");
    write_file(&grid_path, &report.grid_csv())?;
    write_file(&boundary_path, &report.boundary_csv())?;
    for &(n, k_star) in &report.boundary {
        let cells: Vec<String> = report
            .cells
            .iter()
            .filter(|c| c.dims.num_channels == n)
            .map(|c| format!("{}:{:.2}", c.dims.filter_len, c.success_prob.unwrap_or(0.0)))
            .collect();
        println!("N={n} K*={k_star}  success by K  {}", cells.join(" "));
    }
    println!("wrote {}", grid_path.display());
    println!("wrote {}", boundary_path.display());
    if plots {
        let rows = plot::read_grid_csv(&grid_path).map_err(Failure::Input)?;
        for p in plot::render_grid(&rows, Some(&report.boundary), &dir).map_err(Failure::Input)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn noise(cli: &Cli, spec: &NoiseSpec, jobs: Option<usize>, plots: bool) -> Outcome {
    let config = cli.solver.apply(SolverConfig::default());
    let dir = out_dir(cli)?;
    let report = with_pool(jobs, || run_noise_sweep(spec, &config))??;
    let path = dir.join("noise.csv");
    write_file(&path, &report.noise_csv())?;
    for d in &spec.configs {
        let curve = report.curve(*d);
        let errs: Vec<String> = curve
            .iter()
            .map(|p| {
                let snr = p.snr_db.map_or("inf".to_string(), |s| s.to_string());
                format!("{snr}:{:.2e}", p.mean_rel_err.unwrap_or(f64::NAN))
            })
            .collect();
        let slope = fit_log_slope(&curve, 10.0)
            .map_or("n/a".to_string(), |s| format!("{s:.4}"));
        println!("{d}  slope/dB {slope}  mean error by SNR  {}", errs.join(" "));
    }
    println!("wrote {}", path.display());
    if plots {
        let rows = plot::read_noise_csv(&path).map_err(Failure::Input)?;
        if rows.iter().any(|r| r.snr_db.is_some()) {
            let p = plot::render_noise(&rows, &dir).map_err(Failure::Input)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn plot_command(cli: &Cli, grid: Option<&Path>, boundary: Option<&Path>, noise: Option<&Path>) -> Outcome {
    if grid.is_none() && noise.is_none() {
        return Err(Failure::Input("plot needs --grid and/or --noise".into()));
    }
    if boundary.is_some() && grid.is_none() {
        return Err(Failure::Input("--boundary requires --grid".into()));
    }
    let dir = out_dir(cli)?;
    if let Some(g) = grid {
        let rows = plot::read_grid_csv(g).map_err(Failure::Input)?;
        let boundary = boundary
            .map(plot::read_boundary_csv)
            .transpose()
            .map_err(Failure::Input)?;
        for p in plot::render_grid(&rows, boundary.as_deref(), &dir).map_err(Failure::Input)? {
            println!("wrote {}", p.display());
        }
    }
    if let Some(n) = noise {
        let rows = plot::read_noise_csv(n).map_err(Failure::Input)?;
        let p = plot::render_noise(&rows, &dir).map_err(Failure::Input)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}
