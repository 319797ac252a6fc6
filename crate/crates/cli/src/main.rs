//! Command-line front end: order selection, BIC baseline, simulation grids, estimator
//! benchmarks and rate probes. Reports are JSON on stdout unless a table is requested.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use hmm_order::bench::{run_bench, write_reports, BenchKind, BenchSpec};
use hmm_order::em::{bic_select, DEFAULT_RESTARTS};
use hmm_order::harness::{build_transition, run_grid, write_table, GridSpec, TransitionKind};
use hmm_order::hmm::HmmParams;
use hmm_order::impfn::Tail;
use hmm_order::io::{read_csv, read_json, read_trajectory};
use hmm_order::ncest::{EstimatorConfig, Method};
use hmm_order::reparam::ModelKind;
use hmm_order::select::{consistency_probe, select_k_mixture, select_k};
use hmm_order::{Error, Trajectory};

#[derive(Parser, Debug)]
#[command(name = "hmm-order", version, about = "Choose the number of hidden states of a Gaussian HMM by marginal likelihood")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Master random seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Normalizing-constant estimator.
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// Kernel of the importance function (default: t3 for IS, gauss for RIS).
    #[arg(long, global = true, value_enum)]
    tail: Option<TailArg>,
    /// Largest number of states considered.
    #[arg(long, global = true)]
    kmax: Option<usize>,
    /// JSON file with defaults for the options above and the estimator settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Is,
    Ris,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TailArg {
    Gauss,
    T2,
    T3,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BenchModel {
    Gaussmix3,
    Mixed3d,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum QArg {
    P1,
    P2,
    P3,
    P4,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select K by estimated marginal likelihood.
    Select {
        /// Trajectory file (CSV or .json); `-` or absent reads stdin.
        #[arg(long)]
        input: Option<String>,
        /// Use the finite-mixture model instead of the HMM.
        #[arg(long)]
        mixture: bool,
    },
    /// Select K by BIC over multi-start Baum-Welch fits.
    Bic {
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value_t = DEFAULT_RESTARTS)]
        restarts: usize,
    },
    /// Run a simulation grid and print the frequency table as CSV.
    Simulate {
        /// Simulation grid file (JSON).
        #[arg(long)]
        grid: PathBuf,
        /// Also write the full per-replication archive here.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Estimate known normalizing constants and print the interval table as CSV.
    NcVerify {
        #[arg(long, value_enum, default_value = "gaussmix3")]
        model: BenchModel,
        /// Dimension of the Gaussian-mixture target.
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 2000)]
        n_sim: usize,
        #[arg(long, default_value_t = 4000)]
        n_is: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 6)]
        components: usize,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Mean log marginal-likelihood ratios against the true K over a grid of sample sizes.
    ProbeRates {
        #[arg(long, default_value_t = 2)]
        k_star: usize,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, value_enum, default_value = "p2")]
        q: QArg,
        /// Comma-separated increasing sample sizes.
        #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4000")]
        n_grid: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
}

/// Contents of `--config`; command-line flags take precedence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    kmax: Option<usize>,
    threads: Option<usize>,
    estimator: Option<EstimatorConfig>,
}

#[derive(Debug, Clone, Serialize)]
struct Resolved {
    seed: u64,
    kmax: usize,
    estimator: EstimatorConfig,
    tail: Tail,
}

const DEFAULT_SEED: u64 = 1;
const DEFAULT_KMAX: usize = 6;

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn resolve(g: &GlobalOpts) -> Result<Resolved, Failure> {
    let file = match &g.config {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| Failure::Usage(format!("cannot open config {}: {e}", p.display())))?;
            serde_json::from_reader::<_, FileConfig>(f).map_err(|e| Failure::Usage(format!("bad config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let mut estimator = file.estimator.unwrap_or_default();
    if let Some(m) = g.method {
        estimator.method = match m {
            MethodArg::Is => Method::Is,
            MethodArg::Ris => Method::Ris,
        };
    }
    if let Some(t) = g.tail {
        estimator.tail = Some(match t {
            TailArg::Gauss => Tail::Gaussian,
            TailArg::T2 => Tail::StudentT { df: 2.0 },
            TailArg::T3 => Tail::StudentT { df: 3.0 },
        });
    }
    let threads = g.threads.or(file.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let kmax = g.kmax.or(file.kmax).unwrap_or(DEFAULT_KMAX);
    if kmax == 0 {
        return Err(Failure::Usage("--kmax must be at least 1".into()));
    }
    let tail = estimator.tail();
    Ok(Resolved { seed: g.seed.or(file.seed).unwrap_or(DEFAULT_SEED), kmax, estimator, tail })
}

fn load_input(input: Option<&str>) -> Result<Trajectory, Failure> {
    match input {
        None | Some("-") => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf).map_err(Error::from)?;
            let t = if buf.trim_start().starts_with('{') {
                read_json(buf.as_bytes())
            } else {
                read_csv(buf.as_bytes())
            };
            t.map_err(|e| Failure::Usage(format!("cannot read trajectory from stdin: {e}")))
        }
        Some(p) => read_trajectory(Path::new(p)).map_err(|e| Failure::Usage(format!("cannot read {p}: {e}"))),
    }
}

fn print_json(v: &serde_json::Value) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(Error::from)?;
    writeln!(out).map_err(Error::from)?;
    Ok(())
}

fn write_json_file(path: &Path, v: &impl Serialize) -> Result<(), Failure> {
    let f = std::fs::File::create(path).map_err(Error::from)?;
    serde_json::to_writer_pretty(f, v).map_err(Error::from)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Select { input, mixture } => {
            let traj = load_input(input.as_deref())?;
            let sel = if mixture {
                select_k_mixture(&traj.obs, cfg.kmax, &cfg.estimator, cfg.seed)?
            } else {
                select_k(&traj.obs, cfg.kmax, &cfg.estimator, cfg.seed)?
            };
            print_json(&json!({
                "k_hat": sel.k_hat,
                "k_argmax": sel.k_argmax,
                "indistinguishable": sel.indistinguishable,
                "model": if mixture { ModelKind::Mixture } else { ModelKind::Hmm },
                "n": traj.obs.len(),
                "estimates": sel.per_k,
                "config": cfg,
            }))
        }
        Command::Bic { input, restarts } => {
            if restarts == 0 {
                return Err(Failure::Usage("--restarts must be at least 1".into()));
            }
            let traj = load_input(input.as_deref())?;
            let sel = bic_select(&traj.obs, 1, cfg.kmax, 2, restarts, cfg.seed)?;
            print_json(&json!({
                "k_hat": sel.k_hat,
                "scores": sel.scores,
                "config": { "seed": cfg.seed, "kmax": cfg.kmax, "restarts": restarts, "obs_dim": 2 },
            }))
        }
        Command::Simulate { grid, json_out } => {
            let f = std::fs::File::open(&grid).map_err(|e| Failure::Usage(format!("cannot open grid {}: {e}", grid.display())))?;
            let mut spec: GridSpec =
                serde_json::from_reader(f).map_err(|e| Failure::Usage(format!("bad grid {}: {e}", grid.display())))?;
            if cli.global.method.is_some() || cli.global.tail.is_some() || cli.global.config.is_some() {
                spec.config.estimator = cfg.estimator.clone();
            }
            if let Some(seed) = cli.global.seed {
                spec.cells.iter_mut().for_each(|c| c.master_seed = seed);
            }
            let rows = run_grid(&spec)?;
            if let Some(p) = json_out {
                write_json_file(&p, &json!({ "grid": spec, "rows": rows }))?;
            }
            write_table(&rows, std::io::stdout().lock())?;
            Ok(())
        }
        Command::NcVerify { model, dim, n_sim, n_is, reps, components, json_out } => {
            let kind = match model {
                BenchModel::Gaussmix3 => BenchKind::GaussMix3 { d: dim },
                BenchModel::Mixed3d => BenchKind::Mixed3D,
            };
            let mut spec = BenchSpec::new(kind, n_sim, n_is, cfg.estimator.method, cfg.tail, reps, cfg.seed);
            spec.n_components = components;
            let report = run_bench(&spec)?;
            if let Some(p) = json_out {
                write_json_file(&p, &report)?;
            }
            write_reports(std::slice::from_ref(&report), std::io::stdout().lock())?;
            Ok(())
        }
        Command::ProbeRates { k_star, sigma, q, n_grid, reps } => {
            let kind = match q {
                QArg::P1 => TransitionKind::P1,
                QArg::P2 => TransitionKind::P2,
                QArg::P3 => TransitionKind::P3,
                QArg::P4 => TransitionKind::P4,
            };
            if !(sigma > 0.0) || k_star == 0 {
                return Err(Failure::Usage("--sigma must be positive and --k-star at least 1".into()));
            }
            let trans = build_transition::<f64>(kind, k_star).map_err(|e| Failure::Usage(e.to_string()))?;
            let params = HmmParams::new(trans, (1..=k_star).map(|m| m as f64).collect(), vec![sigma * sigma; k_star])?;
            let ks: Vec<usize> = (k_star.saturating_sub(1).max(1)..=k_star + 1).collect();
            let report = consistency_probe(&params, &ks, &n_grid, reps, &cfg.estimator, cfg.seed)?;
            print_json(&json!({ "report": report, "config": cfg }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
