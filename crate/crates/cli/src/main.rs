use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use frl_core::sim::{accuracy_stats, control_error, format_mean_std, run_simulation, RunLog, SimConfig};
use frl_core::theory::{theory_grid, TheoryRow};
use frl_core::FrlError;

const OUT_DIR_ENV: &str = "FRL_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "frl-out";

#[derive(Parser, Debug)]
#[command(name = "frl", version, about = "Federated rank learning simulator and attack analysis")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one simulation and write manifest.json and rounds.csv.
    Simulate {
        /// JSON run configuration.
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory (defaults to $FRL_OUT_DIR or ./frl-out).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Replace the seed stored in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the vulnerable range and crossing probability on a grid.
    Theory {
        /// JSON grid file: {"alphas": [...], "sigmas": [...], "ns": [...], "k": .., "trials": .., "seed": ..}.
        #[arg(short, long, conflicts_with_all = ["alpha", "sigma", "n"])]
        grid: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        alpha: Vec<f64>,
        /// Score spread; defaults to n / 20 for each n.
        #[arg(long, num_args = 1..)]
        sigma: Vec<f64>,
        #[arg(short, long, num_args = 1..)]
        n: Vec<usize>,
        #[arg(short, long, default_value_t = 0.5)]
        k: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Summarise finished runs as mean (±std) control error in percent.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Target accuracy; defaults to the one in each run's config.
        #[arg(long)]
        tau: Option<f64>,
        /// Trailing rounds to summarise.
        #[arg(long, default_value_t = 50)]
        window: usize,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn load_config(path: &Path) -> Result<SimConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    SimConfig::from_json(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

fn simulate(config: &Path, out: PathBuf, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    log::info!("config hash {}", cfg.hash());
    match run_simulation(&cfg) {
        Ok(log) => {
            log.write_to(&out)
                .map_err(|e| Failure::Runtime(format!("writing {}: {e}", out.display())))?;
            if let Some(s) = &log.manifest.summary {
                println!(
                    "{} rounds, final accuracy {:.4}, trigger round {}",
                    s.rounds_run,
                    s.final_acc,
                    log.manifest.trigger_round.map_or_else(|| "-".to_string(), |r| r.to_string())
                );
            }
            Ok(())
        }
        Err(failure) => {
            let flushed = failure.log.write_to(&out);
            let note = match flushed {
                Ok(()) => format!("partial log written to {}", out.display()),
                Err(e) => format!("partial log could not be written: {e}"),
            };
            Err(Failure::Runtime(format!("{failure}; {note}")))
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    ns: Vec<usize>,
    #[serde(default = "half")]
    k: f64,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    seed: u64,
}

fn half() -> f64 {
    0.5
}

fn default_trials() -> usize {
    100_000
}

fn theory_csv(rows: &[TheoryRow]) -> String {
    let mut out = String::from("alpha,sigma,n,k,L,U,P_formula,P_mc,stderr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.alpha, r.sigma, r.n, r.k, r.lower, r.upper, r.p_formula, r.p_mc, r.stderr
        );
    }
    out
}

fn usage_or_runtime(e: FrlError) -> Failure {
    match e {
        FrlError::Parameter(_) | FrlError::Config(_) | FrlError::Validation(_) => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

fn theory(grid: GridFile, out: PathBuf) -> Result<(), Failure> {
    if grid.alphas.is_empty() || grid.ns.is_empty() {
        return Err(Failure::Usage("theory grid needs at least one alpha and one n".into()));
    }
    if grid.trials == 0 {
        return Err(Failure::Usage("trials must be positive".into()));
    }
    let rows = if grid.sigmas.is_empty() {
        let mut rows = Vec::new();
        for &n in &grid.ns {
            rows.extend(
                theory_grid(&grid.alphas, &[n as f64 / 20.0], &[n], grid.k, grid.trials, grid.seed)
                    .map_err(usage_or_runtime)?,
            );
        }
        rows
    } else {
        theory_grid(&grid.alphas, &grid.sigmas, &grid.ns, grid.k, grid.trials, grid.seed).map_err(usage_or_runtime)?
    };
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("creating {}: {e}", out.display())))?;
    let path = out.join("theory.csv");
    std::fs::write(&path, theory_csv(&rows)).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))?;
    println!("{} rows written to {}", rows.len(), path.display());
    Ok(())
}

fn report(runs: &[PathBuf], tau: Option<f64>, window: usize, csv: Option<PathBuf>) -> Result<(), Failure> {
    let mut table = String::from("run,tau,rounds,xi_mean,xi_std,acc_mean,acc_std\n");
    for dir in runs {
        let log = RunLog::read_from(dir).map_err(|e| Failure::Usage(format!("cannot load run {}: {e}", dir.display())))?;
        if log.records.is_empty() {
            return Err(Failure::Usage(format!("run {} has no rounds", dir.display())));
        }
        let w = window.min(log.records.len());
        let (acc_mean, acc_std) = accuracy_stats(&log.records, w).map_err(usage_or_runtime)?;
        let cfg = &log.manifest.config;
        let tau = tau.or(cfg.attack.tau.filter(|_| cfg.attack.kind != frl_core::sim::AttackKind::None));
        let label = format!("{:?}/{:?}", cfg.attack.kind, cfg.aggregator.kind).to_lowercase();
        match tau {
            Some(t) => {
                let (m, s) = control_error(&log.records, t, w).map_err(usage_or_runtime)?;
                println!(
                    "{}\t{label}\ttau={t}\txi%={}\tacc={}",
                    dir.display(),
                    format_mean_std(m, s),
                    format_mean_std(acc_mean, acc_std)
                );
                let _ = writeln!(table, "{},{t},{},{m},{s},{acc_mean},{acc_std}", dir.display(), log.records.len());
            }
            None => {
                let first = log.records[0].acc;
                let last = log.records.last().map_or(first, |r| r.acc);
                let best = log.records.iter().map(|r| r.acc).fold(0.0, f64::max);
                println!(
                    "{}\t{label}\trounds={}\tacc first={first:.4} best={best:.4} final={last:.4}\tacc%={}",
                    dir.display(),
                    log.records.len(),
                    format_mean_std(acc_mean, acc_std)
                );
                let _ = writeln!(table, "{},,{},,,{acc_mean},{acc_std}", dir.display(), log.records.len());
            }
        }
    }
    if let Some(path) = csv {
        std::fs::write(&path, table).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, out, seed } => simulate(&config, out_dir(out), seed),
        Command::Theory {
            grid,
            alpha,
            sigma,
            n,
            k,
            trials,
            seed,
            out,
        } => {
            let grid = match grid {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Failure::Usage(format!("cannot read grid {}: {e}", path.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Failure::Usage(format!("invalid grid {}: {e}", path.display())))?
                }
                None => GridFile {
                    alphas: alpha,
                    sigmas: sigma,
                    ns: n,
                    k,
                    trials,
                    seed,
                },
            };
            theory(grid, out_dir(out))
        }
        Command::Report { runs, tau, window, csv } => report(&runs, tau, window, csv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
