use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use nncert_cli::commands::{
    cmd_bounds_plot, cmd_certify, cmd_eval, cmd_make_toy, cmd_oracle_check, ToyOptions,
};
use nncert_cli::config::{Overrides, RunConfig};
use nncert_cli::CliError;
use nncert_core::oracle::SuiteOptions;

/// Certified robustness radii for 1-NN retrieval under Gaussian smoothing.
///
/// Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 oracle
/// failure. RG_THREADS caps the number of worker threads.
#[derive(Parser)]
#[command(name = "nncert", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify every query of a config against its gallery.
    Certify(CertifyArgs),
    /// Recompute a Recall@1(r) curve from a records file.
    Eval {
        #[arg(long)]
        records: PathBuf,
        /// auto, auto:N, linspace:STOP:N, or a comma-separated list starting at 0.
        #[arg(long, default_value = "auto")]
        grid: String,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tight vs. loose Lipschitz bound of the smoothed embedding over distance.
    #[command(allow_negative_numbers = true)]
    BoundsPlot {
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long = "f", default_value_t = 1.0)]
        f: f64,
        #[arg(long, default_value_t = 1.0)]
        dist_max: f64,
        #[arg(long, default_value_t = 101)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare engine quantities against analytic and numerical oracles.
    OracleCheck {
        /// Take the seed from this config's `seed` field.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        lipschitz_trials: usize,
        #[arg(long, default_value_t = 200)]
        concentration_trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: zero the Chernoff radius in the concentration check.
        #[arg(long, hide = true)]
        inject_zero_epsilon: bool,
    },
    /// Write a small two-cluster dataset and config for the toy MLP.
    MakeToy {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        gallery_per_class: usize,
        #[arg(long, default_value_t = 5)]
        queries_per_class: usize,
    },
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct CertifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Monte-Carlo samples per input; accepts integers like 1e5.
    #[arg(long, value_parser = parse_count)]
    n: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grid: Option<String>,
}

fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64 => Ok(v as u64),
        _ => Err(format!("`{s}` is not a nonnegative integer")),
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(anyhow!(
            "RG_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Certify(a) => {
            let overrides = Overrides {
                sigma: a.sigma,
                n: a.n,
                alpha: a.alpha,
                seed: a.seed,
                out: a.out,
                batch_size: a.batch_size,
                grid: a.grid,
            };
            let out = cmd_certify(a.config.as_deref(), &overrides)?;
            let c = &out.summary.counts;
            eprintln!(
                "{} queries: {} certified, {} score 0, {} rejected; recall@1 {:.4}",
                c.queries, c.certified, c.zero, c.rejected, out.summary.recall_at_1
            );
            println!("{}", out.run_dir.display());
        }
        Command::Eval { records, grid, out } => {
            cmd_eval(&records, &grid, out.as_deref())?;
        }
        Command::BoundsPlot {
            sigma,
            f,
            dist_max,
            points,
            out,
        } => {
            cmd_bounds_plot(sigma, f, dist_max, points, out.as_deref())?;
        }
        Command::OracleCheck {
            config,
            seed,
            lipschitz_trials,
            concentration_trials,
            out,
            inject_zero_epsilon,
        } => {
            let from_file = match &config {
                Some(p) => RunConfig::load(p)?.seed,
                None => None,
            };
            let opts = SuiteOptions {
                seed: seed.or(from_file).unwrap_or(0),
                epsilon_scale: if inject_zero_epsilon { 0.0 } else { 1.0 },
                lipschitz_trials,
                concentration_trials,
            };
            cmd_oracle_check(&opts, out.as_deref())?;
        }
        Command::MakeToy {
            dir,
            seed,
            gallery_per_class,
            queries_per_class,
        } => {
            let opts = ToyOptions {
                data_seed: seed,
                gallery_per_class,
                queries_per_class,
                ..ToyOptions::default()
            };
            println!("{}", cmd_make_toy(&dir, &opts)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; --help and --version are not errors.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nncert: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
