use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mball::config::{parse_config, Experiment, ExperimentConfig};
use mball::run::{run, RunOptions};
use mball::Error;

#[derive(Parser)]
#[command(
    name = "mball",
    version,
    about = "Weighted polynomial inequalities on the unit ball"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value` lines or a JSON object).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the quadrature rule as `rule.csv`.
    #[arg(long)]
    dump_rule: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MarkovKind {
    Worst,
    Average,
}

#[derive(Subcommand)]
enum Command {
    /// Worst- or average-case Markov factors.
    Markov {
        kind: MarkovKind,
        #[command(flatten)]
        common: Common,
    },
    /// Christoffel function comparability scan.
    Christoffel(Common),
    /// Kernel identities and growth bounds.
    KernelCheck(Common),
    /// Needle polynomial positivity and comparability.
    Needle(Common),
    /// Log-log exponent fit of an `(n, value)` CSV.
    Fit(Common),
    /// Orthonormal basis coefficients.
    Basis(Common),
    /// Invariant checks for every module.
    Selftest(Common),
    /// Runs whichever experiment the config names.
    Run(Common),
}

fn load(
    common: &Common,
    kind: Option<Experiment>,
) -> Result<(ExperimentConfig, RunOptions), Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                line: 0,
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            parse_config(&text)?
        }
        None if kind.is_none() => {
            return Err(Error::Config {
                line: 0,
                message: "`run` needs --config".into(),
            })
        }
        None => ExperimentConfig::default(),
    };
    if let Some(kind) = kind {
        cfg.experiment = kind;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    let base_dir = common
        .config
        .as_ref()
        .and_then(|p| p.parent())
        .map(|p| p.to_path_buf());
    Ok((
        cfg,
        RunOptions {
            dump_rule: common.dump_rule,
            base_dir,
        },
    ))
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("MBALL_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "MBALL_THREADS must be a positive integer, got '{v}'"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, kind) = match &cli.command {
        Command::Markov { kind, common } => (
            common,
            Some(match kind {
                MarkovKind::Worst => Experiment::Worst,
                MarkovKind::Average => Experiment::Average,
            }),
        ),
        Command::Christoffel(c) => (c, Some(Experiment::Christoffel)),
        Command::KernelCheck(c) => (c, Some(Experiment::KernelCheck)),
        Command::Needle(c) => (c, Some(Experiment::Needle)),
        Command::Fit(c) => (c, Some(Experiment::Fit)),
        Command::Basis(c) => (c, Some(Experiment::Basis)),
        Command::Selftest(c) => (c, Some(Experiment::Selftest)),
        Command::Run(c) => (c, None),
    };
    let outcome = init_threads()
        .and_then(|_| load(common, kind))
        .and_then(|(cfg, opts)| {
            let rec = run(&cfg, &opts)?;
            let files = rec.write(&cfg.output)?;
            Ok((rec, files))
        });
    match outcome {
        Ok((rec, files)) => {
            for c in &rec.checks {
                println!(
                    "{} {} = {:.6e} ({})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.bound
                );
            }
            for f in files {
                println!("wrote {}", f.display());
            }
            if rec.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
