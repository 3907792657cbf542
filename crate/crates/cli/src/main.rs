use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kinlr::config::RunConfig;
use kinlr::driver::{compare, rankscan, run, write_rankscan, write_rankscan_to, SimState};
use kinlr::reference::ProfileNorm;

/// Low-rank Vlasov-Poisson solvers.
///
/// `KINLR_THREADS` caps the worker threads of the dense kernels.
#[derive(Parser, Debug)]
#[command(name = "kinlr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a configuration; writes the diagnostics CSV and snapshots.
    Run {
        config: PathBuf,
    },
    /// Relative differences between two snapshot directories (or files).
    /// The second argument is the reference.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Norm::Fro)]
        norm: Norm,
        /// Exit with status 1 when the largest difference exceeds this.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Dense run of a configuration reporting `t,rank_f,rank_E_energy`.
    Rankscan {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = Norm::Max)]
        norm: Norm,
        /// CSV destination; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Norm {
    Fro,
    Max,
}

impl From<Norm> for ProfileNorm {
    fn from(n: Norm) -> Self {
        match n {
            Norm::Fro => ProfileNorm::Frobenius,
            Norm::Max => ProfileNorm::Max,
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("KINLR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("KINLR_THREADS = {raw:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::from_path(&config).with_context(|| format!("reading {}", config.display()))?;
            let out = run(&cfg)?;
            let last = out.records.last().expect("a run records t = 0");
            let rank = match &out.state {
                SimState::LowRank(s) => s.rank(),
                SimState::Dense(_) => last.rank,
            };
            println!(
                "{}: {} steps to t = {}, rank {}, mass drift {:.3e}, wrote {}",
                cfg.integrator.name(),
                out.records.len() - 1,
                last.t,
                rank,
                (last.mass - out.records[0].mass) / out.records[0].mass,
                cfg.out_csv.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { a, b, norm, tol } => {
            let report = compare(&a, &b, norm.into())?;
            println!("{report}");
            match tol {
                Some(tol) if report.max() > tol => {
                    eprintln!("max relative difference {:.6e} exceeds {tol:e}", report.max());
                    Ok(ExitCode::from(1))
                }
                _ => Ok(ExitCode::SUCCESS),
            }
        }
        Command::Rankscan { config, tol, norm, out } => {
            let cfg = RunConfig::from_path(&config).with_context(|| format!("reading {}", config.display()))?;
            let rows = rankscan(&cfg, tol, norm.into())?;
            match out {
                Some(path) => write_rankscan(&rows, path)?,
                None => write_rankscan_to(&rows, io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| execute(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
