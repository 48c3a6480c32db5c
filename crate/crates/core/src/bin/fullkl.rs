use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fullkl::runner::{compare, run_experiment, verify_suite, RunConfig, RunOptions};
use fullkl::{write_csv, Error};

/// Full-KL label distribution learning: training runs, family comparison,
/// and numerical verification.
#[derive(Parser)]
#[command(name = "fullkl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the output directory of the config(s).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override the seed list, e.g. `--seeds 0,1,2`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Suppress per-epoch progress lines.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write metrics and summary CSVs.
    Run { config: PathBuf },
    /// Run two configs over the same seeds and compare final validation MAE.
    Compare { a: PathBuf, b: PathBuf },
    /// Run the gradient, closed-form and invariance checks.
    Verify,
    /// Write the config's dataset as an annotation CSV.
    GenData { config: PathBuf, out: PathBuf },
}

enum Failure {
    Config(Error),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) | Error::InvalidGrid(_) => Failure::Config(e),
            e => Failure::Run(e.to_string()),
        }
    }
}

fn load(cli: &Cli, path: &Path, out_dir: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::from_json_file(path).map_err(Failure::Config)?;
    if let Some(dir) = out_dir {
        cfg.out_dir = dir;
    }
    if let Some(seeds) = &cli.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let opts = RunOptions { quiet: cli.quiet };
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(cli, config, cli.out_dir.clone())?;
            let report = run_experiment(&cfg, opts)?;
            for s in &report.seeds {
                match &s.result {
                    Ok((_, val)) => println!("seed {}: val mae {:.5} total {:.6}", s.seed, val.mae, val.loss.total),
                    Err(e) => println!("seed {}: FAILED {e}", s.seed),
                }
            }
            println!("outputs in {}", report.out_dir.display());
            if !report.all_succeeded() {
                return Err(Failure::Run("one or more seeds failed".into()));
            }
        }
        Command::Compare { a, b } => {
            let (cfg_a, cfg_b, report_dir) = match &cli.out_dir {
                Some(d) => (load(cli, a, Some(d.join("a")))?, load(cli, b, Some(d.join("b")))?, d.clone()),
                None => {
                    let (ca, cb) = (load(cli, a, None)?, load(cli, b, None)?);
                    let dir = ca.out_dir.clone();
                    (ca, cb, dir)
                }
            };
            let c = compare(&cfg_a, &cfg_b, &report_dir, opts)?;
            print!(
                "{}",
                std::fs::read_to_string(report_dir.join("compare.txt")).map_err(|e| Error::io(&report_dir, e))?
            );
            if !c.skipped_seeds.is_empty() {
                return Err(Failure::Run(format!("seeds {:?} failed in at least one run", c.skipped_seeds)));
            }
        }
        Command::Verify => {
            let report = verify_suite()?;
            for c in &report.checks {
                println!("{c}");
            }
            if !report.passed() {
                return Err(Failure::Run("verification failed".into()));
            }
        }
        Command::GenData { config, out } => {
            let cfg = load(cli, config, cli.out_dir.clone())?;
            let ds = cfg.load_dataset()?;
            write_csv(&ds, out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
