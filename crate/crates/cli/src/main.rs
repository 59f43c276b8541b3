use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use eki_cli::figure::{run_figure, write_figure_outputs, FigureConfig, Mode};
use eki_cli::report::{read_envelope, write_run_outputs};
use eki_cli::runner::execute;
use eki_cli::scenario::Scenario;
use eki_cli::verify::{all_pass, run_suite};

/// Exit codes: 0 success, 1 a check failed, 2 bad input or I/O trouble.
const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "eki", version, about = "Ensemble Kalman inversion refinement studies")]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the replica fan-out (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the refinement study described by a scenario file.
    Run { scenario: PathBuf },
    /// Runs the identity suite on a scenario; fails if any check fails.
    Verify { scenario: PathBuf },
    /// Reproduces the stiff diagonal example on [0, 1].
    Figure1 {
        #[arg(long, value_enum, default_value = "deterministic")]
        mode: Mode,
        #[arg(long, default_value_t = 12)]
        level: u32,
        #[arg(long, default_value_t = 5)]
        particles: usize,
    },
    /// Refits the convergence order from an existing report.json.
    Order { report: PathBuf },
}

fn resolve_jobs(requested: Option<usize>) -> Result<usize> {
    let jobs = requested.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    if jobs == 0 {
        return Err(anyhow!("--jobs must be at least 1"));
    }
    Ok(jobs)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { scenario } => {
            let scenario = Scenario::load(&scenario)?;
            let jobs = resolve_jobs(cli.jobs)?;
            let outcome = execute(&scenario, cli.seed, jobs)?;
            let written = write_run_outputs(&cli.out, &outcome)?;
            for path in &written {
                println!("wrote {}", path.display());
            }
            match outcome.report.fitted_order {
                Some(q) => println!("fitted order: {q:.4}"),
                None => println!("fitted order: not estimable (fewer than 3 usable levels)"),
            }
            Ok(0)
        }
        Command::Verify { scenario } => {
            let scenario = Scenario::load(&scenario)?;
            let reports = run_suite(&scenario, cli.seed)?;
            let json = serde_json::to_string_pretty(&reports).context("serializing reports")?;
            println!("{json}");
            std::fs::create_dir_all(&cli.out)
                .with_context(|| format!("creating output directory {}", cli.out.display()))?;
            let path = cli.out.join("verify.json");
            std::fs::write(&path, json + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            if all_pass(&reports) {
                Ok(0)
            } else {
                let failed: Vec<&str> = reports
                    .iter()
                    .filter(|r| !r.pass)
                    .map(|r| r.name.as_str())
                    .collect();
                eprintln!("failed checks: {}", failed.join(", "));
                Ok(EXIT_CHECK_FAILED)
            }
        }
        Command::Figure1 {
            mode,
            level,
            particles,
        } => {
            let mut config = FigureConfig::new(mode);
            config.level = level;
            config.particles = particles;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            let run = run_figure(&config)?;
            let written = write_figure_outputs(&cli.out, &run)?;
            for path in &written {
                println!("wrote {}", path.display());
            }
            println!(
                "mean norm: initial {:.4}, max {:.4} at t = {:.6}, final {:.4}",
                run.summary.initial_norm,
                run.summary.max_norm,
                run.summary.argmax_t,
                run.summary.final_norm
            );
            Ok(0)
        }
        Command::Order { report } => {
            let env = read_envelope(&report)?;
            let points: Vec<(f64, f64)> = env
                .report
                .levels
                .iter()
                .filter_map(|l| l.mean_sup_error.filter(|e| *e > 0.0).map(|e| (l.h, e)))
                .collect();
            let fit = eki_core::fit_order(&points)
                .with_context(|| format!("fitting order from {}", report.display()))?;
            let json = serde_json::to_string_pretty(&fit).context("serializing fit")?;
            println!("{json}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG_ERROR)
        }
    }
}
