use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use subcurve::harness::{self, ExperimentConfig};

/// Class-subspace quasi-Newton experiments for softmax classifiers.
#[derive(Debug, Parser)]
#[command(name = "subcurve", version)]
struct Cli {
    /// Output root; overrides the config's out_dir.
    #[arg(long, global = true, env = "SUBCURVE_OUT", value_name = "DIR")]
    out: Option<PathBuf>,

    /// Replace the config's seeds by 0..N.
    #[arg(long, global = true, value_name = "N")]
    seeds: Option<u64>,

    /// Grid cells trained concurrently.
    #[arg(long, global = true, value_name = "K", default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every (method, eta, batch size, seed) cell of a config.
    Run { config: PathBuf },
    /// Tabulate final accuracy and loss across seeds from metrics CSVs.
    Compare {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Train the first cell and report curvature diagnostics.
    Probe { config: PathBuf },
    /// Train the first cell and report the Gauss-Newton spectrum.
    Spectrum { config: PathBuf },
}

fn load_config(path: &Path, cli: &Cli) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(n) = cli.seeds {
        anyhow::ensure!(n >= 1, "--seeds must be at least 1");
        cfg.seeds = (0..n).collect();
    }
    let out = match &cli.out {
        Some(dir) => dir.clone(),
        None => cfg.resolved_out_dir(),
    };
    Ok((cfg, out))
}

fn execute(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Run { config } => {
            let (cfg, out) = load_config(config, cli)?;
            let summary = harness::run_experiment(&cfg, &out, cli.jobs)
                .with_context(|| format!("running {}", config.display()))?;
            let diverged = summary.cells.iter().filter(|c| matches!(c.outcome, harness::Outcome::Diverged { .. })).count();
            println!(
                "{} cells ({} diverged) -> {}",
                summary.cells.len(),
                diverged,
                out.join("metrics.csv").display()
            );
            Ok(ExitCode::from(summary.exit_code() as u8))
        }
        Command::Compare { csv, format } => {
            let table = harness::compare_files(csv)?;
            match format {
                Format::Text => print!("{}", table.render_text()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&table)?),
            }
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Probe { config } => {
            let (cfg, out) = load_config(config, cli)?;
            let r = harness::write_probe(&cfg, &out)?;
            println!(
                "assignment score {:.4}, combined rank {}, low-rank error {:.4} -> {}",
                r.overlap.assignment_score,
                r.overlap.combined_rank,
                r.low_rank_error.frobenius_rel_error,
                out.join("diag.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Spectrum { config } => {
            let (cfg, out) = load_config(config, cli)?;
            let s = harness::write_spectrum(&cfg, &out)?;
            let top: Vec<String> = s.spectrum.eigenvalues.iter().take(8).map(|v| format!("{v:.3e}")).collect();
            println!("top eigenvalues [{}] -> {}", top.join(", "), out.join("spectrum.json").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
