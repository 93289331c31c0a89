use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spt_cli::commands;
use spt_cli::{CliError, Result, RunConfig};

/// Selective prompt tuning laboratory.
#[derive(Debug, Parser)]
#[command(name = "spt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; built-in toy defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the `out` key.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for independent seed runs.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain and freeze the backbone.
    Pretrain,
    /// Bi-level gate search and top-K discretization.
    Search,
    /// Retrain the pruned model once per seed.
    Retrain {
        #[arg(long)]
        arch: Option<PathBuf>,
    },
    /// Evaluate retrained (or untrained) models on dev and test.
    Eval {
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        untrained: bool,
    },
    /// Manual placement strategies with matched parameter budgets.
    Pilot,
    /// Search on each transfer task and retrain on every other one.
    Transfer,
    /// Prompt-layer grid over architecture files.
    Heatmap { archs: Vec<PathBuf> },
    /// Run the invariant battery.
    Gradcheck,
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    if c.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let mut overrides = c.overrides;
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &c.out {
        overrides.push(format!("out={}", toml::Value::String(out.display().to_string())));
    }
    let cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Pretrain => print(&commands::cmd_pretrain(&cfg)?),
        Command::Search => print(&commands::cmd_search(&cfg)?),
        Command::Retrain { arch } => print(&commands::cmd_retrain(&cfg, arch.as_deref(), c.jobs)?),
        Command::Eval { arch, untrained } => print(&commands::cmd_eval(&cfg, arch.as_deref(), untrained)?),
        Command::Pilot => print(&commands::cmd_pilot(&cfg, c.jobs)?),
        Command::Transfer => print(&commands::cmd_transfer(&cfg, c.jobs)?),
        Command::Heatmap { archs } => print(&commands::cmd_heatmap(&cfg, &archs)?),
        Command::Gradcheck => {
            let record = commands::cmd_gradcheck(&cfg)?;
            for check in &record.report.checks {
                let verdict = if check.passed { "ok  " } else { "FAIL" };
                println!("{verdict} {:<40} {:.3e} (tol {:.0e})", check.name, check.value, check.tolerance);
            }
            let failed = record.report.failures().count();
            if failed > 0 {
                return Err(CliError::Invariant(failed));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
