//! `imjet` — config-driven runner for inertial-manifold jet experiments.
//!
//! Every subcommand reads the same JSON configuration (`--config`, patched
//! by repeatable `--set path=value`), writes its artifacts under the output
//! directory and exits with 0 (all gates pass), 1 (a gate failed),
//! 2 (configuration or capability error), 3 (infeasible gap ladder) or
//! 4 (solver failure).

mod config;
mod context;
mod demos;
mod extension;
mod output;
mod pipelines;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::context::{Context, Failure};
use crate::runner::TaskFlags;

#[derive(Parser)]
#[command(name = "imjet", version, about = "Inertial-manifold jets: gap ladders, charts, jets, extensions and tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one scalar, e.g. `--set ladder.lipschitz=3`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured task list (or `--tasks a,b,…`) in order.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
    },
    /// Gap ladder, admissible dimensions and the Green-operator norm check.
    GapAudit(Common),
    /// Level charts by the Perron method, with contraction and derivative checks.
    BuildIm(Common),
    /// Jets of the charts and the order-n prediction scan.
    Jets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Compatibility of jets across levels.
    CompatCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Extension sweep over ν and modified-flow invariance.
    Extend(Common),
    /// Exponential tracking toward the level-1 manifold.
    Track(Common),
    /// Closed-form checks on the Sell cascade.
    SellDemo(Common),
    /// Reaction–diffusion demonstration.
    RdsDemo(Common),
    /// Aggregate existing task reports into per-criterion results.
    Report(Common),
    /// Print the configuration JSON schema.
    Schema,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, tasks, flags) = match cli.command {
        Command::Schema => {
            print!("{}", config::SCHEMA);
            return ExitCode::SUCCESS;
        }
        Command::Run { common, tasks } => (common, tasks, TaskFlags::default()),
        Command::GapAudit(c) => (c, Some(vec!["gap-audit".into()]), TaskFlags::default()),
        Command::BuildIm(c) => (c, Some(vec!["build-im".into()]), TaskFlags::default()),
        Command::Jets { common, order } => (common, Some(vec!["jets".into()]), TaskFlags { order }),
        Command::CompatCheck { common, order } => (common, Some(vec!["compat-check".into()]), TaskFlags { order }),
        Command::Extend(c) => (c, Some(vec!["extend".into()]), TaskFlags::default()),
        Command::Track(c) => (c, Some(vec!["track".into()]), TaskFlags::default()),
        Command::SellDemo(c) => (c, Some(vec!["sell-demo".into()]), TaskFlags::default()),
        Command::RdsDemo(c) => (c, Some(vec!["rds-demo".into()]), TaskFlags::default()),
        Command::Report(c) => (c, Some(vec!["report".into()]), TaskFlags::default()),
    };
    ExitCode::from(execute(common, tasks, flags) as u8)
}

fn execute(common: Common, tasks: Option<Vec<String>>, flags: TaskFlags) -> i32 {
    let text = match &common.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => Some(t),
            Err(e) => {
                let f = Failure::Schema(format!("cannot read {}: {e}", path.display()));
                runner::report_config_error(common.out.as_deref(), &f);
                return f.exit_code();
            }
        },
        None => None,
    };
    let mut cfg = match config::load(text.as_deref(), &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            let f = Failure::Schema(format!("{e:#}"));
            runner::report_config_error(common.out.as_deref(), &f);
            return f.exit_code();
        }
    };
    if let Some(out) = common.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = tasks {
        cfg.tasks = t;
    }
    if let Err(e) = cfg.validate() {
        let f = Failure::Schema(format!("{e:#}"));
        runner::report_config_error(Some(&cfg.output_dir), &f);
        return f.exit_code();
    }
    let tasks = cfg.tasks.clone();
    let ctx = Context::new(cfg);
    runner::run(&ctx, &tasks, flags)
}
