use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chronomerge::Technique;
use chronomerge_cli::commands::{self, run_name};
use chronomerge_cli::{CliError, ExperimentConfig, SweepGrid};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chronomerge",
    version,
    about = "Temporal model merging experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML, or JSON such as a previous summary.json).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set merge.technique=ties`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Merge checkpoints (oldest first) with the config's [merge] settings.
    Merge {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Base checkpoint for task-vector techniques, SLERP and Model Stock.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run the temporal pipeline over every seed.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: config output.dir, then $CHRONOMERGE_OUT/<config name>).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid file; defaults to the built-in per-technique grids.
        #[arg(short, long)]
        grid: Option<PathBuf>,
        /// Restrict the grid to these techniques (comma separated).
        #[arg(long, value_delimiter = ',')]
        techniques: Vec<Technique>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Worker threads (default: available cores).
        #[arg(short, long)]
        jobs: Option<usize>,
    },
    /// Evaluate a checkpoint on a seeded bench.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        checkpoint: PathBuf,
        /// Bench seed (default: the config's first seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print a checkpoint header and verify its checksum.
    Inspect { checkpoint: PathBuf },
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Merge {
            cfg,
            base,
            out,
            inputs,
        } => commands::merge(&cfg.load()?, base.as_deref(), &inputs, &out),
        Command::Run { cfg, out } => {
            let config = cfg.load()?;
            let dir = commands::output_dir(
                out.as_deref(),
                &config,
                &run_name(cfg.config.as_deref(), "run"),
            );
            commands::run(&config, &dir)
        }
        Command::Sweep {
            cfg,
            grid,
            techniques,
            out,
            jobs,
        } => {
            let config = cfg.load()?;
            let mut g = match &grid {
                Some(p) => SweepGrid::load(p)?,
                None => SweepGrid::default_grid(),
            };
            if !techniques.is_empty() {
                g = g.only(&techniques);
            }
            let dir = commands::output_dir(
                out.as_deref(),
                &config,
                &run_name(cfg.config.as_deref(), "sweep"),
            );
            let jobs =
                jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            commands::sweep(&config, &g, &dir, jobs)
        }
        Command::Eval {
            cfg,
            checkpoint,
            seed,
            json,
        } => {
            let config = cfg.load()?;
            let seed = seed.unwrap_or(config.seeds[0]);
            commands::eval(&config, &checkpoint, seed, json.as_deref())
        }
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli).context("chronomerge failed") {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = err
                .downcast_ref::<CliError>()
                .map_or(1, CliError::exit_code);
            eprintln!("error: {:#}", err);
            ExitCode::from(code)
        }
    }
}
