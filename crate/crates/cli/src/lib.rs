//! Command-line surface of the forecaster: `generate`, `train`, `eval`,
//! `gradcheck`, `forecast` and `serve`.
//!
//! Exit codes: 0 success, 1 invalid configuration or input, 2 internal
//! invariant violation.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags or input files.
    Input(String),
    /// A broken internal invariant.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(msg) => write!(f, "{msg}"),
            CliError::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<stflow_core::Error> for CliError {
    fn from(e: stflow_core::Error) -> Self {
        use stflow_core::Error as E;
        match e {
            E::ShapeMismatch { .. } | E::NonScalarRoot(_) | E::NonFinite { .. } | E::NonFiniteLoss { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stflow", version, about = "Spatio-temporal traffic forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every command accepts.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Branch {
    Gnn,
    Temporal,
    Fusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum StepFilter {
    /// Every test step.
    #[default]
    All,
    /// Only steps on holidays.
    Holiday,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (traffic.csv, external.csv, graph.csv).
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a corpus and write model.json and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; overrides `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Switch off a branch; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<Branch>,
    },
    /// Score checkpoints and the naive baselines on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files. Each fills the row of its recorded ablation; rows
        /// without a checkpoint reuse the first one with the branch switched off.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        steps: StepFilter,
    },
    /// Compare analytic and finite-difference gradients of every parameter group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Overrides `gradcheck.tol`.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Forecast from a window file of T JSON observation lines.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        window: PathBuf,
        /// Graph CSV replacing the one stored in the checkpoint.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Answer `/health`, `/observe` and `/forecast` over TCP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Overrides `serve.address`.
        #[arg(long)]
        address: Option<String>,
    },
}

/// Loads the configuration and applies the common overrides.
pub fn effective_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf, CliError> {
    common.out.clone().ok_or_else(|| CliError::Input("--out DIR is required".into()))
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = effective_config(&common)?;
            let out = out_dir(&common)?;
            commands::generate(&cfg, &out)?;
            println!("seed {}", cfg.seed);
            println!("wrote corpus to {}", out.display());
        }
        Command::Train { common, data, ablate } => {
            let mut cfg = effective_config(&common)?;
            for b in ablate {
                match b {
                    Branch::Gnn => cfg.train.ablation.gnn_off = true,
                    Branch::Temporal => cfg.train.ablation.temporal_off = true,
                    Branch::Fusion => cfg.train.ablation.fusion_off = true,
                }
            }
            if data.is_some() {
                cfg.data.dir = data;
            }
            let out = out_dir(&common)?;
            let outcome = commands::train(&cfg, &out)?;
            let best = outcome.history.best();
            println!(
                "best epoch {} of {}: val_loss {} (initial {}), train_loss {}",
                best.epoch,
                outcome.history.epochs.len(),
                best.val_loss,
                outcome.history.initial_val_loss,
                best.train_loss
            );
            println!("wrote {}", outcome.checkpoint.display());
        }
        Command::Eval { common, checkpoint, data, steps } => {
            let mut cfg = effective_config(&common)?;
            if data.is_some() {
                cfg.data.dir = data;
            }
            let out = out_dir(&common)?;
            let rows = commands::eval(&cfg, &checkpoint, steps, &out)?;
            print!("{}", stflow_core::training::metrics_csv(&rows));
        }
        Command::Gradcheck { common, tol } => {
            let mut cfg = effective_config(&common)?;
            if let Some(tol) = tol {
                cfg.gradcheck.tol = tol;
            }
            let report = commands::gradcheck(&cfg)?;
            for g in &report.groups {
                println!("{:<28} {:>5} entries  max rel err {:.3e}  {}", g.name, g.entries, g.max_rel_error, if g.pass { "ok" } else { "FAIL" });
            }
            if !report.pass() {
                return Err(CliError::Input(format!("gradient check failed at tol {:e}: worst {:.3e}", report.tol, report.worst())));
            }
            println!("all {} groups within {:e}", report.groups.len(), report.tol);
        }
        Command::Forecast { common, checkpoint, window, graph } => {
            let csv = commands::forecast(&checkpoint, &window, graph.as_deref())?;
            match &common.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
                    let path = dir.join("forecast.csv");
                    std::fs::write(&path, csv).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                }
                None => print!("{csv}"),
            }
        }
        Command::Serve { common, checkpoint, graph, address } => {
            let mut cfg = effective_config(&common)?;
            if let Some(a) = address {
                cfg.serve.address = a;
            }
            let server = commands::start_server(&cfg, &checkpoint, graph.as_deref())?;
            println!("listening on {}", server.addr());
            server.join();
        }
    }
    Ok(())
}
