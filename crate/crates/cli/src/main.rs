//! `hssfl`: generate data, run federated training, evaluate encoders and
//! check the convergence bounds on a finished run.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hssfl::cka::ProximalForm;
use hssfl::datahub::PartitionMode;

#[derive(Debug, Parser)]
#[command(
    name = "hssfl",
    version,
    about = "Federated self-supervised learning with heterogeneous encoders",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture dataset as CSV.
    GenData(GenDataArgs),
    /// Train all clients with the federated protocol.
    Run(RunArgs),
    /// Linear-probe accuracy of a finished run's encoders.
    Eval(EvalArgs),
    /// Estimate assumption constants and check the bounds on a run log.
    CheckTheory(CheckTheoryArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PartitionArg {
    Iid,
    Noniid,
}

impl From<PartitionArg> for PartitionMode {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Iid => PartitionMode::Iid,
            PartitionArg::Noniid => PartitionMode::Noniid,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProximalArg {
    OneMinusCka,
    RawCka,
    TraceAlignment,
    L2Rep,
}

impl From<ProximalArg> for ProximalForm {
    fn from(p: ProximalArg) -> Self {
        match p {
            ProximalArg::OneMinusCka => ProximalForm::OneMinusCka,
            ProximalArg::RawCka => ProximalForm::RawCka,
            ProximalArg::TraceAlignment => ProximalForm::TraceAlignment,
            ProximalArg::L2Rep => ProximalForm::L2Rep,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Radius of the sphere the class means lie on.
    #[arg(long, default_value_t = 0.8)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Falls back to HSSFL_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Check that the data can be split across this many clients.
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long, value_enum, default_value_t = PartitionArg::Noniid)]
    pub partition: PartitionArg,
    /// Also write an alignment set drawn from the mixture with every mean
    /// shifted by this distance.
    #[arg(long)]
    pub rad_shift: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub rad_size: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Output directory for the manifest, logs and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV with one row per example; the desk-scale mixture when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Zero-based label column; the last column by default.
    #[arg(long)]
    pub label_column: Option<usize>,
    /// Alignment set CSV (no labels); drawn from the data when absent.
    #[arg(long)]
    pub rad: Option<PathBuf>,
    /// TOML file with any subset of the run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the original experiments' rounds, epochs, optimiser and
    /// alignment-set size instead of the desk-scale defaults.
    #[arg(long)]
    pub paper_defaults: bool,
    /// Parallel client workers (all cores by default); results do not
    /// depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Continue from the last completed round in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this round, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Write the manifest and resolved config, then exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,

    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, conflicts_with = "full_batch")]
    pub batch_size: Option<usize>,
    /// One batch per epoch holding the whole shard.
    #[arg(long)]
    pub full_batch: bool,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, value_enum)]
    pub proximal: Option<ProximalArg>,
    #[arg(long)]
    pub centered: bool,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub symmetrize: bool,
    /// Clip every representation row to this norm.
    #[arg(long)]
    pub rep_clip: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub rad_size: Option<usize>,
    #[arg(long, value_enum)]
    pub partition: Option<PartitionArg>,
    #[arg(long)]
    pub aug_noise: Option<f64>,
    #[arg(long)]
    pub aug_mask: Option<f64>,
    /// Record the per-epoch probes `check-theory` needs.
    #[arg(long)]
    pub theory_probes: bool,
    /// Falls back to the config file, then HSSFL_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of a finished run.
    #[arg(long)]
    pub run: PathBuf,
    /// A local-only run (mu = 0, otherwise identical) to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Report directory; the run directory by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 0.003)]
    pub probe_lr: f64,
    #[arg(long, default_value_t = 128)]
    pub probe_batch: usize,
}

#[derive(Debug, Args)]
pub struct CheckTheoryArgs {
    /// A run directory or a log.jsonl file.
    #[arg(long)]
    pub log: PathBuf,
    /// Where to write bounds.jsonl; next to the log by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Run(a) => commands::run(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::CheckTheory(a) => commands::check_theory(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
