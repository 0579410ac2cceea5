mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xldg_core::experiment::{ExperimentError, RunConfig};

/// Trans-lingual definition generation on synthetic multilingual corpora.
#[derive(Parser, Debug)]
#[command(name = "xldg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy corpus and print its statistics.
    GenData(GenDataArgs),
    /// Pretrain on translation, then fine-tune one mode for every seed.
    Train(TrainArgs),
    /// Evaluate run directories and compare them.
    Eval(EvalArgs),
    /// Contrastive runs over the pooling × λ grid.
    Ablate(AblateArgs),
    /// Print one example's generation under several runs.
    Inspect(InspectArgs),
}

/// Configuration sources, lowest precedence first: defaults, `--config`,
/// then flags.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any config key, e.g. `--set d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub tuning: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long, alias = "margin")]
    pub sigma: Option<String>,
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub pretrain_steps: Option<String>,
    #[arg(long)]
    pub d_model: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self, extra: &[(&str, Option<&String>)]) -> Result<RunConfig, ExperimentError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_kv_text(&std::fs::read_to_string(path)?)?;
        }
        let flags = [
            ("seeds", self.seeds.as_ref()),
            ("epochs", self.epochs.as_ref()),
            ("lr", self.lr.as_ref()),
            ("batch_size", self.batch_size.as_ref()),
            ("tuning", self.tuning.as_ref()),
            ("lambda", self.lambda.as_ref()),
            ("tau", self.tau.as_ref()),
            ("margin", self.sigma.as_ref()),
            ("pooling", self.pooling.as_ref()),
            ("pretrain_steps", self.pretrain_steps.as_ref()),
            ("d_model", self.d_model.as_ref()),
            ("dropout", self.dropout.as_ref()),
        ];
        for (k, v) in flags.iter().chain(extra) {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub langs: Option<String>,
    #[arg(long)]
    pub concepts: Option<String>,
    /// rich (2000 train per language) or low (256/200/200).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// direct, prompt-combo, contrastive or pipeline-mono.
    #[arg(long)]
    pub mode: Option<String>,
    /// Run directory name under the output root; defaults to the mode.
    #[arg(long)]
    pub name: Option<String>,
    /// Output root; XLDG_RUN_DIR takes precedence over the default `runs`.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directories to evaluate.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// all, cross or mono.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    /// Mode the relative decrease is measured against.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Where the comparison table and charts go.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Test examples per source language.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lambdas: Option<String>,
    #[arg(long, default_value = "ablate")]
    pub name: String,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Source language code.
    #[arg(long, default_value = "aa")]
    pub src: String,
    /// Target language code; defaults to the source.
    #[arg(long)]
    pub tgt: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
