//! Run configuration and the glue that turns one into trained models,
//! evaluation reports and ablation tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evalkit::{cross_mean, evaluate, median, EvalError, EvalOptions, EvalReport, EvalResult, System};
use crate::model::{ModelConfig, ModelError, Seq2Seq};
use crate::prompting::{ContrastiveConfig, Pooling};
use crate::toylang::{corpus_digest, CorpusConfig, Preset, ToyCorpus, ToyLangError};
use crate::trainer::{
    pretrain_translation, train_with_progress, LogRow, PretrainConfig, PretrainReport, TrainConfig, TrainError,
    TrainMode, TrainOutcome, Tuning,
};
use crate::vocab::LangId;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] ToyLangError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a run trains and how its outputs are produced at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Direct,
    PromptCombo,
    Contrastive,
    /// Trained like `Direct`, evaluated as generate-then-translate.
    PipelineMono,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::Direct,
        RunMode::PromptCombo,
        RunMode::Contrastive,
        RunMode::PipelineMono,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Direct => "direct",
            RunMode::PromptCombo => "prompt-combo",
            RunMode::Contrastive => "contrastive",
            RunMode::PipelineMono => "pipeline-mono",
        }
    }

    pub fn train_mode(self) -> TrainMode {
        match self {
            RunMode::Direct | RunMode::PipelineMono => TrainMode::Direct,
            RunMode::PromptCombo => TrainMode::PromptCombo,
            RunMode::Contrastive => TrainMode::Contrastive,
        }
    }

    pub fn system(self, model: &Seq2Seq) -> System<'_> {
        match self {
            RunMode::PipelineMono => System::Pipeline { model },
            m => System::Model {
                model,
                mode: m.train_mode().prompt_mode(),
            },
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('_', "-").as_str() {
            "direct" => Ok(RunMode::Direct),
            "prompt-combo" => Ok(RunMode::PromptCombo),
            "contrastive" => Ok(RunMode::Contrastive),
            "pipeline-mono" => Ok(RunMode::PipelineMono),
            _ => Err(format!(
                "unknown mode '{s}' (direct|prompt-combo|contrastive|pipeline-mono)"
            )),
        }
    }
}

/// Everything needed to reproduce a run, as flat `key = value` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub langs: u16,
    pub concepts: u32,
    pub preset: Preset,
    pub corpus_seed: u64,

    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub task_tokens: usize,
    /// Applied while fine-tuning; pretraining runs without dropout.
    pub dropout: f64,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,

    pub mode: RunMode,
    pub tuning: Tuning,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` takes the tuning regime's default.
    pub lr: Option<f64>,
    pub lambda: f64,
    pub margin: f64,
    pub tau: f64,
    pub pooling: Pooling,
    pub symmetrize_negatives: bool,
    pub seeds: Vec<u64>,
    pub val_limit: Option<usize>,
    pub max_new_tokens: usize,
    pub eval_limit: Option<usize>,
    pub ignore_threshold: f64,
    /// λ sweep of the ablation grid.
    pub lambdas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        Self {
            langs: 3,
            concepts: 200,
            preset: Preset::Rich,
            corpus_seed: 7,
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            max_len: 64,
            task_tokens: 8,
            dropout: 0.1,
            pretrain_steps: 4000,
            pretrain_lr: 1e-3,
            pretrain_batch: 16,
            mode: RunMode::Contrastive,
            tuning: Tuning::Full,
            batch_size: 16,
            epochs: 10,
            lr: None,
            lambda: c.lambda,
            margin: c.margin,
            tau: c.temperature,
            pooling: c.pooling,
            symmetrize_negatives: c.symmetrize_negatives,
            seeds: vec![0],
            val_limit: None,
            max_new_tokens: 12,
            eval_limit: None,
            ignore_threshold: crate::evalkit::DEFAULT_IGNORE_TASK_THRESHOLD,
            lambdas: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ExperimentError> {
    value
        .parse()
        .map_err(|_| ExperimentError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, ExperimentError> {
    match value {
        "" | "none" | "all" | "default" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ExperimentError> {
    let v: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err(ExperimentError::Config(format!("{key}: empty list")));
    }
    Ok(v)
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("default".into(), T::to_string)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every recognised key, in the order `to_kv_text` writes them.
    pub const KEYS: [&'static str; 31] = [
        "langs",
        "concepts",
        "preset",
        "corpus_seed",
        "d_model",
        "n_heads",
        "enc_layers",
        "dec_layers",
        "ffn_dim",
        "max_len",
        "task_tokens",
        "dropout",
        "pretrain_steps",
        "pretrain_lr",
        "pretrain_batch",
        "mode",
        "tuning",
        "batch_size",
        "epochs",
        "lr",
        "lambda",
        "margin",
        "tau",
        "pooling",
        "symmetrize_negatives",
        "seeds",
        "val_limit",
        "max_new_tokens",
        "eval_limit",
        "ignore_threshold",
        "lambdas",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "langs" => self.langs = parse(key, v)?,
            "concepts" => self.concepts = parse(key, v)?,
            "preset" => self.preset = parse(key, v)?,
            "corpus_seed" => self.corpus_seed = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "dec_layers" => self.dec_layers = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "task_tokens" => self.task_tokens = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "mode" => self.mode = v.parse().map_err(ExperimentError::Config)?,
            "tuning" => self.tuning = v.parse().map_err(ExperimentError::Config)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse_opt(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "margin" | "sigma" => self.margin = parse(key, v)?,
            "tau" | "temperature" => self.tau = parse(key, v)?,
            "pooling" => self.pooling = v.parse().map_err(|e| ExperimentError::Config(format!("{e}")))?,
            "symmetrize_negatives" => self.symmetrize_negatives = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "val_limit" => self.val_limit = parse_opt(key, v)?,
            "max_new_tokens" => self.max_new_tokens = parse(key, v)?,
            "eval_limit" => self.eval_limit = parse_opt(key, v)?,
            "ignore_threshold" => self.ignore_threshold = parse(key, v)?,
            "lambdas" => self.lambdas = parse_list(key, v)?,
            other => return Err(ExperimentError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a flat config file: `key = value` per line, `#` comments.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| ExperimentError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ExperimentError> {
        let mut c = Self::default();
        c.apply_kv_text(text)?;
        Ok(c)
    }

    pub fn to_kv_text(&self) -> String {
        let rows: [(&str, String); 31] = [
            ("langs", self.langs.to_string()),
            ("concepts", self.concepts.to_string()),
            ("preset", self.preset.name().to_string()),
            ("corpus_seed", self.corpus_seed.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("max_len", self.max_len.to_string()),
            ("task_tokens", self.task_tokens.to_string()),
            ("dropout", self.dropout.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("mode", self.mode.name().to_string()),
            ("tuning", self.tuning.name().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", opt_str(&self.lr)),
            ("lambda", self.lambda.to_string()),
            ("margin", self.margin.to_string()),
            ("tau", self.tau.to_string()),
            ("pooling", self.pooling.name().to_string()),
            ("symmetrize_negatives", self.symmetrize_negatives.to_string()),
            ("seeds", join(&self.seeds)),
            ("val_limit", opt_str(&self.val_limit)),
            ("max_new_tokens", self.max_new_tokens.to_string()),
            ("eval_limit", opt_str(&self.eval_limit)),
            ("ignore_threshold", self.ignore_threshold.to_string()),
            ("lambdas", join(&self.lambdas)),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig::preset(self.preset, self.langs, self.concepts)
    }

    pub fn model_config(&self, corpus: &ToyCorpus) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.enc_layers,
            n_dec_layers: self.dec_layers,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            n_task_tokens: self.task_tokens,
            dropout: 0.0,
            ..ModelConfig::for_vocab(&corpus.vocab)
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            learning_rate: self.pretrain_lr,
            seed,
            ..Default::default()
        }
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            margin: self.margin,
            temperature: self.tau,
            pooling: self.pooling,
            lambda: self.lambda,
            symmetrize_negatives: self.symmetrize_negatives,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.tuning.default_learning_rate())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate(),
            contrastive: self.contrastive_config(),
            seed,
            val_limit: self.val_limit,
            max_new_tokens: self.max_new_tokens,
            ..TrainConfig::new(self.mode.train_mode(), self.tuning)
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            max_new_tokens: self.max_new_tokens,
            ignore_task_threshold: self.ignore_threshold,
            limit: self.eval_limit,
            ..Default::default()
        }
    }

    /// Checks everything that can be checked without a corpus.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.corpus_config().validate()?;
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds: need at least one".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ExperimentError::Config(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        if self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(ExperimentError::Config("lambdas must lie in [0, 1]".into()));
        }
        self.contrastive_config()
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Key of a pretrained checkpoint: identical inputs give identical keys.
pub fn pretrain_key(corpus: &ToyCorpus, model: &ModelConfig, pretrain: &PretrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(corpus_digest(corpus));
    h.update(serde_json::to_vec(model).expect("config serializes"));
    h.update(serde_json::to_vec(pretrain).expect("config serializes"));
    hex(&h.finalize())[..16].to_string()
}

/// Initial model for `seed`: freshly initialised, then translation
/// pretrained. With a cache directory, checkpoints are reused across runs.
pub fn pretrained_model(
    cfg: &RunConfig,
    corpus: &ToyCorpus,
    seed: u64,
    cache: Option<&Path>,
) -> Result<(Seq2Seq, Option<PretrainReport>), ExperimentError> {
    let mcfg = cfg.model_config(corpus);
    let pcfg = cfg.pretrain_config(seed);
    let dir = cache.map(|c| c.join(pretrain_key(corpus, &mcfg, &pcfg)));
    if let Some(d) = dir.as_ref().filter(|d| d.join(PRETRAIN_LOG).exists()) {
        let (m, _) = Seq2Seq::load(d)?;
        let report = read_pretrain_log(&std::fs::read_to_string(d.join(PRETRAIN_LOG))?)?;
        return Ok((m, Some(report)));
    }
    let init = Seq2Seq::new(mcfg, seed)?;
    if corpus.n_langs() < 2 {
        return Ok((init, None));
    }
    let (m, report) = pretrain_translation(corpus, &pcfg, init)?;
    if let Some(d) = dir {
        m.save(&d, &corpus.vocab)?;
        let mut log = Vec::new();
        write_pretrain_log(&mut log, &report)?;
        std::fs::write(d.join(PRETRAIN_LOG), log)?;
    }
    Ok((m, Some(report)))
}

pub const PRETRAIN_LOG: &str = "pretrain_log.csv";

/// `step,loss` rows followed by a `#accuracy,<value>` trailer.
pub fn write_pretrain_log<W: std::io::Write>(mut w: W, report: &PretrainReport) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(w, "{i},{l:.12e}")?;
    }
    if let Some(a) = report.accuracy {
        writeln!(w, "#accuracy,{a}")?;
    }
    Ok(())
}

pub fn read_pretrain_log(text: &str) -> Result<PretrainReport, ExperimentError> {
    let bad = |i: usize| ExperimentError::Config(format!("{PRETRAIN_LOG} line {}: malformed", i + 1));
    let mut report = PretrainReport {
        losses: Vec::new(),
        accuracy: None,
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        let (a, b) = line.split_once(',').ok_or_else(|| bad(i))?;
        let v: f64 = b.parse().map_err(|_| bad(i))?;
        if a == "#accuracy" {
            report.accuracy = Some(v);
        } else {
            report.losses.push(v);
        }
    }
    Ok(report)
}

/// Fine-tunes a pretrained model for one seed.
pub fn train_seed(
    cfg: &RunConfig,
    corpus: &ToyCorpus,
    seed: u64,
    mut init: Seq2Seq,
    on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome, ExperimentError> {
    init.config.dropout = cfg.dropout;
    let mut out = train_with_progress(corpus, &cfg.train_config(seed), init, on_epoch)?;
    out.best.config.dropout = 0.0;
    Ok(out)
}

pub fn evaluate_model(
    cfg: &RunConfig,
    corpus: &ToyCorpus,
    model: &Seq2Seq,
    pairs: &[(LangId, LangId)],
) -> Result<EvalReport, ExperimentError> {
    Ok(evaluate(cfg.mode.system(model), corpus, pairs, &cfg.eval_options())?)
}

/// One cell of the pooling × λ grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub pooling: Pooling,
    pub lambda: f64,
    /// Mean cross-lingual concept F1 per seed, in seed order.
    pub concept_f1: Vec<f64>,
    pub language_mix_rate: Vec<f64>,
}

impl AblationCell {
    pub fn from_results(pooling: Pooling, lambda: f64, per_seed: &[Vec<EvalResult>]) -> Self {
        Self {
            pooling,
            lambda,
            concept_f1: per_seed.iter().map(|r| cross_mean(r, "concept_f1")).collect(),
            language_mix_rate: per_seed.iter().map(|r| cross_mean(r, "language_mix_rate")).collect(),
        }
    }

    pub fn median_concept_f1(&self) -> f64 {
        median(&self.concept_f1)
    }
}

/// Table-shaped CSV of the grid: one row per (pooling, λ) with per-seed
/// and median cross-lingual concept F1 and language-mix rate.
pub fn ablation_csv(seeds: &[u64], cells: &[AblationCell]) -> String {
    let mut s = String::from("pooling,lambda");
    for seed in seeds {
        let _ = write!(s, ",concept_f1_seed_{seed}");
    }
    s.push_str(",concept_f1_median");
    for seed in seeds {
        let _ = write!(s, ",language_mix_rate_seed_{seed}");
    }
    s.push_str(",language_mix_rate_median\n");
    for c in cells {
        let _ = write!(s, "{},{}", c.pooling, c.lambda);
        for v in &c.concept_f1 {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = write!(s, ",{:.6}", c.median_concept_f1());
        for v in &c.language_mix_rate {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = writeln!(s, ",{:.6}", median(&c.language_mix_rate));
    }
    s
}
