//! Training regimes: translation pretraining, direct fine-tuning, prompt
//! combination and contrastive prompt learning, under full or
//! prompt-only tuning.

mod pretrain;
mod sampler;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use pretrain::{pretrain_translation, translation_accuracy, PretrainConfig, PretrainReport};
pub use sampler::{mixed_epoch, Batch, ExampleRef, PairedSampler};

use crate::evalkit::token_f1;
use crate::model::{
    assemble_decoder_input, assemble_encoder_input, AssembledInput, Bound, ModelConfig, ModelError, PromptMode,
    Seq2Seq, TASK_PROMPT,
};
use crate::numcore::{AdamState, Graph, NumError, Var};
use crate::prompting::{combined_var, contrastive_var, group_prompt_states, ContrastiveConfig, PromptingError};
use crate::toylang::{Split, ToyCorpus};
use crate::vocab::{TokenId, EOS};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(
        "non-finite loss at step {step}: l_mle={l_mle} l_c={l_c}; decoder output |max|={out_max_abs:.3e} \
         mean={out_mean:.3e} std={out_std:.3e}"
    )]
    NonFinite {
        step: usize,
        l_mle: f64,
        l_c: f64,
        out_max_abs: f64,
        out_mean: f64,
        out_std: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompting(#[from] PromptingError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PretrainMt,
    Direct,
    PromptCombo,
    Contrastive,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::PretrainMt => "pretrain_mt",
            TrainMode::Direct => "direct",
            TrainMode::PromptCombo => "prompt_combo",
            TrainMode::Contrastive => "contrastive",
        }
    }

    pub fn prompt_mode(self) -> PromptMode {
        match self {
            TrainMode::PretrainMt | TrainMode::Direct => PromptMode::Direct,
            TrainMode::PromptCombo | TrainMode::Contrastive => PromptMode::Prompted,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "pretrain_mt" => Ok(TrainMode::PretrainMt),
            "direct" => Ok(TrainMode::Direct),
            "prompt_combo" => Ok(TrainMode::PromptCombo),
            "contrastive" => Ok(TrainMode::Contrastive),
            _ => Err(format!(
                "unknown mode '{s}' (direct|prompt-combo|contrastive|pretrain-mt)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuning {
    Full,
    PromptOnly,
}

impl Tuning {
    pub fn name(self) -> &'static str {
        match self {
            Tuning::Full => "full",
            Tuning::PromptOnly => "prompt_only",
        }
    }

    pub fn trainable(self, name: &str) -> bool {
        match self {
            Tuning::Full => true,
            Tuning::PromptOnly => name == TASK_PROMPT,
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Tuning::Full => 2e-3,
            Tuning::PromptOnly => 1e-2,
        }
    }
}

impl std::str::FromStr for Tuning {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Tuning::Full),
            "prompt_only" => Ok(Tuning::PromptOnly),
            _ => Err(format!("unknown tuning '{s}' (full|prompt-only)")),
        }
    }
}

/// Global gradient-norm cap applied before every Adam step.
pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub tuning: Tuning,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub contrastive: ContrastiveConfig,
    pub seed: u64,
    /// Validation examples per language used for the per-epoch token F1;
    /// `None` uses the whole validation split.
    pub val_limit: Option<usize>,
    /// Longest generated definition during validation.
    pub max_new_tokens: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, tuning: Tuning) -> Self {
        Self {
            mode,
            tuning,
            batch_size: 16,
            epochs: 10,
            learning_rate: tuning.default_learning_rate(),
            contrastive: ContrastiveConfig::default(),
            seed: 0,
            val_limit: None,
            max_new_tokens: 12,
        }
    }

    pub fn validate(&self, corpus: &ToyCorpus) -> Result<(), TrainError> {
        if self.mode == TrainMode::PretrainMt {
            return Err(TrainError::Config(
                "pretrain_mt runs through pretrain_translation".into(),
            ));
        }
        if self.mode == TrainMode::Contrastive && (corpus.n_langs() < 2 || self.batch_size < 2) {
            return Err(TrainError::Config(
                "contrastive mode needs at least 2 languages and batch_size >= 2".into(),
            ));
        }
        if self.tuning == Tuning::PromptOnly && self.mode.prompt_mode() == PromptMode::Direct {
            return Err(TrainError::Config(
                "prompt-only tuning needs a mode with task prompts".into(),
            ));
        }
        if self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config(
                "batch_size and learning_rate must be positive".into(),
            ));
        }
        self.contrastive.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_mle: f64,
    pub l_c: f64,
    pub l_final: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Set on the last step of each epoch.
    pub val_token_f1: Option<f64>,
}

pub fn write_log_csv<W: Write>(mut w: W, rows: &[LogRow]) -> std::io::Result<()> {
    writeln!(w, "step,epoch,l_mle,l_c,l_final,val_token_f1")?;
    for r in rows {
        let val = r.val_token_f1.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(
            w,
            "{},{},{:.12e},{:.12e},{:.12e},{val}",
            r.step, r.epoch, r.loss.l_mle, r.loss.l_c, r.loss.l_final
        )?;
    }
    Ok(())
}

/// Model plus optimiser state for one run.
pub struct Trainer {
    pub model: Seq2Seq,
    pub config: TrainConfig,
    adam: AdamState,
    step: usize,
}

fn with_eos(t: &[TokenId]) -> Vec<TokenId> {
    let mut v = t.to_vec();
    v.push(EOS);
    v
}

/// Encoder inputs, decoder inputs and targets, index-aligned.
pub type DefinitionBatch = (Vec<AssembledInput>, Vec<AssembledInput>, Vec<Vec<TokenId>>);

/// Encoder inputs, decoder inputs and targets of mono-lingual examples.
pub fn definition_batch(
    cfg: &ModelConfig,
    corpus: &ToyCorpus,
    refs: &[ExampleRef],
    mode: PromptMode,
) -> Result<DefinitionBatch, ModelError> {
    let mut enc = Vec::with_capacity(refs.len());
    let mut dec = Vec::with_capacity(refs.len());
    let mut tgt = Vec::with_capacity(refs.len());
    for r in refs {
        let e = &corpus.examples(r.lang, Split::Train)[r.index];
        enc.push(assemble_encoder_input(cfg, &e.word, &e.context, r.lang, mode)?);
        let d = assemble_decoder_input(cfg, &e.definition, r.lang, mode)?;
        let kept = d.len() - d.prefix_len() - 1;
        tgt.push(with_eos(&e.definition[..kept]));
        dec.push(d);
    }
    Ok((enc, dec, tgt))
}

/// Per-step dropout stream, independent of the batch sampler's.
pub(crate) fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (step as u64).wrapping_add(0x5851_f42d))
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (max_abs, mean, var.sqrt())
}

/// Scales `grads` in place so their joint L2 norm is at most `cap`.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], cap: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > cap {
        let s = cap / norm;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

impl Trainer {
    pub fn new(model: Seq2Seq, config: TrainConfig) -> Self {
        let adam = AdamState::new(model.weights.named().into_iter().map(|(_, t)| t), config.learning_rate);
        Self {
            model,
            config,
            adam,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimiser step on `batch`: teacher-forced MLE, plus for
    /// contrastive mode the group-level contrastive term blended by λ.
    pub fn train_step(&mut self, corpus: &ToyCorpus, batch: &Batch) -> Result<LossBreakdown, TrainError> {
        let mode = self.config.mode;
        let pmode = mode.prompt_mode();
        let refs = batch.examples();
        let (enc, dec, tgt) = definition_batch(&self.model.config, corpus, &refs, pmode)?;
        let tuning = self.config.tuning;
        let ccfg = &self.config.contrastive;
        let (loss, mut grads, diag) = {
            let mut g = Graph::new();
            let mut b = Bound::new(
                &mut g,
                &self.model,
                &|n| tuning.trainable(n),
                pmode == PromptMode::Prompted,
            )?
            .with_dropout(dropout_rng(self.config.seed, self.step));
            let mle = b.mle(&mut g, &enc, &dec, &tgt)?;
            let (total, l_c): (Var, Option<Var>) = match (mode, batch) {
                (TrainMode::Contrastive, Batch::Paired { group_i, .. }) => {
                    let ni = group_i.len();
                    let idx_i: Vec<usize> = (0..ni).collect();
                    let idx_j: Vec<usize> = (ni..refs.len()).collect();
                    let (tp_i, lp_i) =
                        group_prompt_states(&mut g, mle.enc_states, &mle.enc_packed, &enc, &idx_i, ccfg.pooling)?;
                    let (tp_j, lp_j) =
                        group_prompt_states(&mut g, mle.enc_states, &mle.enc_packed, &enc, &idx_j, ccfg.pooling)?;
                    let c = contrastive_var(&mut g, tp_i, tp_j, lp_i, lp_j, ccfg)?;
                    (combined_var(&mut g, mle.loss, c.loss, ccfg.lambda)?, Some(c.loss))
                }
                (TrainMode::Contrastive, Batch::Mixed(_)) => {
                    return Err(TrainError::Config("contrastive mode needs paired batches".into()))
                }
                _ => (mle.loss, None),
            };
            let loss = LossBreakdown {
                l_mle: g.scalar(mle.loss),
                l_c: l_c.map_or(0.0, |v| g.scalar(v)),
                l_final: g.scalar(total),
            };
            let diag = if loss.l_final.is_finite() {
                None
            } else {
                Some(stats(g.value(mle.enc_states).data()))
            };
            if diag.is_none() {
                g.backward(total)?;
            }
            let grads: Vec<Option<Vec<f64>>> =
                b.w.named()
                    .iter()
                    .map(|(_, v)| g.grad(**v).map(<[f64]>::to_vec))
                    .collect();
            (loss, grads, diag)
        };
        if let Some((out_max_abs, out_mean, out_std)) = diag {
            return Err(TrainError::NonFinite {
                step: self.step,
                l_mle: loss.l_mle,
                l_c: loss.l_c,
                out_max_abs,
                out_mean,
                out_std,
            });
        }
        clip_global_norm(&mut grads, CLIP_NORM);
        let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        self.adam.step(&mut self.model.weights.values_mut(), &refs)?;
        self.step += 1;
        Ok(loss)
    }

    /// One epoch's batches for this trainer's mode.
    pub fn epoch_batches(&self, corpus: &ToyCorpus, rng: &mut ChaCha8Rng) -> Vec<Batch> {
        match self.config.mode {
            TrainMode::Contrastive => PairedSampler::epoch(corpus, self.config.batch_size, rng),
            _ => mixed_epoch(corpus, self.config.batch_size, rng),
        }
    }
}

/// Mean mono-lingual token F1 of greedy generations on the validation
/// split, every language.
pub fn validation_token_f1(
    model: &Seq2Seq,
    corpus: &ToyCorpus,
    mode: PromptMode,
    limit: Option<usize>,
    max_new_tokens: usize,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for lang in corpus.vocab.langs() {
        let ex = corpus.examples(lang, Split::Valid);
        let ex = &ex[..limit.map_or(ex.len(), |l| l.min(ex.len()))];
        for chunk in ex.chunks(64) {
            let reqs = chunk
                .iter()
                .map(|e| {
                    Ok((
                        assemble_encoder_input(&model.config, &e.word, &e.context, lang, mode)?,
                        lang,
                    ))
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            let outs = model.generate_batch(&reqs, mode, max_new_tokens)?;
            for (e, o) in chunk.iter().zip(outs) {
                total += token_f1(&o, &e.definition);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation token F1.
    pub best: Seq2Seq,
    pub best_epoch: usize,
    pub best_val_token_f1: f64,
    pub log: Vec<LogRow>,
}

/// Runs `config.epochs` epochs from `init`, validating after each one.
pub fn train(corpus: &ToyCorpus, config: &TrainConfig, init: Seq2Seq) -> Result<TrainOutcome, TrainError> {
    train_with_progress(corpus, config, init, |_| {})
}

pub fn train_with_progress(
    corpus: &ToyCorpus,
    config: &TrainConfig,
    init: Seq2Seq,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome, TrainError> {
    config.validate(corpus)?;
    if init.config.n_langs != corpus.n_langs() || init.config.vocab_size != corpus.vocab.size() {
        return Err(TrainError::Config("model and corpus vocabularies differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::new(init.clone(), config.clone());
    let mut log = Vec::new();
    let mut best = init;
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    for epoch in 1..=config.epochs {
        let batches = trainer.epoch_batches(corpus, &mut rng);
        for batch in &batches {
            let loss = trainer.train_step(corpus, batch)?;
            log.push(LogRow {
                step: trainer.step,
                epoch,
                loss,
                val_token_f1: None,
            });
        }
        let val = validation_token_f1(
            &trainer.model,
            corpus,
            config.mode.prompt_mode(),
            config.val_limit,
            config.max_new_tokens,
        )?;
        if let Some(last) = log.last_mut() {
            last.val_token_f1 = Some(val);
            on_epoch(last);
        }
        if val > best_val {
            best_val = val;
            best_epoch = epoch;
            best = trainer.model.clone();
        }
    }
    if config.epochs == 0 {
        best_val = validation_token_f1(
            &best,
            corpus,
            config.mode.prompt_mode(),
            config.val_limit,
            config.max_new_tokens,
        )?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_token_f1: best_val,
        log,
    })
}
