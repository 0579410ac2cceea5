//! Transformer encoder-decoder with a language-prompt slot and a soft task
//! prompt on both sides.

mod forward;
mod input;
mod weights;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use forward::{Bound, MleForward, Packed};
pub use input::{
    assemble_decoder_input, assemble_encoder_input, assemble_translation_source, AssembledInput, PromptMode, Slot,
};
pub use weights::{DecoderLayer, EncoderLayer, ModelWeights, TASK_PROMPT};

use crate::numcore::checkpoint::{self, CheckpointError};
use crate::numcore::{Graph, NumError, Tensor};
use crate::vocab::{LangId, TokenId, Vocabulary, EOS};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown language id {0}")]
    UnknownLanguage(u16),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("input needs {needed} slots but max_len is {max_len}")]
    TooLong { needed: usize, max_len: usize },
    #[error("task-prompt slot in a graph bound without the task prompt")]
    NoTaskPrompt,
    #[error("malformed batch: {0}")]
    Batch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<CheckpointError> for ModelError {
    fn from(e: CheckpointError) -> Self {
        ModelError::Checkpoint(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_langs: usize,
    pub n_task_tokens: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 128,
            max_len: 128,
            vocab_size: vocab.size(),
            n_langs: vocab.n_langs() as usize,
            n_task_tokens: 100,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::Config(s));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_task_tokens == 0 {
            return bad("n_task_tokens must be at least 1".into());
        }
        if self.max_len < self.n_task_tokens + 3 {
            return bad(format!(
                "max_len {} leaves no room for tokens after 1 + {} prompt slots",
                self.max_len, self.n_task_tokens
            ));
        }
        if self.vocab_size == 0 || self.n_langs == 0 || self.ffn_dim == 0 {
            return bad("vocab_size, n_langs and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

fn sinusoids(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(max_len, d, data).expect("sized")
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    config: ModelConfig,
    languages: Vec<String>,
}

pub const SIDECAR_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub weights: ModelWeights<Tensor>,
    positional: Tensor,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = ModelWeights::init(&config, &mut rng);
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let positional = sinusoids(config.max_len, config.d_model);
        Ok(Self {
            config,
            weights,
            positional,
        })
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    fn check_lang(&self, l: LangId) -> Result<(), ModelError> {
        if l.index() >= self.config.n_langs {
            return Err(ModelError::UnknownLanguage(l.0));
        }
        Ok(())
    }

    /// Final encoder states of one input, `len × d_model`.
    pub fn encode(&self, input: &AssembledInput) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let mut b = Bound::frozen(&mut g, self, input.task_span.is_some())?;
        let (h, _) = b.encode(&mut g, std::slice::from_ref(input))?;
        Ok(g.value(h).clone())
    }

    /// Next-token logits at every decoder slot, `len × vocab_size`.
    pub fn decode_logits(&self, enc_states: &Tensor, decoder_input: &AssembledInput) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let mut b = Bound::frozen(&mut g, self, decoder_input.task_span.is_some())?;
        let h = g.input(enc_states.clone());
        let enc_packed = Packed {
            offsets: vec![0],
            lens: vec![enc_states.rows()],
        };
        let (y, _) = b.decode(&mut g, h, &enc_packed, std::slice::from_ref(decoder_input))?;
        let logits = b.project(&mut g, y)?;
        Ok(g.value(logits).clone())
    }

    /// Greedy decoding for a batch. Each request pairs an encoder input
    /// with the language whose prompt the decoder carries. Generation stops
    /// at `EOS` (not included in the output) or after `max_new_tokens`.
    pub fn generate_batch(
        &self,
        requests: &[(AssembledInput, LangId)],
        mode: PromptMode,
        max_new_tokens: usize,
    ) -> Result<Vec<Vec<TokenId>>, ModelError> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        for (inp, tgt) in requests {
            self.check_lang(inp.lang())?;
            self.check_lang(*tgt)?;
        }
        let with_task = mode == PromptMode::Prompted;
        let enc_inputs: Vec<AssembledInput> = requests.iter().map(|(i, _)| i.clone()).collect();
        let (enc_states, enc_packed) = {
            let mut g = Graph::new();
            let mut b = Bound::frozen(&mut g, self, with_task)?;
            let (h, packed) = b.encode(&mut g, &enc_inputs)?;
            (g.value(h).clone(), packed)
        };
        let mut outputs: Vec<Vec<TokenId>> = vec![Vec::new(); requests.len()];
        let mut active: Vec<usize> = (0..requests.len()).collect();
        let prefix = if with_task { self.config.n_task_tokens + 2 } else { 2 };
        let steps = max_new_tokens.min(self.config.max_len + 1 - prefix);
        for _ in 0..steps {
            let dec_inputs = (active.iter())
                .map(|&i| assemble_decoder_input(&self.config, &outputs[i], requests[i].1, mode))
                .collect::<Result<Vec<_>, _>>()?;
            let sub_packed = Packed {
                offsets: active.iter().map(|&i| enc_packed.offsets[i]).collect(),
                lens: active.iter().map(|&i| enc_packed.lens[i]).collect(),
            };
            let mut g = Graph::new();
            let mut b = Bound::frozen(&mut g, self, with_task)?;
            let h = g.input(enc_states.clone());
            let (y, dec_packed) = b.decode(&mut g, h, &sub_packed, &dec_inputs)?;
            let last: Vec<usize> = (0..active.len())
                .map(|k| dec_packed.offsets[k] + dec_packed.lens[k] - 1)
                .collect();
            let rows = g.gather_rows(y, &last)?;
            let logits = b.project(&mut g, rows)?;
            let lt = g.value(logits);
            let mut still = Vec::with_capacity(active.len());
            for (k, &i) in active.iter().enumerate() {
                let next = argmax(lt.row_slice(k));
                if next == EOS.index() {
                    continue;
                }
                outputs[i].push(TokenId(next as u32));
                still.push(i);
            }
            active = still;
            if active.is_empty() {
                break;
            }
        }
        Ok(outputs)
    }

    /// Greedy definition of `word` in `context`: the encoder carries the
    /// source-language prompt, the decoder the target-language prompt.
    pub fn generate(
        &self,
        word: &[TokenId],
        context: &[TokenId],
        source: LangId,
        target: LangId,
        mode: PromptMode,
        max_new_tokens: usize,
    ) -> Result<Vec<TokenId>, ModelError> {
        self.check_lang(source)?;
        self.check_lang(target)?;
        let inp = assemble_encoder_input(&self.config, word, context, source, mode)?;
        Ok(self.generate_batch(&[(inp, target)], mode, max_new_tokens)?.remove(0))
    }

    pub fn save(&self, dir: &Path, vocab: &Vocabulary) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)?;
        let named = self.weights.named();
        let refs: Vec<(String, &Tensor)> = named.into_iter().collect();
        checkpoint::save(dir, &refs)?;
        let side = Sidecar {
            format: "xldg-model".into(),
            config: self.config.clone(),
            languages: vocab.langs().map(|l| vocab.code(l)).collect(),
        };
        let json = serde_json::to_string_pretty(&side).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join(SIDECAR_FILE), json + "\n")?;
        Ok(())
    }

    /// Loads a checkpoint; returns the model and its language codes.
    pub fn load(dir: &Path) -> Result<(Self, Vec<String>), ModelError> {
        let text = std::fs::read_to_string(dir.join(SIDECAR_FILE))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if side.languages.len() != side.config.n_langs {
            return Err(ModelError::Checkpoint(format!(
                "{} language codes for n_langs {}",
                side.languages.len(),
                side.config.n_langs
            )));
        }
        let tensors = checkpoint::load(dir)?;
        let weights = ModelWeights::from_named(&side.config, tensors)?;
        Ok((Self::from_weights(side.config, weights)?, side.languages))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
