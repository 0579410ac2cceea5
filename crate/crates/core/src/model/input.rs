use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::vocab::{LangId, TokenId, BOS, SEP};

/// What occupies one position of an assembled sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Lang(LangId),
    /// Row `k` of the task prompt.
    Task(usize),
    Token(TokenId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// No task prompt: `[LANG] W [SEP] C`.
    Direct,
    /// `[LANG] [TASK_1..TASK_n] W [SEP] C`.
    Prompted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledInput {
    pub slots: Vec<Slot>,
    /// Decoder inputs are causally masked; encoder inputs see everything.
    pub causal: bool,
    /// Index of the language-prompt slot, always 0.
    pub lang_pos: usize,
    /// Inclusive `(first, last)` positions of the task prompt.
    pub task_span: Option<(usize, usize)>,
    /// Set when the context (or definition) was cut to fit `max_len`.
    pub truncated: bool,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn lang(&self) -> LangId {
        match self.slots[self.lang_pos] {
            Slot::Lang(l) => l,
            other => unreachable!("slot 0 holds {other:?}"),
        }
    }

    /// Number of prompt slots before the first token.
    pub fn prefix_len(&self) -> usize {
        self.task_span.map_or(1, |(_, last)| last + 1)
    }
}

fn prefix(lang: LangId, mode: PromptMode, n_task: usize) -> (Vec<Slot>, Option<(usize, usize)>) {
    let mut slots = vec![Slot::Lang(lang)];
    let span = match mode {
        PromptMode::Direct => None,
        PromptMode::Prompted => {
            slots.extend((0..n_task).map(Slot::Task));
            Some((1, n_task))
        }
    };
    (slots, span)
}

fn check_lang(cfg: &ModelConfig, lang: LangId) -> Result<(), ModelError> {
    if lang.index() >= cfg.n_langs {
        return Err(ModelError::UnknownLanguage(lang.0));
    }
    Ok(())
}

/// `[LANG(l)] [TASK..] W [SEP] C`, truncating `C` from the right to fit.
pub fn assemble_encoder_input(
    cfg: &ModelConfig,
    word: &[TokenId],
    context: &[TokenId],
    lang: LangId,
    mode: PromptMode,
) -> Result<AssembledInput, ModelError> {
    check_lang(cfg, lang)?;
    let (mut slots, task_span) = prefix(lang, mode, cfg.n_task_tokens);
    slots.extend(word.iter().map(|t| Slot::Token(*t)));
    slots.push(Slot::Token(SEP));
    if slots.len() > cfg.max_len {
        return Err(ModelError::TooLong {
            needed: slots.len(),
            max_len: cfg.max_len,
        });
    }
    let room = cfg.max_len - slots.len();
    let kept = context.len().min(room);
    slots.extend(context[..kept].iter().map(|t| Slot::Token(*t)));
    Ok(AssembledInput {
        slots,
        causal: false,
        lang_pos: 0,
        task_span,
        truncated: kept < context.len(),
    })
}

/// `[LANG(l)] [TASK..] [BOS] y`, for teacher forcing or as a generation
/// prefix. `y` is truncated from the right to fit.
pub fn assemble_decoder_input(
    cfg: &ModelConfig,
    tokens: &[TokenId],
    lang: LangId,
    mode: PromptMode,
) -> Result<AssembledInput, ModelError> {
    check_lang(cfg, lang)?;
    let (mut slots, task_span) = prefix(lang, mode, cfg.n_task_tokens);
    slots.push(Slot::Token(BOS));
    if slots.len() > cfg.max_len {
        return Err(ModelError::TooLong {
            needed: slots.len(),
            max_len: cfg.max_len,
        });
    }
    let room = cfg.max_len - slots.len();
    let kept = tokens.len().min(room);
    slots.extend(tokens[..kept].iter().map(|t| Slot::Token(*t)));
    Ok(AssembledInput {
        slots,
        causal: true,
        lang_pos: 0,
        task_span,
        truncated: kept < tokens.len(),
    })
}

/// Translation source: `[LANG(s)] x`, no task prompt and no separator.
pub fn assemble_translation_source(
    cfg: &ModelConfig,
    sentence: &[TokenId],
    lang: LangId,
) -> Result<AssembledInput, ModelError> {
    check_lang(cfg, lang)?;
    let kept = sentence.len().min(cfg.max_len - 1);
    let mut slots = vec![Slot::Lang(lang)];
    slots.extend(sentence[..kept].iter().map(|t| Slot::Token(*t)));
    Ok(AssembledInput {
        slots,
        causal: false,
        lang_pos: 0,
        task_span: None,
        truncated: kept < sentence.len(),
    })
}
