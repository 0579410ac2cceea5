use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_global_norm, dropout_rng, TrainError, CLIP_NORM};
use crate::model::{assemble_decoder_input, assemble_translation_source, Bound, ModelError, PromptMode, Seq2Seq};
use crate::numcore::{AdamState, Graph};
use crate::toylang::{Split, ToyCorpus};
use crate::vocab::{LangId, TokenId, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Optimiser steps; 0 returns the initial model unchanged.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Validation contexts per language pair used for the accuracy report.
    pub eval_limit: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            eval_limit: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Loss of every step in order.
    pub losses: Vec<f64>,
    /// Held-out token accuracy; `None` when no steps were taken.
    pub accuracy: Option<f64>,
}

struct Pair {
    src_lang: LangId,
    tgt_lang: LangId,
    src: Vec<TokenId>,
    tgt: Vec<TokenId>,
}

fn draw_pair(corpus: &ToyCorpus, rng: &mut ChaCha8Rng) -> Pair {
    let n = corpus.n_langs() as u16;
    let s = LangId(rng.gen_range(0..n));
    let mut t = LangId(rng.gen_range(0..n - 1));
    if t.0 >= s.0 {
        t.0 += 1;
    }
    let pool = corpus.examples(s, Split::Train);
    let ex = pool.choose(rng).expect("non-empty train split");
    let tgt = corpus
        .lexicon_translate(&ex.context, s, t)
        .expect("contexts are single-language");
    Pair {
        src_lang: s,
        tgt_lang: t,
        src: ex.context.clone(),
        tgt,
    }
}

/// Trains the model on sentence translation between distinct languages,
/// built from lexicon-translated training contexts. No task prompt.
pub fn pretrain_translation(
    corpus: &ToyCorpus,
    config: &PretrainConfig,
    init: Seq2Seq,
) -> Result<(Seq2Seq, PretrainReport), TrainError> {
    if corpus.n_langs() < 2 {
        return Err(TrainError::Config(
            "translation pretraining needs at least 2 languages".into(),
        ));
    }
    if config.steps == 0 {
        return Ok((
            init,
            PretrainReport {
                losses: Vec::new(),
                accuracy: None,
            },
        ));
    }
    let mut model = init;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.weights.named().into_iter().map(|(_, t)| t), config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut enc = Vec::with_capacity(config.batch_size);
        let mut dec = Vec::with_capacity(config.batch_size);
        let mut tgt = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let p = draw_pair(corpus, &mut rng);
            enc.push(assemble_translation_source(&model.config, &p.src, p.src_lang)?);
            let d = assemble_decoder_input(&model.config, &p.tgt, p.tgt_lang, PromptMode::Direct)?;
            let kept = d.len() - d.prefix_len() - 1;
            let mut t = p.tgt[..kept].to_vec();
            t.push(EOS);
            tgt.push(t);
            dec.push(d);
        }
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let mut b = Bound::new(&mut g, &model, &|_| true, false)?.with_dropout(dropout_rng(!config.seed, step));
            let out = b.mle(&mut g, &enc, &dec, &tgt)?;
            let loss = g.scalar(out.loss);
            if !loss.is_finite() {
                let v = g.value(out.enc_states).data();
                let max_abs = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                return Err(TrainError::NonFinite {
                    step,
                    l_mle: loss,
                    l_c: 0.0,
                    out_max_abs: max_abs,
                    out_mean: f64::NAN,
                    out_std: f64::NAN,
                });
            }
            g.backward(out.loss)?;
            let grads: Vec<Option<Vec<f64>>> =
                b.w.named()
                    .iter()
                    .map(|(_, v)| g.grad(**v).map(<[f64]>::to_vec))
                    .collect();
            (loss, grads)
        };
        clip_global_norm(&mut grads, CLIP_NORM);
        let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        adam.step(&mut model.weights.values_mut(), &refs)?;
        losses.push(loss);
    }
    let accuracy = translation_accuracy(&model, corpus, Split::Valid, config.eval_limit)?;
    Ok((
        model,
        PretrainReport {
            losses,
            accuracy: Some(accuracy),
        },
    ))
}

/// Position-wise token accuracy of greedy sentence translation over every
/// ordered pair of distinct languages, using the first `limit` contexts
/// of `split`. Length mismatches count as errors.
pub fn translation_accuracy(
    model: &Seq2Seq,
    corpus: &ToyCorpus,
    split: Split,
    limit: usize,
) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in corpus.vocab.langs() {
        let ex = corpus.examples(s, split);
        let ex = &ex[..limit.min(ex.len())];
        for t in corpus.vocab.langs().filter(|&t| t != s) {
            for chunk in ex.chunks(64) {
                let reqs = chunk
                    .iter()
                    .map(|e| Ok((assemble_translation_source(&model.config, &e.context, s)?, t)))
                    .collect::<Result<Vec<_>, ModelError>>()?;
                let outs = model.generate_batch(&reqs, PromptMode::Direct, model.config.max_len)?;
                for (e, o) in chunk.iter().zip(outs) {
                    let r = corpus
                        .lexicon_translate(&e.context, s, t)
                        .expect("single-language context");
                    correct += r.iter().zip(&o).filter(|(a, b)| a == b).count();
                    total += r.len().max(o.len());
                }
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}
