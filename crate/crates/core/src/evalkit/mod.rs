//! Output metrics: language-mix and ignore-task flags, concept F1 and
//! token F1, plus per-pair evaluation and cross-mode comparison reports.

mod report;

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use report::{compare_report, relative_decrease, render_svg, CompareRow, ComparisonTable, RunResults};

use crate::model::{assemble_encoder_input, ModelError, PromptMode, Seq2Seq};
use crate::toylang::{Example, Split, ToyCorpus};
use crate::vocab::{ConceptId, LangId, TokenId, Vocabulary};

pub const DEFAULT_IGNORE_TASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
    #[error("invalid evaluation request: {0}")]
    Request(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn multiset<T: Eq + Hash + Copy>(xs: &[T]) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for &x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// F1 over multisets; two empty inputs score 1.
pub fn multiset_f1<T: Eq + Hash + Copy>(output: &[T], reference: &[T]) -> f64 {
    if output.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if output.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let r = multiset(reference);
    let overlap: usize = multiset(output)
        .iter()
        .map(|(k, &n)| n.min(r.get(k).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / output.len() as f64;
    let rc = overlap as f64 / reference.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Mono-lingual token F1 against the reference definition.
pub fn token_f1(output: &[TokenId], reference: &[TokenId]) -> f64 {
    multiset_f1(output, reference)
}

/// Flags an output containing any non-special token outside `target`'s
/// vocabulary, returning those tokens in order.
pub fn language_mix_flag(output: &[TokenId], target: LangId, vocab: &Vocabulary) -> (bool, Vec<TokenId>) {
    let foreign: Vec<TokenId> = output
        .iter()
        .copied()
        .filter(|&t| !vocab.is_special(t) && vocab.lang_of(t) != Some(target))
        .collect();
    (!foreign.is_empty(), foreign)
}

/// Concept ids of the content tokens, whatever their language.
pub fn output_concepts(output: &[TokenId], vocab: &Vocabulary) -> Vec<ConceptId> {
    output.iter().filter_map(|&t| vocab.concept_of(t)).collect()
}

/// Set Jaccard similarity; 0 when both are empty.
pub fn jaccard(a: &[ConceptId], b: &[ConceptId]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

/// Jaccard similarities of the output's concepts against the context
/// translation and against the reference definition.
pub fn ignore_task_scores(output: &[TokenId], example: &Example, vocab: &Vocabulary) -> (f64, f64) {
    let out = output_concepts(output, vocab);
    let ctx = output_concepts(&example.context, vocab);
    (jaccard(&out, &ctx), jaccard(&out, &example.def_concepts))
}

/// True when the output is closer to a translation of the context than to
/// the definition: `J_ctx >= threshold` and `J_ctx > J_def`.
pub fn ignore_task_flag(output: &[TokenId], example: &Example, vocab: &Vocabulary, threshold: f64) -> bool {
    let (j_ctx, j_def) = ignore_task_scores(output, example, vocab);
    j_ctx >= threshold && j_ctx > j_def
}

/// Concept-multiset F1 of the output against the reference concepts.
/// Foreign tokens keep their meaning.
pub fn concept_f1(output: &[TokenId], reference: &[ConceptId], vocab: &Vocabulary) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    multiset_f1(&output_concepts(output, vocab), reference)
}

/// Renders every content token of `tokens` in `target` through the shared
/// concept index, whatever its source language.
pub fn translate_lenient(tokens: &[TokenId], target: LangId, vocab: &Vocabulary) -> Vec<TokenId> {
    tokens
        .iter()
        .map(|&t| match vocab.concept_of(t) {
            Some(c) => vocab.token(target, c),
            None => t,
        })
        .collect()
}

/// How outputs are produced for a (source, target) request.
#[derive(Clone, Copy, Debug)]
pub enum System<'m> {
    /// One model decoding straight into the target language.
    Model { model: &'m Seq2Seq, mode: PromptMode },
    /// A mono-lingual model followed by lexicon translation.
    Pipeline { model: &'m Seq2Seq },
}

/// Mono-lingual generation in the example's language, then lexicon
/// translation into `target`.
pub fn pipeline_baseline(
    model: &Seq2Seq,
    example: &Example,
    target: LangId,
    vocab: &Vocabulary,
    max_new_tokens: usize,
) -> Result<Vec<TokenId>, ModelError> {
    let src = example.lang;
    let mono = model.generate(
        &example.word,
        &example.context,
        src,
        src,
        PromptMode::Direct,
        max_new_tokens,
    )?;
    Ok(translate_lenient(&mono, target, vocab))
}

/// One example's output under `system`.
pub fn generate_one(
    system: System<'_>,
    example: &Example,
    target: LangId,
    vocab: &Vocabulary,
    max_new_tokens: usize,
) -> Result<Vec<TokenId>, ModelError> {
    let mut outs = generate_chunk(
        system,
        std::slice::from_ref(example),
        example.lang,
        target,
        vocab,
        max_new_tokens,
    )?;
    Ok(outs.pop().unwrap_or_default())
}

fn generate_chunk(
    system: System<'_>,
    chunk: &[Example],
    src: LangId,
    tgt: LangId,
    vocab: &Vocabulary,
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>, ModelError> {
    let (model, mode, decode_lang) = match system {
        System::Model { model, mode } => (model, mode, tgt),
        System::Pipeline { model } => (model, PromptMode::Direct, src),
    };
    let reqs = chunk
        .iter()
        .map(|e| {
            Ok((
                assemble_encoder_input(&model.config, &e.word, &e.context, src, mode)?,
                decode_lang,
            ))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let outs = model.generate_batch(&reqs, mode, max_new)?;
    Ok(match system {
        System::Model { .. } => outs,
        System::Pipeline { .. } => outs.iter().map(|o| translate_lenient(o, tgt, vocab)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorFlags {
    pub language_mix: bool,
    pub ignore_task: bool,
    /// Empty output.
    pub degenerate: bool,
    pub foreign_tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub src: String,
    pub tgt: String,
    pub word: String,
    pub output: String,
    pub flags: ErrorFlags,
    pub concept_f1: f64,
    /// Only for mono-lingual pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub src: String,
    pub tgt: String,
    pub n_examples: usize,
    pub language_mix_rate: f64,
    pub ignore_task_rate: f64,
    pub degenerate_rate: f64,
    pub concept_f1: f64,
    pub mono_token_f1: Option<f64>,
}

impl EvalResult {
    pub fn is_cross(&self) -> bool {
        self.src != self.tgt
    }

    /// Named metric lookup used by reports.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "language_mix_rate" => Some(self.language_mix_rate),
            "ignore_task_rate" => Some(self.ignore_task_rate),
            "degenerate_rate" => Some(self.degenerate_rate),
            "concept_f1" => Some(self.concept_f1),
            "mono_token_f1" => self.mono_token_f1,
            _ => None,
        }
    }
}

pub const METRICS: [&str; 5] = [
    "language_mix_rate",
    "ignore_task_rate",
    "degenerate_rate",
    "concept_f1",
    "mono_token_f1",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub results: Vec<EvalResult>,
    pub records: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub max_new_tokens: usize,
    pub ignore_task_threshold: f64,
    /// Examples per source language; `None` uses the whole split.
    pub limit: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            max_new_tokens: 12,
            ignore_task_threshold: DEFAULT_IGNORE_TASK_THRESHOLD,
            limit: None,
        }
    }
}

/// Every ordered language pair, mono-lingual ones included.
pub fn all_pairs(vocab: &Vocabulary) -> Vec<(LangId, LangId)> {
    vocab.langs().flat_map(|s| vocab.langs().map(move |t| (s, t))).collect()
}

pub fn cross_pairs(vocab: &Vocabulary) -> Vec<(LangId, LangId)> {
    all_pairs(vocab).into_iter().filter(|(s, t)| s != t).collect()
}

pub fn evaluate(
    system: System<'_>,
    corpus: &ToyCorpus,
    pairs: &[(LangId, LangId)],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let vocab = &corpus.vocab;
    let mut results = Vec::with_capacity(pairs.len());
    let mut records = Vec::new();
    for &(src, tgt) in pairs {
        if !vocab.contains_lang(src) || !vocab.contains_lang(tgt) {
            return Err(EvalError::Request(format!(
                "pair ({}, {}) outside the corpus",
                src.0, tgt.0
            )));
        }
        let ex = corpus.examples(src, opts.split);
        let ex = &ex[..opts.limit.map_or(ex.len(), |l| l.min(ex.len()))];
        let (mut mix, mut ign, mut deg) = (0usize, 0usize, 0usize);
        let (mut cf1, mut tf1) = (0.0, 0.0);
        for chunk in ex.chunks(64) {
            let outs = generate_chunk(system, chunk, src, tgt, vocab, opts.max_new_tokens)?;
            for (e, out) in chunk.iter().zip(outs) {
                let (language_mix, foreign) = language_mix_flag(&out, tgt, vocab);
                let ignore_task = ignore_task_flag(&out, e, vocab, opts.ignore_task_threshold);
                let degenerate = out.is_empty();
                let c = concept_f1(&out, &e.def_concepts, vocab);
                let t = (src == tgt).then(|| token_f1(&out, &e.definition));
                mix += language_mix as usize;
                ign += ignore_task as usize;
                deg += degenerate as usize;
                cf1 += c;
                tf1 += t.unwrap_or(0.0);
                records.push(EvalRecord {
                    src: vocab.code(src),
                    tgt: vocab.code(tgt),
                    word: vocab.render(&e.word),
                    output: vocab.render(&out),
                    flags: ErrorFlags {
                        language_mix,
                        ignore_task,
                        degenerate,
                        foreign_tokens: foreign.iter().map(|t| vocab.surface(*t)).collect(),
                    },
                    concept_f1: c,
                    token_f1: t,
                });
            }
        }
        let n = ex.len();
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
        results.push(EvalResult {
            src: vocab.code(src),
            tgt: vocab.code(tgt),
            n_examples: n,
            language_mix_rate: rate(mix),
            ignore_task_rate: rate(ign),
            degenerate_rate: rate(deg),
            concept_f1: mean(cf1),
            mono_token_f1: (src == tgt).then(|| mean(tf1)),
        });
    }
    Ok(EvalReport { results, records })
}

/// Aggregates per-example records into per-pair results, in first-seen
/// pair order.
pub fn aggregate_records(records: &[EvalRecord]) -> Vec<EvalResult> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<&EvalRecord>> = HashMap::new();
    for r in records {
        let key = (r.src.clone(), r.tgt.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let n = rs.len() as f64;
            let count = |f: fn(&ErrorFlags) -> bool| rs.iter().filter(|r| f(&r.flags)).count() as f64 / n;
            let mono = key.0 == key.1;
            EvalResult {
                n_examples: rs.len(),
                language_mix_rate: count(|f| f.language_mix),
                ignore_task_rate: count(|f| f.ignore_task),
                degenerate_rate: count(|f| f.degenerate),
                concept_f1: rs.iter().map(|r| r.concept_f1).sum::<f64>() / n,
                mono_token_f1: mono.then(|| rs.iter().map(|r| r.token_f1.unwrap_or(0.0)).sum::<f64>() / n),
                src: key.0,
                tgt: key.1,
            }
        })
        .collect()
}

pub fn write_records_jsonl<W: Write>(mut w: W, records: &[EvalRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_records_jsonl(text: &str) -> Result<Vec<EvalRecord>, EvalError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Request(format!("record line {}: {e}", i + 1))))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_results_csv<W: Write>(mut w: W, results: &[EvalResult]) -> std::io::Result<()> {
    writeln!(
        w,
        "src,tgt,n_examples,language_mix_rate,ignore_task_rate,degenerate_rate,concept_f1,mono_token_f1"
    )?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.src,
            r.tgt,
            r.n_examples,
            r.language_mix_rate,
            r.ignore_task_rate,
            r.degenerate_rate,
            r.concept_f1,
            fmt_opt(r.mono_token_f1)
        )?;
    }
    Ok(())
}

pub fn read_results_csv(text: &str) -> Result<Vec<EvalResult>, EvalError> {
    let bad = |i: usize, m: &str| EvalError::Request(format!("results line {}: {m}", i + 1));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(i, "expected 8 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i, "bad number"));
        out.push(EvalResult {
            src: f[0].to_string(),
            tgt: f[1].to_string(),
            n_examples: f[2].parse().map_err(|_| bad(i, "bad count"))?,
            language_mix_rate: num(f[3])?,
            ignore_task_rate: num(f[4])?,
            degenerate_rate: num(f[5])?,
            concept_f1: num(f[6])?,
            mono_token_f1: if f[7].is_empty() { None } else { Some(num(f[7])?) },
        });
    }
    Ok(out)
}

/// Mean of a metric over the cross-lingual pairs of one result set.
pub fn cross_mean(results: &[EvalResult], metric: &str) -> f64 {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.is_cross())
        .filter_map(|r| r.metric(metric))
        .collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
