//! Deterministic synthetic multilingual definition-generation corpora.
//!
//! Every toy language renders the same [`Interlingua`] through its own
//! prefixed vocabulary, so bilingual lexicons are exact bijections and the
//! meaning of any generated token is known.

mod interlingua;
mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use interlingua::{Interlingua, HOLE};
pub use io::{corpus_digest, load_corpus, read_corpus, save_corpus, write_corpus};

use crate::vocab::{ConceptId, LangId, TokenId, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum ToyLangError {
    #[error("infeasible corpus config, binding constraint {0}")]
    Infeasible(String),
    #[error("token '{token}' is not in language {lang}")]
    ForeignToken { token: String, lang: String },
    #[error("unknown language {0}")]
    UnknownLanguage(String),
    #[error("corpus line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Rich,
    Low,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Rich => "rich",
            Preset::Low => "low",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rich" => Ok(Preset::Rich),
            "low" => Ok(Preset::Low),
            other => Err(format!("unknown preset '{other}' (rich|low)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_langs: u16,
    pub n_concepts: u32,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Low-resource convention: the validation split doubles as the test split.
    pub test_from_valid: bool,
    pub polysemy_fraction: f64,
    pub n_domains: usize,
    pub templates_per_concept: usize,
    pub def_len_min: usize,
    pub def_len_max: usize,
    /// Context length including the target word.
    pub context_len_min: usize,
    pub context_len_max: usize,
}

impl CorpusConfig {
    pub fn preset(preset: Preset, n_langs: u16, n_concepts: u32) -> Self {
        let base = Self {
            n_langs,
            n_concepts,
            train: 2000,
            valid: 200,
            test: 200,
            test_from_valid: false,
            polysemy_fraction: 0.1,
            n_domains: 10,
            templates_per_concept: 16,
            def_len_min: 3,
            def_len_max: 8,
            context_len_min: 5,
            context_len_max: 8,
        };
        match preset {
            Preset::Rich => base,
            Preset::Low => Self {
                train: 256,
                valid: 200,
                test: 200,
                test_from_valid: true,
                ..base
            },
        }
    }

    pub fn polysemous_slots(&self) -> usize {
        (self.polysemy_fraction * self.n_concepts as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), ToyLangError> {
        let bad = |s: String| Err(ToyLangError::Infeasible(s));
        if self.n_langs < 2 || self.n_langs > crate::vocab::MAX_LANGS {
            return bad(format!(
                "n_langs: need 2..={}, got {}",
                crate::vocab::MAX_LANGS,
                self.n_langs
            ));
        }
        if self.n_concepts < 50 {
            return bad(format!("n_concepts: need at least 50, got {}", self.n_concepts));
        }
        if !(0.0..=0.5).contains(&self.polysemy_fraction) {
            return bad(format!(
                "polysemy_fraction: need 0..=0.5, got {}",
                self.polysemy_fraction
            ));
        }
        if self.n_domains < 2 || self.n_domains * 4 > self.n_concepts as usize {
            return bad(format!(
                "n_domains: need 2..={}, got {}",
                self.n_concepts / 4,
                self.n_domains
            ));
        }
        if self.templates_per_concept < 2 {
            return bad("templates_per_concept: need at least 2".into());
        }
        if self.def_len_min < 1 || self.def_len_min > self.def_len_max {
            return bad("def_len_min/def_len_max: need 1 <= min <= max".into());
        }
        if self.context_len_min < interlingua::CUES_PER_TEMPLATE + 1 || self.context_len_min > self.context_len_max {
            return bad("context_len_min/context_len_max: need 3 <= min <= max".into());
        }
        let pairs = self.n_concepts as usize * self.templates_per_concept;
        let held_out = if self.test_from_valid {
            self.valid
        } else {
            self.valid + self.test
        };
        if self.train + held_out > pairs {
            return bad(format!(
                "templates_per_concept: {} train + {} held-out examples need that many distinct \
                 (concept, template) pairs but only {pairs} exist",
                self.train, held_out
            ));
        }
        let floor = self.n_concepts as usize + self.polysemous_slots();
        if self.train < floor {
            return bad(format!(
                "train: {} examples cannot cover every concept and both senses of every polysemous word (need {floor})",
                self.train
            ));
        }
        Ok(())
    }
}

/// One toy language: a prefixed rendering of the shared concept space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyLanguage {
    pub lang_id: LangId,
    vocab: Vocabulary,
}

impl ToyLanguage {
    pub fn code(&self) -> String {
        self.vocab.code(self.lang_id)
    }

    pub fn surface(&self, c: ConceptId) -> TokenId {
        self.vocab.token(self.lang_id, c)
    }

    pub fn owns(&self, t: TokenId) -> bool {
        self.vocab.lang_of(t) == Some(self.lang_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub lang: LangId,
    pub word: Vec<TokenId>,
    pub context: Vec<TokenId>,
    pub definition: Vec<TokenId>,
    /// Context-disambiguated sense of the word. Evaluation only.
    pub word_concepts: Vec<ConceptId>,
    pub def_concepts: Vec<ConceptId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LanguageSplits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl LanguageSplits {
    pub fn get(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<Example> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    /// Indexed by language id.
    pub splits: Vec<LanguageSplits>,
}

impl ToyCorpus {
    pub fn empty(config: CorpusConfig, seed: u64) -> Self {
        let vocab = Vocabulary::new(config.n_langs, config.n_concepts);
        let splits = vec![LanguageSplits::default(); config.n_langs as usize];
        Self {
            config,
            seed,
            vocab,
            splits,
        }
    }

    pub fn languages(&self) -> Vec<ToyLanguage> {
        self.vocab
            .langs()
            .map(|lang_id| ToyLanguage {
                lang_id,
                vocab: self.vocab,
            })
            .collect()
    }

    pub fn n_langs(&self) -> usize {
        self.splits.len()
    }

    pub fn examples(&self, lang: LangId, split: Split) -> &[Example] {
        self.splits[lang.index()].get(split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.iter().map(|s| s.get(split).len()).sum()
    }

    pub fn check_lang(&self, lang: LangId) -> Result<(), ToyLangError> {
        if self.vocab.contains_lang(lang) {
            Ok(())
        } else {
            Err(ToyLangError::UnknownLanguage(format!("#{}", lang.0)))
        }
    }

    /// Token-by-token translation through the shared concept index.
    /// Specials pass through unchanged.
    pub fn lexicon_translate(
        &self,
        tokens: &[TokenId],
        from: LangId,
        to: LangId,
    ) -> Result<Vec<TokenId>, ToyLangError> {
        self.check_lang(from)?;
        self.check_lang(to)?;
        tokens
            .iter()
            .map(|&t| {
                if self.vocab.is_special(t) {
                    return Ok(t);
                }
                match (self.vocab.lang_of(t), self.vocab.concept_of(t)) {
                    (Some(l), Some(c)) if l == from => Ok(self.vocab.token(to, c)),
                    _ => Err(ToyLangError::ForeignToken {
                        token: self.vocab.surface(t),
                        lang: self.vocab.code(from),
                    }),
                }
            })
            .collect()
    }

    /// The example's definition rendered in `target`. Evaluation only.
    pub fn trans_lingual_reference(&self, example: &Example, target: LangId) -> Result<Vec<TokenId>, ToyLangError> {
        self.check_lang(target)?;
        Ok(example
            .def_concepts
            .iter()
            .map(|&c| self.vocab.token(target, c))
            .collect())
    }

    /// Per-language statistics rows: (code, train, valid, test, vocab size).
    pub fn stats(&self) -> Vec<(String, usize, usize, usize, usize)> {
        self.vocab
            .langs()
            .map(|l| {
                let s = &self.splits[l.index()];
                (
                    self.vocab.code(l),
                    s.train.len(),
                    s.valid.len(),
                    s.test.len(),
                    self.config.n_concepts as usize,
                )
            })
            .collect()
    }
}

/// Generates the full corpus deterministically from `config` and `seed`.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<ToyCorpus, ToyLangError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inter = Interlingua::generate(config, &mut rng)?;
    let mut corpus = ToyCorpus::empty(config.clone(), seed);
    let vocab = corpus.vocab;
    let n = config.n_concepts as usize;
    let t_per = config.templates_per_concept;

    for lang in vocab.langs() {
        let mut lrng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(lang.0 as u64 + 1)));
        // Items are (sense, template, word surface concept); at most one
        // item per (sense, template) pair.
        let mut used = vec![vec![false; t_per]; n];
        let mut guaranteed: Vec<(usize, usize, usize)> = Vec::new();
        for (c, row) in used.iter_mut().enumerate() {
            let t = lrng.gen_range(0..t_per);
            row[t] = true;
            guaranteed.push((c, t, c));
        }
        for &(k, p) in &inter.polysemy_map {
            let (k, p) = (k.0 as usize, p.0 as usize);
            let free: Vec<usize> = (0..t_per).filter(|&t| !used[p][t]).collect();
            let t = free[lrng.gen_range(0..free.len())];
            used[p][t] = true;
            guaranteed.push((p, t, k));
        }
        let mut rest: Vec<(usize, usize, usize)> = Vec::new();
        for (c, row) in used.iter().enumerate() {
            for (t, &u) in row.iter().enumerate() {
                if !u {
                    let word = match inter.slot_for_partner(ConceptId(c as u32)) {
                        Some(k) if lrng.gen_bool(0.5) => k.0 as usize,
                        _ => c,
                    };
                    rest.push((c, t, word));
                }
            }
        }
        rest.shuffle(&mut lrng);

        let mut train = guaranteed;
        let need = config.train - train.len();
        train.extend(rest.drain(..need));
        train.shuffle(&mut lrng);
        let valid: Vec<_> = rest.drain(..config.valid).collect();
        let test: Vec<_> = if config.test_from_valid {
            valid.clone()
        } else {
            rest.drain(..config.test).collect()
        };

        let render = |&(sense, t, word): &(usize, usize, usize)| -> Example {
            let word_tok = vocab.token(lang, ConceptId(word as u32));
            let context = inter.context_templates[sense][t]
                .iter()
                .map(|slot| slot.map_or(word_tok, |c| vocab.token(lang, c)))
                .collect();
            let def_concepts = inter.definition_templates[sense].clone();
            Example {
                lang,
                word: vec![word_tok],
                context,
                definition: def_concepts.iter().map(|&c| vocab.token(lang, c)).collect(),
                word_concepts: vec![ConceptId(sense as u32)],
                def_concepts,
            }
        };
        let splits = &mut corpus.splits[lang.index()];
        for (split, items) in [(Split::Train, &train), (Split::Valid, &valid), (Split::Test, &test)] {
            *splits.get_mut(split) = items.iter().map(render).collect();
        }
    }
    Ok(corpus)
}

/// Interlingua for a corpus configuration, regenerated from its seed.
pub fn interlingua_for(config: &CorpusConfig, seed: u64) -> Result<Interlingua, ToyLangError> {
    config.validate()?;
    Interlingua::generate(config, &mut ChaCha8Rng::seed_from_u64(seed))
}
