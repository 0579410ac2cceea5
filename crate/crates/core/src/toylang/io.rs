//! JSON-lines corpus files.
//!
//! Line 1 is a header `{"format":"xldg-corpus","version":1,"seed":..,"config":{..}}`.
//! Every further line is one example:
//! `{"split","lang","word","context","definition","word_concepts","def_concepts"}`
//! where `lang` is the two-letter code, token fields are arrays of surface
//! forms and concept fields are arrays of integers. UTF-8, LF endings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusConfig, Example, Split, ToyCorpus, ToyLangError};
use crate::vocab::{ConceptId, TokenId, Vocabulary};

const FORMAT: &str = "xldg-corpus";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
struct Line {
    split: Split,
    lang: String,
    word: Vec<String>,
    context: Vec<String>,
    definition: Vec<String>,
    word_concepts: Vec<u32>,
    def_concepts: Vec<u32>,
}

fn surfaces(v: &Vocabulary, ts: &[TokenId]) -> Vec<String> {
    ts.iter().map(|t| v.surface(*t)).collect()
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &ToyCorpus) -> Result<(), ToyLangError> {
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        seed: corpus.seed,
        config: corpus.config.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    let v = &corpus.vocab;
    for split in [Split::Train, Split::Valid, Split::Test] {
        for lang in v.langs() {
            for ex in corpus.examples(lang, split) {
                let line = Line {
                    split,
                    lang: v.code(ex.lang),
                    word: surfaces(v, &ex.word),
                    context: surfaces(v, &ex.context),
                    definition: surfaces(v, &ex.definition),
                    word_concepts: ex.word_concepts.iter().map(|c| c.0).collect(),
                    def_concepts: ex.def_concepts.iter().map(|c| c.0).collect(),
                };
                writeln!(w, "{}", serde_json::to_string(&line).expect("line serializes"))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<ToyCorpus, ToyLangError> {
    let mut lines = r.lines();
    let parse_err = |line: usize, reason: String| ToyLangError::Parse { line, reason };
    let first = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != FORMAT || header.version != 1 {
        return Err(parse_err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut corpus = ToyCorpus::empty(header.config, header.seed);
    let v = corpus.vocab;
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line).map_err(|e| parse_err(no, e.to_string()))?;
        let lang = v
            .lang_by_code(&rec.lang)
            .ok_or_else(|| parse_err(no, format!("unknown language '{}'", rec.lang)))?;
        let toks = |xs: &[String]| -> Result<Vec<TokenId>, ToyLangError> {
            xs.iter()
                .map(|s| v.parse(s).ok_or_else(|| parse_err(no, format!("unknown token '{s}'"))))
                .collect()
        };
        let concept = |c: &u32| {
            if *c < v.n_concepts() {
                Ok(ConceptId(*c))
            } else {
                Err(parse_err(no, format!("concept {c} out of range")))
            }
        };
        let ex = Example {
            lang,
            word: toks(&rec.word)?,
            context: toks(&rec.context)?,
            definition: toks(&rec.definition)?,
            word_concepts: rec.word_concepts.iter().map(concept).collect::<Result<_, _>>()?,
            def_concepts: rec.def_concepts.iter().map(concept).collect::<Result<_, _>>()?,
        };
        let splits = &mut corpus.splits[lang.index()];
        match rec.split {
            Split::Train => splits.train.push(ex),
            Split::Valid => splits.valid.push(ex),
            Split::Test => splits.test.push(ex),
        }
    }
    Ok(corpus)
}

pub fn save_corpus(path: &Path, corpus: &ToyCorpus) -> Result<(), ToyLangError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_corpus(BufWriter::new(File::create(path)?), corpus)
}

pub fn load_corpus(path: &Path) -> Result<ToyCorpus, ToyLangError> {
    read_corpus(BufReader::new(File::open(path)?))
}

/// Hex sha256 of the corpus's canonical JSON-lines serialization.
pub fn corpus_digest(corpus: &ToyCorpus) -> String {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    write_corpus(&mut buf, corpus).expect("writing to memory");
    Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
}
