//! Browser bindings for a few pure pieces of the library. Each operation
//! takes plain numbers and returns a JSON string, so the page stays a
//! handful of `fetch`-free script lines.

use serde_json::json;
use wasm_bindgen::prelude::*;
use xldg_core::numcore::Tensor;
use xldg_core::prompting::{contrastive_loss, pool, ContrastiveConfig, Pooling};
use xldg_core::toylang::{generate_corpus, CorpusConfig, Preset, Split};

fn point(xy: &[f64]) -> Result<Tensor, String> {
    Tensor::row(xy.to_vec()).map_err(|e| e.to_string())
}

/// `points` holds four 2-D points: task prompt i, task prompt j, language
/// prompt i, language prompt j.
pub fn contrastive_geometry_json(points: &[f64], margin: f64, tau: f64) -> Result<String, String> {
    if points.len() != 8 {
        return Err(format!("expected 8 coordinates, got {}", points.len()));
    }
    let cfg = ContrastiveConfig {
        margin,
        temperature: tau,
        ..Default::default()
    };
    let p: Vec<Tensor> = points.chunks(2).map(point).collect::<Result<_, _>>()?;
    let out = contrastive_loss(&p[0], &p[1], &p[2], &p[3], &cfg).map_err(|e| e.to_string())?;
    Ok(json!({
        "d_p": out.d_p,
        "d_n": out.d_n,
        "loss": out.loss,
        "active": out.d_p - out.d_n + margin > 0.0,
    })
    .to_string())
}

/// Pools `rows` (row-major, `dim` columns) against the language-prompt
/// state `lang`. Attention and mean pooling also report row weights.
pub fn pool_json(rows: &[f64], dim: usize, lang: &[f64], method: &str) -> Result<String, String> {
    if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) || lang.len() != dim {
        return Err(format!(
            "{} values do not form rows of width {dim} matching the language state",
            rows.len()
        ));
    }
    let method: Pooling = method
        .parse()
        .map_err(|e: xldg_core::prompting::PromptingError| e.to_string())?;
    let n = rows.len() / dim;
    let h_tp = Tensor::matrix(n, dim, rows.to_vec()).map_err(|e| e.to_string())?;
    let h_lp = Tensor::row(lang.to_vec()).map_err(|e| e.to_string())?;
    let pooled = pool(&h_tp, &h_lp, method).map_err(|e| e.to_string())?;
    let weights = match method {
        Pooling::Attention => {
            let scores: Vec<f64> = rows
                .chunks(dim)
                .map(|r| r.iter().zip(lang).map(|(a, b)| a * b).sum::<f64>() / (dim as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            Some(e.iter().map(|x| x / z).collect::<Vec<_>>())
        }
        Pooling::Mean => Some(vec![1.0 / n as f64; n]),
        Pooling::Max => None,
    };
    Ok(json!({ "pooled": pooled.data(), "weights": weights }).to_string())
}

/// One test example of a freshly generated low-resource corpus, with its
/// trans-lingual references in every other language.
pub fn corpus_sample_json(langs: u16, concepts: u32, seed: u64, lang: &str, index: usize) -> Result<String, String> {
    let corpus =
        generate_corpus(&CorpusConfig::preset(Preset::Low, langs, concepts), seed).map_err(|e| e.to_string())?;
    let v = &corpus.vocab;
    let l = v
        .lang_by_code(lang)
        .ok_or_else(|| format!("unknown language '{lang}'"))?;
    let examples = corpus.examples(l, Split::Test);
    let ex = &examples[index % examples.len()];
    let mut refs = serde_json::Map::new();
    for t in v.langs().filter(|&t| t != l) {
        let r = corpus.trans_lingual_reference(ex, t).map_err(|e| e.to_string())?;
        refs.insert(v.code(t), json!(v.render(&r)));
    }
    Ok(json!({
        "lang": lang,
        "index": index % examples.len(),
        "word": v.render(&ex.word),
        "context": v.render(&ex.context),
        "definition": v.render(&ex.definition),
        "senses": ex.word_concepts.iter().map(|c| c.0).collect::<Vec<_>>(),
        "references": refs,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn contrastive_geometry(points: &[f64], margin: f64, tau: f64) -> Result<String, JsError> {
    contrastive_geometry_json(points, margin, tau).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attention_pool(rows: &[f64], dim: usize, lang: &[f64], method: &str) -> Result<String, JsError> {
    pool_json(rows, dim, lang, method).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn corpus_sample(langs: u16, concepts: u32, seed: u64, lang: &str, index: usize) -> Result<String, JsError> {
    corpus_sample_json(langs, concepts, seed, lang, index).map_err(|e| JsError::new(&e))
}
