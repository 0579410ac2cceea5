use proptest::prelude::*;
use xldg_core::evalkit::*;
use xldg_core::model::{ModelConfig, PromptMode, Seq2Seq};
use xldg_core::toylang::{generate_corpus, CorpusConfig, Example, Preset, ToyCorpus};
use xldg_core::vocab::{ConceptId, LangId, TokenId, Vocabulary, EOS, SEP};

fn vocab() -> Vocabulary {
    Vocabulary::new(3, 20)
}

fn toks(v: &Vocabulary, lang: u16, concepts: &[u32]) -> Vec<TokenId> {
    concepts.iter().map(|&c| v.token(LangId(lang), ConceptId(c))).collect()
}

fn cids(c: &[u32]) -> Vec<ConceptId> {
    c.iter().map(|&x| ConceptId(x)).collect()
}

fn example(v: &Vocabulary, context: &[u32], def: &[u32]) -> Example {
    Example {
        lang: LangId(0),
        word: toks(v, 0, &context[..1]),
        context: toks(v, 0, context),
        definition: toks(v, 0, def),
        word_concepts: cids(&context[..1]),
        def_concepts: cids(def),
    }
}

fn small_corpus() -> ToyCorpus {
    let cfg = CorpusConfig {
        train: 120,
        valid: 16,
        test: 16,
        templates_per_concept: 8,
        ..CorpusConfig::preset(Preset::Rich, 3, 60)
    };
    generate_corpus(&cfg, 5).unwrap()
}

fn small_model(c: &ToyCorpus) -> Seq2Seq {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ffn_dim: 32,
        max_len: 32,
        n_task_tokens: 4,
        ..ModelConfig::for_vocab(&c.vocab)
    };
    Seq2Seq::new(cfg, 3).unwrap()
}

#[test]
fn language_mix_examples() {
    let v = vocab();
    let clean = toks(&v, 1, &[1, 2, 3, 4, 5]);
    assert_eq!(language_mix_flag(&clean, LangId(1), &v), (false, vec![]));

    let mut mixed = clean.clone();
    let intruder = v.token(LangId(0), ConceptId(7));
    mixed.insert(2, intruder);
    assert_eq!(language_mix_flag(&mixed, LangId(1), &v), (true, vec![intruder]));

    assert_eq!(language_mix_flag(&[], LangId(1), &v), (false, vec![]));
    let mut specials = clean;
    specials.extend([SEP, EOS]);
    assert!(!language_mix_flag(&specials, LangId(1), &v).0);
}

#[test]
fn ignore_task_jaccard_oracle() {
    let v = vocab();
    // Context concepts {0..5}; definition {4, 5, 10, 11, 12}.
    let ex = example(&v, &[0, 1, 2, 3, 4, 5], &[4, 5, 10, 11, 12]);
    // Shares 2 of 6 context concepts and 4 of 5 definition concepts.
    let out = toks(&v, 0, &[4, 5, 10, 11]);
    let (j_ctx, j_def) = ignore_task_scores(&out, &ex, &v);
    assert!((j_ctx - 0.25).abs() < 1e-12);
    assert!((j_def - 0.8).abs() < 1e-12);
    assert!(!ignore_task_flag(&out, &ex, &v, DEFAULT_IGNORE_TASK_THRESHOLD));
}

#[test]
fn context_copy_is_flagged_and_definition_is_not() {
    let v = vocab();
    let ex = example(&v, &[0, 1, 2, 3, 4, 5], &[4, 5, 10, 11, 12]);
    let copy = toks(&v, 2, &[0, 1, 2, 3, 4, 5]);
    assert!(ignore_task_flag(&copy, &ex, &v, 0.5));
    assert!(!ignore_task_flag(&ex.definition, &ex, &v, 0.5));
}

#[test]
fn concept_f1_oracle() {
    let v = vocab();
    let out = toks(&v, 1, &[1, 2, 9]);
    let f = concept_f1(&out, &cids(&[1, 2, 3, 4]), &v);
    assert!((f - 4.0 / 7.0).abs() < 1e-12);
    assert_eq!(concept_f1(&toks(&v, 0, &[1, 2, 3, 4]), &cids(&[4, 3, 2, 1]), &v), 1.0);
    assert_eq!(concept_f1(&toks(&v, 0, &[5, 6]), &cids(&[1, 2]), &v), 0.0);
}

#[test]
fn foreign_tokens_keep_their_meaning() {
    let v = vocab();
    let mut out = toks(&v, 1, &[1, 2]);
    out.extend(toks(&v, 0, &[3]));
    assert_eq!(concept_f1(&out, &cids(&[1, 2, 3]), &v), 1.0);
    assert!(language_mix_flag(&out, LangId(1), &v).0);
}

#[test]
fn relative_decrease_matches_the_table_style() {
    let r = relative_decrease(0.04, 0.18).unwrap();
    assert!((r - 0.7777777777777778).abs() < 1e-12);
    assert_eq!(format!("{:.1}%", 100.0 * r), "77.8%");
    assert_eq!(relative_decrease(0.3, 0.3), Some(0.0));
    assert_eq!(relative_decrease(0.0, 0.0), Some(0.0));
    assert_eq!(relative_decrease(0.1, 0.0), None);
}

#[test]
fn lossless_translation_of_a_perfect_definition_scores_one() {
    let c = small_corpus();
    let ex = &c.examples(LangId(0), xldg_core::toylang::Split::Test)[0];
    for tgt in c.vocab.langs() {
        let out = translate_lenient(&ex.definition, tgt, &c.vocab);
        assert_eq!(concept_f1(&out, &ex.def_concepts, &c.vocab), 1.0);
        assert!(!language_mix_flag(&out, tgt, &c.vocab).0);
        assert_eq!(out, c.trans_lingual_reference(ex, tgt).unwrap());
    }
    // A context copy stays a context copy after translation.
    let copied = translate_lenient(&ex.context, LangId(2), &c.vocab);
    assert!(ignore_task_flag(&copied, ex, &c.vocab, 0.5));
}

fn run_eval(c: &ToyCorpus, m: &Seq2Seq) -> EvalReport {
    let opts = EvalOptions {
        limit: Some(6),
        max_new_tokens: 6,
        ..Default::default()
    };
    evaluate(
        System::Model {
            model: m,
            mode: PromptMode::Prompted,
        },
        c,
        &all_pairs(&c.vocab),
        &opts,
    )
    .unwrap()
}

#[test]
fn evaluation_accounting_and_round_trips() {
    let c = small_corpus();
    let m = small_model(&c);
    let rep = run_eval(&c, &m);
    assert_eq!(rep.results.len(), 9);
    assert_eq!(rep.records.len(), 9 * 6);
    for r in &rep.results {
        assert_eq!(r.n_examples, 6);
        assert_eq!(r.mono_token_f1.is_some(), !r.is_cross());
    }

    let mut jsonl = Vec::new();
    write_records_jsonl(&mut jsonl, &rep.records).unwrap();
    let back = read_records_jsonl(std::str::from_utf8(&jsonl).unwrap()).unwrap();
    assert_eq!(back, rep.records);
    let again = aggregate_records(&back);
    for (a, b) in again.iter().zip(&rep.results) {
        assert_eq!((&a.src, &a.tgt, a.n_examples), (&b.src, &b.tgt, b.n_examples));
        for metric in METRICS {
            match (a.metric(metric), b.metric(metric)) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-12, "{metric}"),
                (x, y) => assert_eq!(x, y),
            }
        }
    }

    let mut csv = Vec::new();
    write_results_csv(&mut csv, &rep.results).unwrap();
    assert_eq!(
        read_results_csv(std::str::from_utf8(&csv).unwrap()).unwrap(),
        rep.results
    );

    let second = run_eval(&c, &m);
    assert_eq!(second, rep);
}

#[test]
fn pipeline_outputs_are_in_the_target_language() {
    let c = small_corpus();
    let m = small_model(&c);
    let opts = EvalOptions {
        limit: Some(4),
        max_new_tokens: 6,
        ..Default::default()
    };
    let rep = evaluate(System::Pipeline { model: &m }, &c, &cross_pairs(&c.vocab), &opts).unwrap();
    assert!(rep.records.iter().all(|r| !r.flags.language_mix));
    let ex = &c.examples(LangId(1), xldg_core::toylang::Split::Test)[0];
    let out = pipeline_baseline(&m, ex, LangId(2), &c.vocab, 6).unwrap();
    assert!(out.iter().all(|&t| c.vocab.lang_of(t) == Some(LangId(2))));
}

fn results(mode: &str, seed: u64, digest: &str, mix: f64) -> RunResults {
    let r = |src: &str, tgt: &str| EvalResult {
        src: src.into(),
        tgt: tgt.into(),
        n_examples: 10,
        language_mix_rate: mix,
        ignore_task_rate: 0.0,
        degenerate_rate: 0.0,
        concept_f1: 0.5 + mix,
        mono_token_f1: (src == tgt).then_some(0.9),
    };
    RunResults {
        mode: mode.into(),
        seed,
        corpus_digest: digest.into(),
        results: vec![r("aa", "aa"), r("aa", "bb"), r("bb", "aa")],
    }
}

#[test]
fn comparison_table_reports_medians_and_relative_decrease() {
    let runs = vec![
        results("direct", 0, "d", 0.18),
        results("direct", 1, "d", 0.30),
        results("direct", 2, "d", 0.10),
        results("contrastive", 0, "d", 0.04),
        results("contrastive", 1, "d", 0.02),
        results("contrastive", 2, "d", 0.06),
    ];
    let t = compare_report(&runs, "direct").unwrap();
    assert_eq!(t.seeds, vec![0, 1, 2]);
    let row = t.row("aa", "bb", "language_mix_rate", "contrastive").unwrap();
    assert_eq!(row.per_seed, vec![0.04, 0.02, 0.06]);
    assert_eq!(row.median, 0.04);
    assert!((row.rel_decrease.unwrap() - 0.7777777777777778).abs() < 1e-12);
    let base = t.row("aa", "bb", "language_mix_rate", "direct").unwrap();
    assert_eq!(base.rel_decrease, Some(0.0));
    assert!(t.row("aa", "bb", "mono_token_f1", "direct").is_none());
    assert!(t
        .to_csv()
        .lines()
        .any(|l| l.starts_with("aa,bb,language_mix_rate,contrastive,") && l.ends_with(",77.8%")));
}

#[test]
fn identical_modes_show_no_change() {
    let runs = vec![results("a", 0, "d", 0.2), results("b", 0, "d", 0.2)];
    let t = compare_report(&runs, "a").unwrap();
    assert!(t.rows.iter().all(|r| r.rel_decrease == Some(0.0)));
}

#[test]
fn svg_has_one_group_per_pair() {
    let runs = vec![results("direct", 0, "d", 0.1), results("contrastive", 0, "d", 0.05)];
    let t = compare_report(&runs, "direct").unwrap();
    let svg = render_svg(&t, "concept_f1");
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<g class=\"pair\"").count(), 3);
    for pair in ["aa-aa", "aa-bb", "bb-aa"] {
        assert!(svg.contains(&format!("data-pair=\"{pair}\"")));
    }
    let cross = render_svg(&t, "mono_token_f1");
    assert_eq!(cross.matches("<g class=\"pair\"").count(), 1);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let err = |runs: Vec<RunResults>| compare_report(&runs, "direct").unwrap_err().to_string();
    assert!(err(vec![results("direct", 0, "x", 0.1), results("c", 0, "y", 0.1)]).contains("corpus"));
    assert!(err(vec![results("direct", 0, "x", 0.1), results("direct", 1, "x", 0.1)]).contains("two modes"));
    assert!(err(vec![results("a", 0, "x", 0.1), results("c", 0, "x", 0.1)]).contains("baseline"));
    assert!(err(vec![results("direct", 0, "x", 0.1), results("c", 1, "x", 0.1)]).contains("seed set"));
    let mut short = results("c", 0, "x", 0.1);
    short.results.pop();
    assert!(err(vec![results("direct", 0, "x", 0.1), short]).contains("pairs"));
}

#[test]
fn median_of_even_and_odd_counts() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
}

proptest! {
    #[test]
    fn concept_f1_ignores_order_and_surface_language(
        out in prop::collection::vec(0u32..20, 0..10),
        reference in prop::collection::vec(0u32..20, 1..10),
        lang in 0u16..3,
        seed in any::<u64>(),
    ) {
        let v = vocab();
        let a = toks(&v, 0, &out);
        let mut shuffled = out.clone();
        let k = if shuffled.is_empty() { 0 } else { (seed as usize) % shuffled.len() };
        shuffled.rotate_left(k);
        shuffled.reverse();
        let b = toks(&v, lang, &shuffled);
        let f = concept_f1(&a, &cids(&reference), &v);
        prop_assert_eq!(f.to_bits(), concept_f1(&b, &cids(&reference), &v).to_bits());
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn flagged_outputs_always_carry_a_foreign_token(
        out in prop::collection::vec((0u16..3, 0u32..20), 0..10),
        target in 0u16..3,
    ) {
        let v = vocab();
        let tokens: Vec<TokenId> = out.iter().map(|&(l, c)| v.token(LangId(l), ConceptId(c))).collect();
        let (flag, foreign) = language_mix_flag(&tokens, LangId(target), &v);
        prop_assert_eq!(flag, tokens.iter().any(|&t| v.lang_of(t) != Some(LangId(target))));
        prop_assert!(foreign.iter().all(|&t| v.lang_of(t) != Some(LangId(target))));
    }

    #[test]
    fn adding_context_concepts_never_clears_the_ignore_flag(
        extra in prop::collection::vec(0u32..6, 0..6),
    ) {
        let v = vocab();
        let ex = example(&v, &[0, 1, 2, 3, 4, 5], &[10, 11, 12, 13]);
        let base = toks(&v, 0, &[0, 1, 2]);
        let before = ignore_task_flag(&base, &ex, &v, 0.5);
        let mut more = base.clone();
        more.extend(toks(&v, 0, &extra));
        prop_assert!(!before || ignore_task_flag(&more, &ex, &v, 0.5));
    }
}
