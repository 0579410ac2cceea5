use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use xldg_core::evalkit::{
    all_pairs, compare_report, concept_f1, cross_mean, cross_pairs, generate_one, ignore_task_flag, language_mix_flag,
    render_svg, write_records_jsonl, write_results_csv, RunResults, METRICS,
};
use xldg_core::experiment::{
    ablation_csv, evaluate_model, pretrained_model, train_seed, AblationCell, RunConfig, RunMode,
};
use xldg_core::model::Seq2Seq;
use xldg_core::numcore::checkpoint::{BLOB_FILE, MANIFEST_FILE};
use xldg_core::toylang::{corpus_digest, generate_corpus, load_corpus, save_corpus, Split, ToyCorpus};
use xldg_core::trainer::write_log_csv;
use xldg_core::vocab::LangId;

use crate::{AblateArgs, EvalArgs, GenDataArgs, InspectArgs, TrainArgs};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const DIGEST_FILE: &str = "corpus.sha256";
pub const CONFIG_FILE: &str = "config.txt";
const PRETRAIN_CACHE: &str = ".pretrain";

fn fail(msg: String) -> Box<dyn std::error::Error> {
    msg.into()
}

fn corpus_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(CORPUS_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load(data: &Path) -> Result<ToyCorpus> {
    let path = corpus_path(data);
    if !path.exists() {
        return Err(fail(format!("missing corpus: {} (run gen-data first)", path.display())));
    }
    Ok(load_corpus(&path)?)
}

fn output_root(flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned()
        .or_else(|| std::env::var_os("XLDG_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `dir` empty, refusing to touch existing content without `force`.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(fail(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_new(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(fail(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST_FILE))?);
    h.update(fs::read(dir.join(BLOB_FILE))?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn seed_dir(run: &Path, seed: u64) -> PathBuf {
    run.join(format!("seed_{seed}"))
}

fn read_run_config(run: &Path) -> Result<RunConfig> {
    let path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    Ok(RunConfig::from_kv_text(&text)?)
}

fn check_digest(run: &Path, digest: &str) -> Result<()> {
    let recorded = fs::read_to_string(run.join(DIGEST_FILE))?;
    if recorded.trim() != digest {
        return Err(fail(format!(
            "incompatible run {}: trained on corpus {}, evaluating on {digest}",
            run.display(),
            recorded.trim()
        )));
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = a.cfg.resolve(&[
        ("langs", a.langs.as_ref()),
        ("concepts", a.concepts.as_ref()),
        ("preset", a.preset.as_ref()),
        ("corpus_seed", a.seed.as_ref()),
    ])?;
    let corpus = generate_corpus(&cfg.corpus_config(), cfg.corpus_seed)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(CORPUS_FILE);
    if path.exists() && !a.force {
        return Err(fail(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    save_corpus(&path, &corpus)?;
    let digest = corpus_digest(&corpus);
    fs::write(a.out.join(DIGEST_FILE), format!("{digest}\n"))?;

    println!("{:<6}{:>8}{:>8}{:>8}{:>8}", "lang", "train", "valid", "test", "vocab");
    for (code, train, valid, test, vocab) in corpus.stats() {
        println!("{code:<6}{train:>8}{valid:>8}{test:>8}{vocab:>8}");
    }
    println!("specials: PAD BOS EOS SEP; total vocabulary {}", corpus.vocab.size());
    println!("wrote {} (sha256 {digest})", path.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve(&[("mode", a.mode.as_ref())])?;
    let corpus = load(&a.data)?;
    let digest = corpus_digest(&corpus);
    let root = output_root(a.root.as_ref());
    let run = root.join(a.name.clone().unwrap_or_else(|| cfg.mode.name().to_string()));
    fresh_dir(&run, a.force)?;
    fs::write(run.join(CONFIG_FILE), cfg.to_kv_text())?;
    fs::write(run.join(DIGEST_FILE), format!("{digest}\n"))?;
    let cache = root.join(PRETRAIN_CACHE);

    for &seed in &cfg.seeds {
        let dir = seed_dir(&run, seed);
        fs::create_dir_all(&dir)?;
        let (init, pre) = pretrained_model(&cfg, &corpus, seed, Some(&cache))?;
        if let Some(acc) = pre.and_then(|p| p.accuracy) {
            eprintln!("seed {seed}: translation accuracy after pretraining {acc:.4}");
        }
        let out = train_seed(&cfg, &corpus, seed, init, |r| {
            eprintln!(
                "seed {seed} epoch {} step {} l_mle {:.4} l_c {:.4} val_token_f1 {:.4}",
                r.epoch,
                r.step,
                r.loss.l_mle,
                r.loss.l_c,
                r.val_token_f1.unwrap_or(f64::NAN)
            )
        })?;
        let ck = dir.join("checkpoint");
        out.best.save(&ck, &corpus.vocab)?;
        let mut log = Vec::new();
        write_log_csv(&mut log, &out.log)?;
        fs::write(dir.join("train_log.csv"), log)?;
        let hash = checkpoint_hash(&ck)?;
        fs::write(dir.join("checkpoint.sha256"), format!("{hash}\n"))?;
        println!(
            "seed {seed}: best epoch {} val_token_f1 {:.4} checkpoint {hash}",
            out.best_epoch, out.best_val_token_f1
        );
    }
    println!("run directory {}", run.display());
    Ok(())
}

fn pairs_for(spec: &str, corpus: &ToyCorpus) -> Result<Vec<(LangId, LangId)>> {
    let all = all_pairs(&corpus.vocab);
    match spec {
        "all" => Ok(all),
        "cross" => Ok(cross_pairs(&corpus.vocab)),
        "mono" => Ok(all.into_iter().filter(|(s, t)| s == t).collect()),
        other => Err(fail(format!("--pairs: expected all, cross or mono, got '{other}'"))),
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let corpus = load(&a.data)?;
    let digest = corpus_digest(&corpus);
    let pairs = pairs_for(&a.pairs, &corpus)?;
    let mut runs: Vec<RunResults> = Vec::new();
    for run in &a.runs {
        let mut cfg = read_run_config(run)?;
        check_digest(run, &digest)?;
        if a.limit.is_some() {
            cfg.eval_limit = a.limit;
        }
        for &seed in &cfg.seeds {
            let dir = seed_dir(run, seed);
            let (model, _) = Seq2Seq::load(&dir.join("checkpoint"))?;
            let report = evaluate_model(&cfg, &corpus, &model, &pairs)?;
            let mut csv = Vec::new();
            write_results_csv(&mut csv, &report.results)?;
            write_new(&dir.join("results.csv"), &csv, a.force)?;
            let mut jsonl = Vec::new();
            write_records_jsonl(&mut jsonl, &report.records)?;
            write_new(&dir.join("records.jsonl"), &jsonl, a.force)?;
            println!(
                "{} seed {seed}: cross concept_f1 {:.4} language_mix {:.4} ignore_task {:.4}",
                cfg.mode.name(),
                cross_mean(&report.results, "concept_f1"),
                cross_mean(&report.results, "language_mix_rate"),
                cross_mean(&report.results, "ignore_task_rate")
            );
            runs.push(RunResults {
                mode: cfg.mode.name().to_string(),
                seed,
                corpus_digest: digest.clone(),
                results: report.results,
            });
        }
    }
    let modes: BTreeSet<&str> = runs.iter().map(|r| r.mode.as_str()).collect();
    if modes.len() < 2 {
        return Ok(());
    }
    let baseline = a.baseline.clone().unwrap_or_else(|| runs[0].mode.clone());
    let baseline = baseline
        .parse::<RunMode>()
        .map(|m| m.name().to_string())
        .unwrap_or(baseline);
    let table = compare_report(&runs, &baseline)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.runs[0].parent().unwrap_or(Path::new(".")).join("compare"));
    fs::create_dir_all(&out)?;
    write_new(&out.join("compare.csv"), table.to_csv().as_bytes(), a.force)?;
    for metric in METRICS {
        write_new(
            &out.join(format!("{metric}.svg")),
            render_svg(&table, metric).as_bytes(),
            a.force,
        )?;
    }
    println!("comparison written to {}", out.display());
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve(&[("lambdas", a.lambdas.as_ref())])?;
    cfg.mode = RunMode::Contrastive;
    let corpus = load(&a.data)?;
    let digest = corpus_digest(&corpus);
    let root = output_root(a.root.as_ref());
    let run = root.join(&a.name);
    fresh_dir(&run, a.force)?;
    fs::write(run.join(CONFIG_FILE), cfg.to_kv_text())?;
    fs::write(run.join(DIGEST_FILE), format!("{digest}\n"))?;
    let cache = root.join(PRETRAIN_CACHE);
    let inits: Vec<Seq2Seq> = cfg
        .seeds
        .iter()
        .map(|&s| pretrained_model(&cfg, &corpus, s, Some(&cache)).map(|(m, _)| m))
        .collect::<std::result::Result<_, _>>()?;
    let pairs = cross_pairs(&corpus.vocab);

    let mut cells = Vec::new();
    for pooling in xldg_core::prompting::Pooling::ALL {
        for &lambda in &cfg.lambdas {
            let cell_cfg = RunConfig {
                pooling,
                lambda,
                ..cfg.clone()
            };
            let mut per_seed = Vec::new();
            for (&seed, init) in cfg.seeds.iter().zip(&inits) {
                let out = train_seed(&cell_cfg, &corpus, seed, init.clone(), |_| {})?;
                let report = evaluate_model(&cell_cfg, &corpus, &out.best, &pairs)?;
                let dir = run.join(format!("{pooling}_{lambda}")).join(format!("seed_{seed}"));
                fs::create_dir_all(&dir)?;
                let mut csv = Vec::new();
                write_results_csv(&mut csv, &report.results)?;
                fs::write(dir.join("results.csv"), csv)?;
                let mut log = Vec::new();
                write_log_csv(&mut log, &out.log)?;
                fs::write(dir.join("train_log.csv"), log)?;
                per_seed.push(report.results);
            }
            let cell = AblationCell::from_results(pooling, lambda, &per_seed);
            eprintln!(
                "pooling {pooling} lambda {lambda}: median cross concept_f1 {:.4}",
                cell.median_concept_f1()
            );
            cells.push(cell);
        }
    }
    let table = ablation_csv(&cfg.seeds, &cells);
    fs::write(run.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let corpus = load(&a.data)?;
    let lang = |code: &str| {
        corpus
            .vocab
            .lang_by_code(code)
            .ok_or_else(|| fail(format!("unknown language code '{code}'")))
    };
    let src = lang(&a.src)?;
    let tgt = lang(a.tgt.as_deref().unwrap_or(&a.src))?;
    let examples = corpus.examples(src, Split::Test);
    let ex = examples.get(a.index).ok_or_else(|| {
        fail(format!(
            "index {} outside the {} test examples",
            a.index,
            examples.len()
        ))
    })?;
    let v = &corpus.vocab;
    println!("word       {}", v.render(&ex.word));
    println!("context    {}", v.render(&ex.context));
    println!("reference  {}", v.render(&corpus.trans_lingual_reference(ex, tgt)?));
    for run in &a.runs {
        let cfg = read_run_config(run)?;
        let seed = cfg.seeds[0];
        let (model, _) = Seq2Seq::load(&seed_dir(run, seed).join("checkpoint"))?;
        let out = generate_one(cfg.mode.system(&model), ex, tgt, v, cfg.max_new_tokens)?;
        let mix = language_mix_flag(&out, tgt, v).0;
        let ign = ignore_task_flag(&out, ex, v, cfg.ignore_threshold);
        println!(
            "{:<14} {}  [concept_f1 {:.3}{}{}]",
            cfg.mode.name(),
            v.render(&out),
            concept_f1(&out, &ex.def_concepts, v),
            if mix { ", language-mix" } else { "" },
            if ign { ", ignore-task" } else { "" }
        );
    }
    Ok(())
}
