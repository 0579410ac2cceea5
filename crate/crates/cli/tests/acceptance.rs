//! End-to-end acceptance checks. Every test prints one `criterion N: PASS|FAIL`
//! line to stderr, bypassing the harness's output capture.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xldg_core::evalkit::{cross_mean, cross_pairs, median};
use xldg_core::experiment::{evaluate_model, pretrained_model, train_seed, RunConfig, RunMode};
use xldg_core::model::{Bound, ModelConfig, ModelError, PromptMode, Seq2Seq, TASK_PROMPT};
use xldg_core::numcore::{
    grad_check, AttentionLayout, GradCheckOptions, GradCheckReport, Graph, NumError, Segment, Tensor, Var,
};
use xldg_core::prompting::{
    combined_loss, combined_var, contrastive_loss, contrastive_var, group_prompt_states, pool_var, ContrastiveConfig,
    Pooling, PromptingError,
};
use xldg_core::toylang::{generate_corpus, CorpusConfig, Preset, ToyCorpus};
use xldg_core::trainer::{definition_batch, Batch, PairedSampler, TrainConfig, TrainMode, Trainer, Tuning};

fn verdict(n: usize, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n}: {detail}");
}

fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
}

fn probe(g: &mut Graph<'_>, x: Var) -> Result<Var, NumError> {
    let t = g.value(x);
    let w: Vec<f64> = (0..t.len()).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.43).collect();
    let w = g.input(Tensor::new(t.shape().to_vec(), w)?);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn as_num(e: ModelError) -> NumError {
    match e {
        ModelError::Num(n) => n,
        other => panic!("{other}"),
    }
}

fn prompt_num(e: PromptingError) -> NumError {
    match e {
        PromptingError::Num(n) => n,
        other => panic!("{other}"),
    }
}

// ---------------------------------------------------------------- 1

type OpCheck = Box<dyn Fn() -> GradCheckReport>;

fn op(f: impl Fn(&mut Graph<'_>, &[Var]) -> Result<Var, NumError> + 'static, params: Vec<Tensor>) -> OpCheck {
    Box::new(move || grad_check(&f, &named(params.clone()), GradCheckOptions::default()).unwrap())
}

fn away_from_zero(t: Tensor) -> Tensor {
    let data = t.data().iter().map(|x| x + 0.2 * x.signum()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn op_suite() -> Vec<(&'static str, OpCheck)> {
    let causal = AttentionLayout {
        heads: 2,
        causal: true,
        segments: vec![
            Segment {
                q_start: 0,
                q_len: 3,
                kv_start: 0,
                kv_len: 3,
            },
            Segment {
                q_start: 3,
                q_len: 2,
                kv_start: 3,
                kv_len: 2,
            },
        ],
    };
    let cross = AttentionLayout {
        heads: 2,
        causal: false,
        segments: vec![
            Segment {
                q_start: 0,
                q_len: 2,
                kv_start: 0,
                kv_len: 4,
            },
            Segment {
                q_start: 2,
                q_len: 3,
                kv_start: 4,
                kv_len: 1,
            },
        ],
    };
    let active = ContrastiveConfig::default();
    let inactive = ContrastiveConfig { margin: 0.1, ..active };
    let far = |t: Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * 6.0).collect()).unwrap();
    let near = |t: &Tensor, s: u64| {
        let n = rand_t(1, 4, s);
        Tensor::new(
            vec![1, 4],
            t.data().iter().zip(n.data()).map(|(a, b)| a + 0.01 * b).collect(),
        )
        .unwrap()
    };
    let tp = rand_t(1, 4, 60);
    vec![
        (
            "matmul",
            op(
                |g, p| {
                    let y = g.matmul(p[0], p[1])?;
                    probe(g, y)
                },
                vec![rand_t(3, 4, 1), rand_t(4, 2, 2)],
            ),
        ),
        (
            "matmul_nt",
            op(
                |g, p| {
                    let y = g.matmul_nt(p[0], p[1])?;
                    probe(g, y)
                },
                vec![rand_t(3, 4, 3), rand_t(5, 4, 4)],
            ),
        ),
        (
            "transpose",
            op(
                |g, p| {
                    let y = g.transpose(p[0]);
                    probe(g, y)
                },
                vec![rand_t(3, 4, 5)],
            ),
        ),
        (
            "add",
            op(
                |g, p| {
                    let y = g.add(p[0], p[1])?;
                    probe(g, y)
                },
                vec![rand_t(2, 3, 6), rand_t(2, 3, 7)],
            ),
        ),
        (
            "sub",
            op(
                |g, p| {
                    let y = g.sub(p[0], p[1])?;
                    probe(g, y)
                },
                vec![rand_t(2, 3, 8), rand_t(2, 3, 9)],
            ),
        ),
        (
            "mul",
            op(
                |g, p| {
                    let y = g.mul(p[0], p[1])?;
                    probe(g, y)
                },
                vec![rand_t(2, 3, 10), rand_t(2, 3, 11)],
            ),
        ),
        (
            "add_row",
            op(
                |g, p| {
                    let y = g.add_row(p[0], p[1])?;
                    probe(g, y)
                },
                vec![rand_t(3, 4, 12), rand_t(1, 4, 13)],
            ),
        ),
        (
            "scale",
            op(
                |g, p| {
                    let y = g.scale(p[0], -1.7);
                    probe(g, y)
                },
                vec![rand_t(2, 3, 14)],
            ),
        ),
        (
            "add_scalar",
            op(
                |g, p| {
                    let y = g.add_scalar(p[0], 0.3);
                    probe(g, y)
                },
                vec![rand_t(2, 3, 15)],
            ),
        ),
        (
            "gelu",
            op(
                |g, p| {
                    let y = g.gelu(p[0]);
                    probe(g, y)
                },
                vec![rand_t(3, 4, 16)],
            ),
        ),
        (
            "relu",
            op(
                |g, p| {
                    let y = g.relu(p[0]);
                    probe(g, y)
                },
                vec![away_from_zero(rand_t(3, 4, 17))],
            ),
        ),
        (
            "sum",
            op(
                |g, p| {
                    let y = g.mul(p[0], p[0])?;
                    Ok(g.sum(y))
                },
                vec![rand_t(3, 4, 18)],
            ),
        ),
        (
            "mean",
            op(
                |g, p| {
                    let y = g.mul(p[0], p[0])?;
                    Ok(g.mean(y))
                },
                vec![rand_t(3, 4, 19)],
            ),
        ),
        ("l2_norm", op(|g, p| Ok(g.l2_norm(p[0])), vec![rand_t(1, 5, 20)])),
        (
            "softmax",
            op(
                |g, p| {
                    let y = g.softmax(p[0]);
                    probe(g, y)
                },
                vec![rand_t(3, 5, 21)],
            ),
        ),
        (
            "layer_norm",
            op(
                |g, p| {
                    let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
                    probe(g, y)
                },
                vec![rand_t(3, 6, 22), rand_t(1, 6, 23), rand_t(1, 6, 24)],
            ),
        ),
        (
            "cross_entropy",
            op(
                |g, p| {
                    let l = g.matmul(p[0], p[1])?;
                    g.cross_entropy(l, &[2, 0, 4, 1], 4)
                },
                vec![rand_t(4, 3, 25), rand_t(3, 5, 26)],
            ),
        ),
        (
            "attention_causal",
            op(
                move |g, p| {
                    let y = g.attention(p[0], p[1], p[2], causal.clone())?;
                    probe(g, y)
                },
                vec![rand_t(5, 4, 27), rand_t(5, 4, 28), rand_t(5, 4, 29)],
            ),
        ),
        (
            "attention_cross",
            op(
                move |g, p| {
                    let y = g.attention(p[0], p[1], p[2], cross.clone())?;
                    probe(g, y)
                },
                vec![rand_t(5, 4, 30), rand_t(5, 4, 31), rand_t(5, 4, 32)],
            ),
        ),
        (
            "row_plumbing",
            op(
                |g, p| {
                    let c = g.concat_rows(&[p[0], p[1]])?;
                    let r = g.gather_rows(c, &[4, 0, 0, 2])?;
                    let s = g.slice_rows(r, 1, 2)?;
                    let a = probe(g, r)?;
                    let b = probe(g, s)?;
                    g.add(a, b)
                },
                vec![rand_t(2, 3, 33), rand_t(3, 3, 34)],
            ),
        ),
        (
            "mean_rows",
            op(
                |g, p| {
                    let y = g.mean_rows(p[0]);
                    probe(g, y)
                },
                vec![rand_t(4, 3, 35)],
            ),
        ),
        (
            "max_rows",
            op(
                |g, p| {
                    let y = g.max_rows(p[0]);
                    probe(g, y)
                },
                vec![rand_t(4, 3, 36)],
            ),
        ),
        (
            "pool_attention",
            op(
                |g, p| {
                    let y = pool_var(g, p[0], p[1], Pooling::Attention).map_err(prompt_num)?;
                    probe(g, y)
                },
                vec![rand_t(4, 6, 37), rand_t(1, 6, 38)],
            ),
        ),
        (
            "pool_mean",
            op(
                |g, p| {
                    let y = pool_var(g, p[0], p[1], Pooling::Mean).map_err(prompt_num)?;
                    probe(g, y)
                },
                vec![rand_t(4, 6, 39), rand_t(1, 6, 40)],
            ),
        ),
        (
            "pool_max",
            op(
                |g, p| {
                    let y = pool_var(g, p[0], p[1], Pooling::Max).map_err(prompt_num)?;
                    probe(g, y)
                },
                vec![rand_t(4, 6, 41), rand_t(1, 6, 42)],
            ),
        ),
        (
            "contrastive_active",
            op(
                move |g, p| {
                    Ok(contrastive_var(g, p[0], p[1], p[2], p[3], &active)
                        .map_err(prompt_num)?
                        .loss)
                },
                vec![rand_t(1, 4, 43), rand_t(1, 4, 44), rand_t(1, 4, 45), rand_t(1, 4, 46)],
            ),
        ),
        (
            "contrastive_inactive",
            op(
                move |g, p| {
                    let c = contrastive_var(g, p[0], p[1], p[2], p[3], &inactive).map_err(prompt_num)?;
                    let s = g.add(c.loss, c.d_n)?;
                    g.add(s, c.d_p)
                },
                vec![tp.clone(), near(&tp, 61), far(rand_t(1, 4, 62)), far(rand_t(1, 4, 63))],
            ),
        ),
        (
            "combined",
            op(
                |g, p| {
                    let a = g.l2_norm(p[0]);
                    let b = g.l2_norm(p[1]);
                    combined_var(g, a, b, 0.3).map_err(prompt_num)
                },
                vec![rand_t(1, 3, 47), rand_t(1, 3, 48)],
            ),
        ),
    ]
}

fn tiny_corpus() -> ToyCorpus {
    generate_corpus(&CorpusConfig::preset(Preset::Low, 2, 50), 5).unwrap()
}

/// Gradient of the complete contrastive-mode objective, λ-blended MLE
/// and contrastive terms, through every model parameter.
fn contrastive_step_check(pooling: Pooling) -> (GradCheckReport, f64) {
    let corpus = tiny_corpus();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 32,
        n_task_tokens: 3,
        ..ModelConfig::for_vocab(&corpus.vocab)
    };
    let model = Seq2Seq::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = PairedSampler::new(&corpus, 3, &mut rng).next_batch(&corpus, &mut rng);
    let Batch::Paired { group_i, .. } = &batch else {
        panic!("paired sampler")
    };
    let ni = group_i.len();
    let refs = batch.examples();
    let (enc, dec, tgt) = definition_batch(&cfg, &corpus, &refs, PromptMode::Prompted).unwrap();
    let ccfg = ContrastiveConfig {
        lambda: 0.5,
        margin: 2.0,
        pooling,
        ..Default::default()
    };
    let gap = std::cell::Cell::new(f64::NAN);
    let params: Vec<(String, Tensor)> = model.weights.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let report = grad_check(
        |g, vars| {
            let mut it = vars.iter();
            let w = model.weights.map(|_, _| *it.next().unwrap());
            let mut b = Bound::from_vars(g, &model, w, true).map_err(as_num)?;
            let mle = b.mle(g, &enc, &dec, &tgt).map_err(as_num)?;
            let idx_i: Vec<usize> = (0..ni).collect();
            let idx_j: Vec<usize> = (ni..refs.len()).collect();
            let (tp_i, lp_i) =
                group_prompt_states(g, mle.enc_states, &mle.enc_packed, &enc, &idx_i, pooling).map_err(prompt_num)?;
            let (tp_j, lp_j) =
                group_prompt_states(g, mle.enc_states, &mle.enc_packed, &enc, &idx_j, pooling).map_err(prompt_num)?;
            let c = contrastive_var(g, tp_i, tp_j, lp_i, lp_j, &ccfg).map_err(prompt_num)?;
            if gap.get().is_nan() {
                gap.set(g.scalar(c.d_p) - g.scalar(c.d_n) + ccfg.margin);
            }
            combined_var(g, mle.loss, c.loss, ccfg.lambda).map_err(prompt_num)
        },
        &params,
        GradCheckOptions::default(),
    )
    .unwrap();
    (report, gap.get())
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, check) in op_suite() {
        let r = check();
        if r.max_rel_error() > worst.0 {
            worst = (r.max_rel_error(), name);
        }
        if !r.passes(1e-5) {
            failures.push(format!("{name}: {r}"));
        }
    }
    let mut gaps = Vec::new();
    for pooling in [Pooling::Attention, Pooling::Mean] {
        let (r, gap) = contrastive_step_check(pooling);
        gaps.push(gap);
        if r.max_rel_error() > worst.0 {
            worst = (r.max_rel_error(), "contrastive step");
        }
        if !r.passes(1e-5) {
            failures.push(format!("contrastive step ({pooling}): {r}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let away_from_kink = gaps.iter().all(|g| g.abs() > 1e-3);
    verdict(
        1,
        failures.is_empty() && away_from_kink && secs < 120.0,
        &format!(
            "worst rel err {:.2e} ({}), hinge gaps {gaps:.3?}, {secs:.1}s {}",
            worst.0,
            worst.1,
            failures.join("; ")
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_loss_oracles() {
    let start = Instant::now();
    let row = |v: Vec<f64>| Tensor::row(v).unwrap();
    let cfg = ContrastiveConfig::default();
    let hand = contrastive_loss(
        &row(vec![0.0, 0.0]),
        &row(vec![3.0, 4.0]),
        &row(vec![1.0, 0.0]),
        &row(vec![0.0, 1.0]),
        &cfg,
    )
    .unwrap();
    let hand_ok = (hand.d_p - 5.0).abs() < 1e-12 && (hand.d_n - 1.0).abs() < 1e-12 && (hand.loss - 31.25).abs() < 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut homog_bad, mut hinge_bad, mut zeros, mut actives) = (0, 0, 0, 0);
    for case in 0..1000 {
        let d = rng.gen_range(1..9);
        let mut v = || row((0..d).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let (tp_i, mut tp_j, lp_i, lp_j) = (v(), v(), v(), v());
        if case % 2 == 0 {
            tp_j = tp_i.clone();
        }
        let c = ContrastiveConfig {
            margin: rng.gen_range(0.0..3.0),
            temperature: rng.gen_range(0.01..2.0),
            ..cfg
        };
        let scale = rng.gen_range(0.1..10.0);
        let a = contrastive_loss(&tp_i, &tp_j, &lp_i, &lp_j, &c).unwrap();
        let b = contrastive_loss(
            &tp_i,
            &tp_j,
            &lp_i,
            &lp_j,
            &ContrastiveConfig {
                temperature: c.temperature * scale,
                ..c
            },
        )
        .unwrap();
        if (a.loss - b.loss * scale).abs() > 1e-12 * a.loss.max(1.0) {
            homog_bad += 1;
        }
        let gap = a.d_p - a.d_n + c.margin;
        if gap <= 0.0 {
            zeros += 1;
            hinge_bad += usize::from(a.loss != 0.0);
        } else {
            actives += 1;
            hinge_bad += usize::from((a.loss - gap / c.temperature).abs() > 1e-12 * a.loss.max(1.0));
        }
        hinge_bad += usize::from(a.loss < 0.0 || a.d_p < 0.0 || a.d_n < 0.0);
    }

    let mut endpoint_bad = 0;
    for _ in 0..1000 {
        let (m, c) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
        endpoint_bad += usize::from(combined_loss(m, c, 0.0).unwrap().to_bits() != m.to_bits());
        endpoint_bad += usize::from(combined_loss(m, c, 1.0).unwrap().to_bits() != c.to_bits());
    }
    let mixed = (combined_loss(2.0, 31.25, 0.2).unwrap() - 7.85).abs() < 1e-12;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        hand_ok && homog_bad == 0 && hinge_bad == 0 && zeros > 0 && actives > 0 && endpoint_bad == 0 && mixed && secs < 60.0,
        &format!(
            "hand loss {:.6}, 1000 random inputs ({zeros} hinge-zero, {actives} active): {homog_bad} homogeneity and {hinge_bad} hinge violations, {endpoint_bad} inexact endpoints, {secs:.1}s",
            hand.loss
        ),
    );
}

// ---------------------------------------------------------------- 3

fn bits(m: &Seq2Seq) -> Vec<(String, Vec<u64>)> {
    m.weights
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

/// Steps a contrastive-mode and a prompt-combination trainer through the
/// same batches; returns the first step at which their parameters differ.
fn lockstep(corpus: &ToyCorpus, lambda: f64, steps: usize) -> (Option<usize>, bool, f64) {
    let cfg = RunConfig {
        preset: Preset::Low,
        ..RunConfig::default()
    };
    let mut init = Seq2Seq::new(cfg.model_config(corpus), 4).unwrap();
    init.config.dropout = cfg.dropout;
    let contrastive = ContrastiveConfig {
        lambda,
        margin: 20.0,
        ..cfg.contrastive_config()
    };
    let tc = |mode| TrainConfig {
        contrastive: contrastive.clone(),
        learning_rate: cfg.learning_rate(),
        seed: 4,
        ..TrainConfig::new(mode, Tuning::Full)
    };
    let mut a = Trainer::new(init.clone(), tc(TrainMode::Contrastive));
    let mut b = Trainer::new(init, tc(TrainMode::PromptCombo));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut batches = Vec::new();
    while batches.len() < steps {
        batches.extend(PairedSampler::epoch(corpus, cfg.batch_size, &mut rng));
    }
    let mut losses_match = true;
    let mut max_lc = 0.0f64;
    for (step, batch) in batches.iter().take(steps).enumerate() {
        let la = a.train_step(corpus, batch).unwrap();
        let lb = b.train_step(corpus, batch).unwrap();
        max_lc = max_lc.max(la.l_c);
        if lambda == 0.0 {
            losses_match &= la.l_final.to_bits() == la.l_mle.to_bits() && la.l_final.to_bits() == lb.l_final.to_bits();
        }
        if bits(&a.model) != bits(&b.model) {
            return (Some(step + 1), losses_match, max_lc);
        }
    }
    (None, losses_match, max_lc)
}

#[test]
fn criterion_03_lambda_zero_equivalence() {
    let start = Instant::now();
    let corpus = generate_corpus(&CorpusConfig::preset(Preset::Low, 3, 200), 7).unwrap();
    let (diverged, losses_match, max_lc) = lockstep(&corpus, 0.0, 50);
    let (control, _, _) = lockstep(&corpus, 0.2, 5);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        diverged.is_none() && losses_match && max_lc > 0.0 && control.is_some() && secs < 120.0,
        &format!(
            "λ=0 trajectories bit-identical for 50 steps: {} (active contrastive term up to {max_lc:.2}, l_final == l_mle: {losses_match}); λ=0.2 control diverges at step {control:?}, {secs:.1}s",
            diverged.is_none()
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_prompt_only_freeze() {
    let start = Instant::now();
    let cfg = RunConfig {
        preset: Preset::Low,
        tuning: Tuning::PromptOnly,
        mode: RunMode::Contrastive,
        epochs: 30,
        pretrain_steps: 300,
        val_limit: Some(20),
        ..RunConfig::default()
    };
    let corpus = generate_corpus(&cfg.corpus_config(), cfg.corpus_seed).unwrap();
    let (init, _) = pretrained_model(&cfg, &corpus, 0, None).unwrap();
    let out = train_seed(&cfg, &corpus, 0, init.clone(), |_| {}).unwrap();
    let mut changed_frozen = Vec::new();
    let mut prompt_moved = false;
    for ((name, before), (_, after)) in bits(&init).into_iter().zip(bits(&out.best)) {
        if name == TASK_PROMPT {
            prompt_moved = before != after;
        } else if before != after {
            changed_frozen.push(name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        changed_frozen.is_empty() && prompt_moved && cfg.learning_rate() == 1e-2 && secs < 600.0,
        &format!(
            "lr {}, {} steps, best epoch {}: task prompt updated {prompt_moved}, non-prompt tensors changed {changed_frozen:?}, {secs:.1}s",
            cfg.learning_rate(),
            out.log.len(),
            out.best_epoch
        ),
    );
}

// ---------------------------------------------------------------- 5, 6, 7, 9

const SEEDS: [u64; 3] = [0, 1, 2];
const MODES: [RunMode; 3] = [RunMode::Direct, RunMode::PromptCombo, RunMode::Contrastive];

#[derive(Clone, Copy, Debug)]
struct Outcome {
    val_token_f1: f64,
    concept_f1: f64,
    language_mix_rate: f64,
    ignore_task_rate: f64,
}

struct Rich {
    cfg: RunConfig,
    corpus: ToyCorpus,
    runs: BTreeMap<(&'static str, u64), Outcome>,
    seconds: f64,
}

impl Rich {
    fn medians(&self, mode: RunMode) -> Outcome {
        let of = |f: fn(&Outcome) -> f64| median(&SEEDS.map(|s| f(&self.runs[&(mode.name(), s)])));
        Outcome {
            val_token_f1: of(|o| o.val_token_f1),
            concept_f1: of(|o| o.concept_f1),
            language_mix_rate: of(|o| o.language_mix_rate),
            ignore_task_rate: of(|o| o.ignore_task_rate),
        }
    }
}

fn run_one(cfg: &RunConfig, corpus: &ToyCorpus, seed: u64, init: Seq2Seq) -> Outcome {
    let out = train_seed(cfg, corpus, seed, init, |_| {}).unwrap();
    let report = evaluate_model(cfg, corpus, &out.best, &cross_pairs(&corpus.vocab)).unwrap();
    Outcome {
        val_token_f1: out.best_val_token_f1,
        concept_f1: cross_mean(&report.results, "concept_f1"),
        language_mix_rate: cross_mean(&report.results, "language_mix_rate"),
        ignore_task_rate: cross_mean(&report.results, "ignore_task_rate"),
    }
}

fn rich() -> &'static Rich {
    static RICH: OnceLock<Rich> = OnceLock::new();
    RICH.get_or_init(|| {
        let start = Instant::now();
        let cfg = RunConfig::default();
        let corpus = generate_corpus(&cfg.corpus_config(), cfg.corpus_seed).unwrap();
        let mut runs = BTreeMap::new();
        for seed in SEEDS {
            let (init, _) = pretrained_model(&cfg, &corpus, seed, None).unwrap();
            for mode in MODES {
                let c = RunConfig { mode, ..cfg.clone() };
                let o = run_one(&c, &corpus, seed, init.clone());
                let _ = writeln!(std::io::stderr(), "  rich {} seed {seed}: {o:?}", mode.name());
                runs.insert((mode.name(), seed), o);
            }
        }
        Rich {
            cfg,
            corpus,
            runs,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_05_monolingual_sanity() {
    let r = rich();
    let worst = r
        .runs
        .iter()
        .map(|(k, o)| (o.val_token_f1, *k))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    verdict(
        5,
        worst.0 >= 0.90 && r.seconds < 1800.0 && r.cfg.epochs <= 10,
        &format!(
            "lowest validation token F1 {:.4} ({} seed {}) over 3 modes x 3 seeds, {} epochs, {:.0}s total",
            worst.0, worst.1 .0, worst.1 .1, r.cfg.epochs, r.seconds
        ),
    );
}

#[test]
fn criterion_06_error_rates() {
    let r = rich();
    let (d, p, c) = (
        r.medians(RunMode::Direct),
        r.medians(RunMode::PromptCombo),
        r.medians(RunMode::Contrastive),
    );
    let pass = c.language_mix_rate <= p.language_mix_rate
        && p.ignore_task_rate <= d.ignore_task_rate
        && c.language_mix_rate <= 0.5 * d.language_mix_rate;
    verdict(
        6,
        pass,
        &format!(
            "median cross language-mix direct {:.4} prompt-combo {:.4} contrastive {:.4}; ignore-task direct {:.4} prompt-combo {:.4}",
            d.language_mix_rate, p.language_mix_rate, c.language_mix_rate, d.ignore_task_rate, p.ignore_task_rate
        ),
    );
}

#[test]
fn criterion_07_concept_f1_ordering() {
    let r = rich();
    let (d, p, c) = (
        r.medians(RunMode::Direct),
        r.medians(RunMode::PromptCombo),
        r.medians(RunMode::Contrastive),
    );
    let pass = c.concept_f1 >= p.concept_f1 && p.concept_f1 >= d.concept_f1 && c.concept_f1 - d.concept_f1 >= 0.02;
    verdict(
        7,
        pass,
        &format!(
            "median cross concept F1 direct {:.4} prompt-combo {:.4} contrastive {:.4}",
            d.concept_f1, p.concept_f1, c.concept_f1
        ),
    );
}

#[test]
fn criterion_09_translation_ability() {
    let r = rich();
    let cfg = RunConfig {
        mode: RunMode::Contrastive,
        ..r.cfg.clone()
    };
    let scratch: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| {
            let init = Seq2Seq::new(cfg.model_config(&r.corpus), seed).unwrap();
            let o = run_one(&cfg, &r.corpus, seed, init);
            let _ = writeln!(
                std::io::stderr(),
                "  rich contrastive without pretraining seed {seed}: {o:?}"
            );
            o.concept_f1
        })
        .collect();
    let pretrained = r.medians(RunMode::Contrastive).concept_f1;
    let without = median(&scratch);
    verdict(
        9,
        without < pretrained,
        &format!("median cross concept F1 pretrained {pretrained:.4}, without pretraining {without:.4}"),
    );
}

// ---------------------------------------------------------------- 8, 10

fn xldg(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_xldg"))
        .args(args)
        .env_remove("XLDG_RUN_DIR")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "xldg {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const LAMBDAS: [&str; 5] = ["0", "0.1", "0.2", "0.5", "1"];

#[test]
fn criterion_08_ablation_shape() {
    let start = Instant::now();
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    xldg(&[
        "gen-data",
        "--langs",
        "3",
        "--concepts",
        "60",
        "--preset",
        "low",
        "--seed",
        "11",
        "-o",
        p(&data),
    ]);
    let root = t.path().join("runs");
    let table = xldg(&[
        "ablate",
        "--data",
        p(&data),
        "--root",
        p(&root),
        "--lambdas",
        &LAMBDAS.join(","),
        "--seeds",
        "0,1,2",
        "--lr",
        "5e-3",
        "--epochs",
        "25",
        "--pretrain-steps",
        "3000",
        "--set",
        "d_model=32",
        "--set",
        "ffn_dim=64",
        "--set",
        "task_tokens=4",
        "--set",
        "val_limit=30",
        "--set",
        "eval_limit=100",
    ]);
    let grid = root.join("ablate");
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mut shape_ok = rows.len() == 15;
    let mut med: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in &rows {
        shape_ok &= r.len() == 2 + 4 + 4;
        med.insert((r[0].to_string(), r[1].to_string()), r[5].parse().unwrap());
    }
    for pool in ["attention", "mean", "max"] {
        for l in LAMBDAS {
            shape_ok &= med.contains_key(&(pool.to_string(), l.to_string()));
        }
    }

    // λ=0: the contrastive term is inert, so the pooling choice cannot matter
    // and every logged objective is the MLE loss. l_c itself is still logged
    // and does depend on pooling.
    let without_l_c = |log: &str| -> Vec<String> {
        log.lines()
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| *i != 3)
                    .map(|(_, f)| f)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect()
    };
    let mut zero_ok = true;
    let mut one_ok = true;
    for seed in 0..3 {
        let cell = |pool: &str, l: &str, f: &str| {
            fs::read_to_string(grid.join(format!("{pool}_{l}/seed_{seed}/{f}"))).unwrap()
        };
        let reference = cell("attention", "0", "results.csv");
        for pool in ["mean", "max"] {
            zero_ok &= cell(pool, "0", "results.csv") == reference
                && without_l_c(&cell(pool, "0", "train_log.csv"))
                    == without_l_c(&cell("attention", "0", "train_log.csv"));
        }
        for pool in ["attention", "mean", "max"] {
            for line in cell(pool, "0", "train_log.csv").lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                zero_ok &= f[4] == f[2];
            }
            for line in cell(pool, "1", "train_log.csv").lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                one_ok &= f[4] == f[3];
            }
        }
    }

    // Each λ is summarised by the median over every (pooling, seed) cell.
    let mut per_lambda: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        per_lambda
            .entry(LAMBDAS.iter().find(|l| **l == r[1]).unwrap())
            .or_default()
            .extend(r[2..5].iter().map(|v| v.parse::<f64>().unwrap()));
    }
    let lambda_medians: Vec<(f64, &str)> = LAMBDAS.iter().map(|l| (median(&per_lambda[l]), *l)).collect();
    let best = lambda_medians
        .iter()
        .cloned()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    let half = median(&per_lambda["0.5"]);
    let per_pooling: Vec<String> = ["attention", "mean", "max"]
        .iter()
        .map(|pool| {
            let (v, l) = LAMBDAS
                .iter()
                .map(|l| (med[&(pool.to_string(), l.to_string())], *l))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            format!("{pool} best λ={l} {v:.4}")
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        shape_ok && zero_ok && one_ok && half < best.0,
        &format!(
            "15-row grid {shape_ok}, λ=0 rows pooling-invariant with l_final == l_mle {zero_ok}, λ=1 l_final == l_c {one_ok}; grid median concept F1 by λ {}; λ=0.5 {half:.4} vs best λ={} {:.4} ({}); {secs:.0}s",
            lambda_medians.iter().map(|(v, l)| format!("{l}:{v:.4}")).collect::<Vec<_>>().join(" "),
            best.1,
            best.0,
            per_pooling.join(", ")
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    xldg(&[
        "gen-data",
        "--langs",
        "3",
        "--concepts",
        "50",
        "--preset",
        "low",
        "--seed",
        "5",
        "-o",
        p(&data),
    ]);
    let cfg = t.path().join("run.cfg");
    fs::write(
        &cfg,
        "d_model = 16\nn_heads = 2\nffn_dim = 32\ntask_tokens = 3\nepochs = 2\npretrain_steps = 40\nseeds = 0,1\nval_limit = 8\neval_limit = 8\n",
    )
    .unwrap();
    let mut files = Vec::new();
    for root in ["a", "b"] {
        let root = t.path().join(root);
        for mode in ["direct", "contrastive"] {
            xldg(&[
                "train",
                "--data",
                p(&data),
                "--mode",
                mode,
                "--root",
                p(&root),
                "--config",
                p(&cfg),
            ]);
        }
        xldg(&[
            "eval",
            "--data",
            p(&data),
            p(&root.join("direct")),
            p(&root.join("contrastive")),
        ]);
        files.push(root);
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for rel in
        ["compare/compare.csv"]
            .into_iter()
            .map(String::from)
            .chain(["direct", "contrastive"].into_iter().flat_map(|m| {
                [0, 1].into_iter().flat_map(move |s| {
                    ["results.csv", "records.jsonl", "train_log.csv", "checkpoint.sha256"]
                        .map(|f| format!("{m}/seed_{s}/{f}"))
                })
            }))
    {
        let a = fs::read(files[0].join(&rel)).unwrap();
        let b = fs::read(files[1].join(&rel)).unwrap();
        compared += 1;
        if a != b || a.is_empty() {
            differing.push(rel);
        }
    }
    verdict(
        10,
        differing.is_empty(),
        &format!("{compared} metric and log files byte-equal across two invocations; differing {differing:?}"),
    );
}
