//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `BOWRANK_ACCEPTANCE=1,2,5` restricts the run to the listed criteria.
//! Criteria 8 and 9 share one experiment directory; 9 reuses the models
//! trained by 8.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bowrank::bm25::{analyze, build_index, Bm25Params};
use bowrank::cka::cka_linear;
use bowrank::cli::experiment::{analyze_cka, run_experiment, ExperimentResult, ExperimentSpec};
use bowrank::corpus::{generate_synthetic, Collection, Qrels, RelevanceRule, Run, SyntheticSpec};
use bowrank::eval::{evaluate, EvalOptions};
use bowrank::model::{load_model, save_model, ForwardOptions, Model, ModelConfig, PositionMode, Precision};
use bowrank::perturb::{self, PerturbMode};
use bowrank::tokenizer::{TokenizedPair, Vocab, CLS_ID, SEP_ID};
use bowrank::train::{accuracy, encode_triples, grad_check, train, Example, TrainConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Check = fn() -> Outcome;

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let criteria: [(&str, Duration, Check); 10] = [
        ("metric oracle equivalence", secs(10), c1_metrics),
        ("BM25 hand case and exhaustive oracle", secs(10), c2_bm25),
        ("CKA invariances", secs(30), c3_cka),
        ("gradient check", secs(60), c4_gradcheck),
        ("structural bag-of-words invariance", secs(60), c5_bow_invariance),
        ("perturbation contracts", secs(30), c6_perturbation),
        ("position information on the bigram task", secs(300), c7_bigram),
        ("condition matrix directions", secs(900), c8_matrix),
        ("CKA directions", secs(300), c9_cka_directions),
        ("round trips and determinism", secs(600), c10_round_trips),
    ];
    let only: Option<Vec<usize>> = std::env::var("BOWRANK_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());

    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let passed = result.passed && in_time;
        if !passed {
            failures += 1;
        }
        println!(
            "criterion {n:>2} {}: {name}: {} [{:.1}s / {}s{}]",
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------- 1

fn oracle_grade(judged: &BTreeMap<String, u32>, d: &str) -> u32 {
    *judged.get(d).unwrap_or(&0)
}

fn oracle_ndcg(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, d) in ranking.iter().enumerate().take(k) {
        dcg += oracle_grade(judged, d) as f64 / (2.0 + i as f64).log2();
    }
    // ideal: repeatedly pick the largest remaining grade
    let mut pool: Vec<u32> = judged.values().copied().collect();
    let mut idcg = 0.0;
    for i in 0..k.min(pool.len()) {
        let (at, &g) = pool.iter().enumerate().max_by_key(|(_, g)| **g).unwrap();
        idcg += g as f64 / (2.0 + i as f64).log2();
        pool.remove(at);
    }
    dcg / idcg
}

fn oracle_ap(ranking: &[String], judged: &BTreeMap<String, u32>) -> f64 {
    let rel = |d: &String| oracle_grade(judged, d) >= 1;
    let total = judged.values().filter(|&&g| g >= 1).count() as f64;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if rel(d) {
            let prefix = ranking[..=i].iter().filter(|x| rel(x)).count() as f64;
            sum += prefix / (i + 1) as f64;
        }
    }
    sum / total
}

fn oracle_recall(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let relevant: Vec<&String> = judged.iter().filter(|(_, &g)| g >= 1).map(|(d, _)| d).collect();
    let found = relevant.iter().filter(|d| ranking.iter().take(k).any(|r| r == **d)).count();
    found as f64 / relevant.len() as f64
}

fn oracle_rr(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    for (i, d) in ranking.iter().enumerate().take(k) {
        if oracle_grade(judged, d) >= 1 {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

fn c1_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = EvalOptions::default();
    let mut worst = 0.0f64;
    let mut n_queries = 0;
    for _ in 0..100 {
        let mut qrels = Qrels::new();
        let mut run = Run::new();
        let n_q = rng.random_range(1..6);
        for q in 0..n_q {
            let qid = format!("q{q}");
            let n_docs = rng.random_range(5..150);
            for d in 0..n_docs {
                if rng.random_bool(0.3) {
                    qrels.insert(&qid, format!("d{d}"), rng.random_range(0..4)).unwrap();
                }
            }
            if rng.random_bool(0.9) {
                let mut docs: Vec<usize> = (0..n_docs).collect();
                docs.shuffle(&mut rng);
                docs.truncate(rng.random_range(1..=n_docs));
                let scored = docs
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (format!("d{d}"), -(i as f64)))
                    .collect();
                run.insert_scored(&qid, scored, "r").unwrap();
            }
        }
        let report = evaluate(&run, &qrels, &opts).unwrap();
        for (qid, judged) in qrels.queries() {
            if !judged.values().any(|&g| g >= 1) {
                if report.per_query.contains_key(qid) {
                    return outcome(false, format!("{qid} has no relevant document but was scored"));
                }
                continue;
            }
            let ranking: Vec<String> = run
                .query(qid)
                .map(|r| r.iter().map(|e| e.doc_id.clone()).collect())
                .unwrap_or_default();
            let got = report.per_query[qid];
            let want = [
                oracle_ndcg(&ranking, judged, 10),
                oracle_ap(&ranking, judged),
                oracle_recall(&ranking, judged, 100),
                oracle_rr(&ranking, judged, 10),
            ];
            for (g, w) in [got.ndcg, got.map, got.recall, got.mrr].iter().zip(want) {
                worst = worst.max((g - w).abs());
            }
            n_queries += 1;
        }
    }

    let mut qrels = Qrels::new();
    qrels.insert("q", "a", 1).unwrap();
    let mut run = Run::new();
    run.insert_scored("q", vec![("x".into(), 2.0), ("a".into(), 1.0)], "r").unwrap();
    let ndcg = evaluate(&run, &qrels, &opts).unwrap().mean.ndcg;

    let mut qrels = Qrels::new();
    qrels.insert("q", "a", 1).unwrap();
    qrels.insert("q", "c", 1).unwrap();
    let mut run = Run::new();
    run.insert_scored("q", vec![("a".into(), 3.0), ("b".into(), 2.0), ("c".into(), 1.0)], "r")
        .unwrap();
    let ap = evaluate(&run, &qrels, &opts).unwrap().mean.map;

    let passed = worst <= 1e-12 && (ndcg - 0.63093).abs() <= 1e-5 && (ap - 0.83333).abs() <= 1e-5;
    // the hand values are given to five decimals; check the exact forms too
    let exact = (ndcg - 1.0 / 3f64.log2()).abs() <= 1e-9 && (ap - 5.0 / 6.0).abs() <= 1e-9;
    outcome(
        passed && exact,
        format!("{n_queries} queries, max |diff| {worst:.1e}; hand NDCG@10 {ndcg:.5}, AP {ap:.5}"),
    )
}

// ---------------------------------------------------------------- 2

fn oracle_bm25(docs: &[(String, String)], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs
        .iter()
        .map(|(_, t)| {
            t.to_lowercase()
                .split(|c: char| !c.is_alphanumeric())
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
        .collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let q: Vec<String> = query
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let mut out = Vec::new();
    for (i, (id, _)) in docs.iter().enumerate() {
        let mut score = 0.0;
        let mut hit = false;
        for t in &q {
            let tf = toks[i].iter().filter(|x| *x == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            hit = true;
            let df = toks.iter().filter(|d| d.contains(t)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let dl = toks[i].len() as f64;
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        if hit {
            out.push((id.clone(), score));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn c2_bm25() -> Outcome {
    // hand case: d1 = "a b a" (3), d2 = "b c" (2), d3 = "a c c c" (4); avgdl 3
    let mut c = Collection::new();
    c.insert("d1", "a b a").unwrap();
    c.insert("d2", "b c").unwrap();
    c.insert("d3", "a c c c").unwrap();
    let idx = build_index(&c).unwrap();
    let p = Bm25Params::default();
    let idf2 = (1.0f64 + 1.5 / 2.5).ln(); // df = 2 of N = 3
    let w = |tf: f64, dl: f64| tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * dl / 3.0));
    let hand = [
        ("d3", idf2 * w(1.0, 4.0) + idf2 * w(3.0, 4.0)),
        ("d1", idf2 * w(2.0, 3.0)),
        ("d2", idf2 * w(1.0, 2.0)),
    ];
    let got = idx.retrieve("a c", 3, &p);
    let mut hand_ok = got.len() == 3;
    for ((gid, gs), (hid, hs)) in got.iter().zip(hand) {
        hand_ok &= gid == hid && (gs - hs).abs() <= 1e-9;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut order_ok = true;
    for _ in 0..50 {
        let vocab = rng.random_range(3..30);
        let n_docs = rng.random_range(1..60);
        let docs: Vec<(String, String)> = (0..n_docs)
            .map(|i| {
                let len = rng.random_range(1..25);
                let text: Vec<String> = (0..len).map(|_| format!("t{}", rng.random_range(0..vocab))).collect();
                (format!("doc{:03}", i), text.join(" "))
            })
            .collect();
        let mut c = Collection::new();
        for (id, t) in &docs {
            c.insert(id, t).unwrap();
        }
        let idx = build_index(&c).unwrap();
        let mut sorted_docs = docs.clone();
        sorted_docs.sort();
        for _ in 0..5 {
            let qlen = rng.random_range(1..6);
            let query: Vec<String> = (0..qlen).map(|_| format!("t{}", rng.random_range(0..vocab + 3))).collect();
            let query = query.join(" ");
            let want = oracle_bm25(&sorted_docs, &query, 1.2, 0.75);
            let got = idx.retrieve(&query, n_docs, &p);
            if got.len() != want.len() {
                order_ok = false;
                continue;
            }
            for ((gid, gs), (wid, ws)) in got.iter().zip(&want) {
                order_ok &= gid == wid;
                worst = worst.max((gs - ws).abs());
            }
        }
    }
    let analyzer_ok = analyze("Hello, World-42") == ["hello", "world", "42"];
    outcome(
        hand_ok && order_ok && analyzer_ok && worst <= 1e-9,
        format!("hand case {}, 250 exhaustive queries: order {}, max |diff| {worst:.1e}",
            if hand_ok { "ok" } else { "MISMATCH" },
            if order_ok { "identical" } else { "DIFFERS" }),
    )
}

// ---------------------------------------------------------------- 3

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| normal(rng))
}

/// Gram-Schmidt on a random Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut q = random_matrix(rng, d, d);
    for j in 0..d {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let ci = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

/// HSIC form with explicit centering matrices.
fn oracle_cka(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let h = Array2::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i == j)) - 1.0 / n as f64);
    let k = h.dot(&x.dot(&x.t())).dot(&h);
    let l = h.dot(&y.dot(&y.t())).dot(&h);
    let hsic = |a: &Array2<f64>, b: &Array2<f64>| (a * b).sum();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

fn c3_cka() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut id_err, mut sym_err, mut inv_err, mut oracle_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for trial in 0..10_000 {
        let n = rng.random_range(4..24);
        let dx = rng.random_range(1..8);
        let dy = rng.random_range(1..8);
        let x = random_matrix(&mut rng, n, dx);
        // half the trials share structure so values span the whole range
        let y = if trial % 2 == 0 {
            random_matrix(&mut rng, n, dy)
        } else {
            let m = random_matrix(&mut rng, dx, dy);
            x.dot(&m) + random_matrix(&mut rng, n, dy).mapv(|v| 0.1 * v)
        };
        let v = cka_linear(x.view(), y.view()).unwrap();
        lo = lo.min(v);
        hi = hi.max(v);
        id_err = id_err.max((cka_linear(x.view(), x.view()).unwrap() - 1.0).abs());
        sym_err = sym_err.max((cka_linear(y.view(), x.view()).unwrap() - v).abs());
        let q = random_orthogonal(&mut rng, dx);
        let s = rng.random_range(0.1..10.0);
        let xt = x.dot(&q).mapv(|a| a * s);
        inv_err = inv_err.max((cka_linear(xt.view(), y.view()).unwrap() - v).abs());
        if trial % 10 == 0 {
            oracle_err = oracle_err.max((oracle_cka(&x, &y) - v).abs());
        }
    }
    let passed = id_err <= 1e-9 && sym_err <= 1e-12 && inv_err <= 1e-7 && lo >= 0.0 && hi <= 1.0 + 1e-9 && oracle_err <= 1e-9;
    outcome(
        passed,
        format!(
            "10^4 pairs: identity {id_err:.1e}, symmetry {sym_err:.1e}, invariance {inv_err:.1e}, range [{lo:.4}, {hi:.6}], vs HSIC form {oracle_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn f64_config(mode: PositionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 200,
        max_len: 32,
        dropout: 0.0,
        position_mode: mode,
        precision: Precision::F64,
        ..ModelConfig::default()
    }
}

fn random_pair(rng: &mut ChaCha8Rng, vocab: u32, max_total: usize) -> TokenizedPair {
    let q_len = rng.random_range(1..6);
    let p_len = rng.random_range(1..max_total - q_len - 3 + 1);
    let q: Vec<u32> = (0..q_len).map(|_| rng.random_range(4..vocab)).collect();
    let p: Vec<u32> = (0..p_len).map(|_| rng.random_range(4..vocab)).collect();
    TokenizedPair::from_parts(&q, &p)
}

fn c4_gradcheck() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (i, mode) in [PositionMode::Learned, PositionMode::None].into_iter().enumerate() {
        for scale in [1.0, 3.0] {
            let mut model = Model::<f64>::init(f64_config(mode), 40 + i as u64).unwrap();
            // larger weights give non-trivial attention patterns and logits;
            // much larger ones saturate the loss below finite-difference noise
            for p in model.params_mut() {
                *p *= scale;
            }
            for label in [true, false] {
                let pair = random_pair(&mut rng, 200, 24);
                let r = grad_check(&model, &pair, label, 1e-5, 200, rng.random()).unwrap();
                worst = worst.max(r.max_rel_error);
                coords += r.n_coords;
            }
        }
    }
    outcome(worst < 1e-4, format!("{coords} coordinates over 8 checks, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 5

fn permute_within_spans(pair: &TokenizedPair, rng: &mut ChaCha8Rng) -> TokenizedPair {
    let mut out = pair.clone();
    out.ids[pair.query_span.clone()].shuffle(rng);
    out.ids[pair.passage_span.clone()].shuffle(rng);
    out
}

fn c5_bow_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut learned_moves = 0.0f64;
    let mut n = 0;
    for m in 0..20 {
        let heads = [1, 2, 4][m % 3];
        let config = ModelConfig {
            n_layers: 1 + m % 3,
            n_heads: heads,
            hidden: 8 * heads,
            ff_dim: 16 + 8 * (m % 4),
            ..f64_config(PositionMode::None)
        };
        let mut model = Model::<f64>::init(config.clone(), 500 + m as u64).unwrap();
        for p in model.params_mut() {
            *p = 0.5 * normal(&mut rng);
        }
        let mut learned = Model::<f64>::init(
            ModelConfig {
                position_mode: PositionMode::Learned,
                ..config
            },
            500 + m as u64,
        )
        .unwrap();
        for p in learned.params_mut() {
            *p = 0.5 * normal(&mut rng);
        }
        let pair = random_pair(&mut rng, 200, 32).padded(32);
        let base = model.score(&pair).unwrap();
        let base_learned = learned.score(&pair).unwrap();
        for _ in 0..50 {
            let p = permute_within_spans(&pair, &mut rng);
            worst = worst.max((model.score(&p).unwrap() - base).abs());
            learned_moves = learned_moves.max((learned.score(&p).unwrap() - base_learned).abs());
            n += 1;
        }
    }
    outcome(
        worst <= 1e-6 && learned_moves > 1e-3,
        format!("{n} permutations over 20 models: max |score diff| {worst:.1e} (learned-position control moves by up to {learned_moves:.3})"),
    )
}

// ---------------------------------------------------------------- 6

fn c6_perturbation() -> Outcome {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    let mode = prop_oneof![
        Just(PerturbMode::Natural),
        Just(PerturbMode::SortDesc),
        any::<u64>().prop_map(|seed| PerturbMode::Shuffle { seed }),
    ];
    let strategy = (
        prop::collection::vec(4u32..2000, 0..20),
        prop::collection::vec(4u32..2000, 0..80),
        mode,
        "[a-z0-9:]{0,12}",
    );
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&strategy, |(q, p, mode, key)| {
        let pair = TokenizedPair::from_parts(&q, &p);
        let (out, source) = perturb::apply_with_permutation(&pair, mode, &key);
        // multiset per span
        for span in [pair.query_span.clone(), pair.passage_span.clone()] {
            let mut a = pair.ids[span.clone()].to_vec();
            let mut b = out.ids[span.clone()].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            for i in span.clone() {
                prop_assert!(span.contains(&source[i]));
                prop_assert_eq!(out.ids[i], pair.ids[source[i]]);
            }
        }
        // fixed specials and layout
        prop_assert_eq!(out.ids[0], CLS_ID);
        for s in pair.sep_positions {
            prop_assert_eq!(out.ids[s], SEP_ID);
        }
        prop_assert_eq!(&out.segments, &pair.segments);
        prop_assert_eq!(out.n_total, pair.n_total);
        // determinism
        prop_assert_eq!(&perturb::apply(&pair, mode, &key), &out);
        // sort is idempotent and descending
        let sorted = perturb::apply(&pair, PerturbMode::SortDesc, &key);
        prop_assert_eq!(&perturb::apply(&sorted, PerturbMode::SortDesc, &key), &sorted);
        for span in [sorted.query_span.clone(), sorted.passage_span.clone()] {
            prop_assert!(sorted.ids[span].windows(2).all(|w| w[0] >= w[1]));
        }
        if mode == PerturbMode::Natural {
            prop_assert_eq!(&out, &pair);
        }
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, "10^4 generated cases: multiset, specials, segments, determinism, sort idempotence"),
        Err(e) => outcome(false, format!("{e}")),
    }
}

// ---------------------------------------------------------------- 7

/// Bigram task: relevant and non-relevant passages hold the same bag of
/// words and differ only in the order of two marker terms.
fn bigram_data() -> (Vec<[Example; 2]>, Vec<Example>, ModelConfig) {
    let spec = SyntheticSpec {
        vocab_size: 300,
        n_docs: 40_000,
        n_queries: 4000,
        doc_len_range: (11, 16),
        relevance_rule: RelevanceRule::BigramOrder,
        // only the targeted negative shares the positive's bag-of-words
        // distribution
        negatives_per_positive: 1,
        seed: 13,
        ..SyntheticSpec::default()
    };
    let s = generate_synthetic(&spec).unwrap();
    let texts = s.collection.iter().map(|(_, t)| t).chain(s.queries.iter().map(|(_, t)| t));
    let vocab = Vocab::build(texts, 600).unwrap();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        max_len: 40,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    // the last tenth of the queries is held out
    let cut = format!("q{:05}", spec.n_queries * 9 / 10);
    let (mut train_t, mut test_t) = (Vec::new(), Vec::new());
    for (t, q) in s.triples.iter().zip(&s.triple_qids) {
        if *q < cut {
            train_t.push(t.clone());
        } else {
            test_t.push(t.clone());
        }
    }
    let train_x = encode_triples(&train_t, &vocab, config.max_len).unwrap();
    let test_x = encode_triples(&test_t, &vocab, config.max_len)
        .unwrap()
        .into_iter()
        .flatten()
        .collect();
    (train_x, test_x, config)
}

fn c7_bigram() -> Outcome {
    let (train_x, test_x, config) = bigram_data();
    let cfg = TrainConfig {
        batch_size: 32,
        lr_peak: 1e-3,
        warmup_steps: 200,
        total_steps: 4000,
        epoch_size: 1000,
        seed: 13,
        ..TrainConfig::default()
    };
    let mut acc = HashMap::new();
    for mode in [PositionMode::Learned, PositionMode::None] {
        let model = Model::<f32>::init(
            ModelConfig {
                position_mode: mode,
                ..config.clone()
            },
            13,
        )
        .unwrap();
        let (model, _) = train(model, &train_x, &cfg, None).unwrap();
        acc.insert(mode, accuracy(&model, &test_x, PerturbMode::Natural).unwrap());
    }
    let (l, n) = (acc[&PositionMode::Learned], acc[&PositionMode::None]);
    outcome(
        l >= 0.90 && n <= 0.60,
        format!("held-out accuracy: learned {l:.4} (>= 0.90), none {n:.4} (<= 0.60), {} test examples", test_x.len()),
    )
}

// ---------------------------------------------------------------- 8, 9

fn experiment_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = std::env::temp_dir().join(format!("bowrank-acceptance-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    })
}

fn matrix_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::with_seed(13);
    // CKA is criterion 9, timed separately on the same artifacts
    spec.cka.enabled = false;
    spec
}

static MATRIX: OnceLock<Option<ExperimentResult>> = OnceLock::new();

fn c8_matrix() -> Outcome {
    let result = MATRIX.get_or_init(|| match run_experiment(&matrix_spec(), experiment_dir()) {
        Ok(r) => Some(r),
        Err(e) => {
            println!("experiment failed: {e}");
            None
        }
    });
    let Some(r) = result else {
        return outcome(false, "experiment failed");
    };
    let ndcg = |pos: PositionMode, tr: PerturbMode, ev: PerturbMode| {
        let c = bowrank::cli::experiment::Condition::new(pos, tr, ev);
        r.metrics(&c).map(|m| m.ndcg).unwrap_or(f64::NAN)
    };
    use PerturbMode::{Natural, SortDesc};
    let sh = PerturbMode::Shuffle { seed: 13 };
    let l = PositionMode::Learned;
    let base = ndcg(l, Natural, Natural);
    let none = ndcg(PositionMode::None, Natural, Natural);
    let nat_sh = ndcg(l, Natural, sh);
    let sh_sh = ndcg(l, sh, sh);
    let so_so = ndcg(l, SortDesc, SortDesc);
    let so_nat = ndcg(l, SortDesc, Natural);
    let a = (none - base).abs() <= 0.05;
    let b = base - nat_sh >= 0.10;
    let c = (sh_sh - base).abs() <= 0.05 && (so_so - base).abs() <= 0.05;
    let d = (so_nat - so_so).abs() <= 0.05;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        a && b && c && d,
        format!(
            "baseline {base:.4}; (a) none {none:.4} {}; (b) natural->shuffle {nat_sh:.4} drop {:.4} {}; (c) shuffle/shuffle {sh_sh:.4}, sort/sort {so_so:.4} {}; (d) sort->natural {so_nat:.4} {}",
            mark(a),
            base - nat_sh,
            mark(b),
            mark(c),
            mark(d)
        ),
    )
}

fn c9_cka_directions() -> Outcome {
    if !matches!(MATRIX.get(), Some(Some(_))) {
        return outcome(false, "needs the artifacts of criterion 8");
    }
    let (cls, layerwise) = match analyze_cka(&matrix_spec(), experiment_dir()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("analysis failed: {e}")),
    };
    let get = |name: &str| cls.iter().find(|c| c.model == name).and_then(|c| c.natural_vs_shuffle);
    let shuffle_trained = get("learned-shuffle13").unwrap_or(f64::NAN);
    let natural_trained = get("learned-natural").unwrap_or(f64::NAN);
    let Some((_, _, sort_layers)) = layerwise.iter().find(|(_, b, _)| b == "learned-sort") else {
        return outcome(false, "no layerwise comparison with the sort-trained model");
    };
    let means: Vec<f64> = sort_layers.layers.iter().map(|l| l.mean.unwrap_or(f64::NAN)).collect();
    let last = *means.last().unwrap();
    let early = means[..means.len() - 1].iter().all(|&m| m > last);
    let a = shuffle_trained > 0.95;
    let b = shuffle_trained > natural_trained;
    outcome(
        a && b && early,
        format!(
            "CLS natural-vs-shuffle: shuffle-trained {shuffle_trained:.4} (> 0.95 {}), natural-trained {natural_trained:.4} (lower {}); baseline-vs-sort by layer {:?} (early > final {})",
            a,
            b,
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>(),
            early
        ),
    )
}

// ---------------------------------------------------------------- 10

fn c10_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;

    // checkpoint: trained f32 model, logits bit-identical after reload
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let config = ModelConfig {
        vocab_size: 100,
        max_len: 24,
        ..ModelConfig::default()
    };
    let data: Vec<[Example; 2]> = (0..32)
        .map(|_| {
            let a = random_pair(&mut rng, 100, 20);
            let b = random_pair(&mut rng, 100, 20);
            [Example { pair: a, label: true }, Example { pair: b, label: false }]
        })
        .collect();
    let cfg = TrainConfig {
        total_steps: 30,
        warmup_steps: 5,
        epoch_size: 10,
        ..TrainConfig::default()
    };
    let (model, _) = train(Model::<f32>::init(config, 10).unwrap(), &data, &cfg, None).unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&model, &path).unwrap();
    let back = load_model::<f32>(&path).unwrap();
    let batch: Vec<TokenizedPair> = data.iter().flatten().map(|e| e.pair.clone()).collect();
    let bits = |m: &Model<f32>| -> Vec<u64> {
        m.forward(&batch, ForwardOptions::default())
            .unwrap()
            .iter()
            .flat_map(|o| o.logits.map(f64::to_bits))
            .collect()
    };
    let ckpt_ok = bits(&model) == bits(&back) && model.params() == back.params();
    ok &= ckpt_ok;
    notes.push(format!("checkpoint {}", if ckpt_ok { "bit-exact" } else { "DIFFERS" }));

    // run and qrels files
    let mut run = Run::new();
    let mut qrels = Qrels::new();
    for q in 0..20 {
        let qid = format!("q{q}");
        let scored = (0..rng.random_range(1..50))
            .map(|d| (format!("d{d}"), (normal(&mut rng) * 1e3).round() / 1e3))
            .collect();
        run.insert_scored(&qid, scored, "tag").unwrap();
        for d in 0..rng.random_range(1..10) {
            qrels.insert(&qid, format!("d{d}"), rng.random_range(0..4)).unwrap();
        }
    }
    let run_text = run.to_trec();
    let run_back = Run::parse(&run_text, "run").unwrap();
    let qrels_back = Qrels::parse(&qrels.to_trec(), "qrels").unwrap();
    let files_ok = run_back == run && run_back.to_trec() == run_text && qrels_back == qrels;
    ok &= files_ok;
    notes.push(format!("run/qrels {}", if files_ok { "exact" } else { "DIFFER" }));

    // end-to-end rerun on a reduced experiment
    let mut spec = ExperimentSpec::with_seed(13);
    spec.data.synthetic.n_docs = 1500;
    spec.data.synthetic.n_queries = 150;
    spec.data.dev_queries = 20;
    spec.data.test_queries = 20;
    spec.train.total_steps = 200;
    spec.train.warmup_steps = 20;
    spec.train.epoch_size = 100;
    spec.cka.docs_per_query = 4;
    let a = run_experiment(&spec, &dir.path().join("a")).unwrap();
    let b = run_experiment(&spec, &dir.path().join("b")).unwrap();
    let read = |d: &str| std::fs::read(dir.path().join(d).join("summary.tsv")).unwrap();
    let summary_ok = read("a") == read("b") && a.summary == b.summary && a.rows.len() == 8;
    // resume: dropping one condition's metrics recomputes exactly that one
    let victim = spec.conditions[1].name();
    std::fs::remove_file(dir.path().join("a/metrics").join(format!("{victim}.tsv"))).unwrap();
    let c = run_experiment(&spec, &dir.path().join("a")).unwrap();
    let recomputed: Vec<String> = c.rows.iter().filter(|r| r.recomputed).map(|r| r.condition.name()).collect();
    let resume_ok = recomputed == [victim] && c.trained.is_empty() && read("a") == read("b");
    ok &= summary_ok && resume_ok;
    notes.push(format!(
        "rerun summary {}, resume recomputed {:?}",
        if summary_ok { "byte-identical" } else { "DIFFERS" },
        recomputed
    ));

    outcome(ok, notes.join("; "))
}
