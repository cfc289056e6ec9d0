//! Acceptance suite. Every test prints exactly one `criterion N: PASS|FAIL` line
//! straight to stdout (bypassing capture) and then asserts the same condition.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use linklab::alias::AliasTable;
use linklab::encoder::{dot, EmbeddingMatrix, EncoderParams};
use linklab::eval::{recall_at_k, EvalReport, EvalSet, KbMode};
use linklab::index::{IndexConfig, SearchIndex};
use linklab::similarity::{indel_distance, link_by_similarity};
use linklab::tokenizer::TokenBlock;
use linklab::toyland::{generate, Toyland, ToylandConfig};
use linklab::trainer::{batch_loss, batch_loss_and_grad, scaled_softmax_xent, TrainConfig, TrainingBatch};
use linklab::Qid;
use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Criterion 1.
const SOFTMAX_LOOSE: f64 = 0.05;
const SOFTMAX_TIGHT: f64 = 0.01;
// Criterion 2.
const UNIFORM_LOSS_TOL: f64 = 1e-6;
// Criterion 3.
const GRAD_INSTANCES: usize = 50;
const GRAD_STEP: f64 = 1e-6;
const GRAD_MAX_REL: f64 = 1e-4;
/// Denominator floor so gradients that are zero on both sides compare as equal.
const GRAD_REL_FLOOR: f64 = 1e-6;
// Criterion 4.
const SEARCH_QUERIES: usize = 100;
const SEARCH_ROWS: usize = 1000;
const SEARCH_DIM: usize = 32;
const SEARCH_K: usize = 50;
const SEARCH_PARTITIONS: usize = 16;
// Criterion 5.
const INDEL_PAIRS: usize = 10_000;
const INDEL_MAX_LEN: usize = 30;
// Criterion 6.
const ABLATION_ROUNDS: usize = 2;
const ABLATION_STEPS: usize = 2000;
const WEAK_MULTIPLIER: f64 = 1.0;
const WEAK_MAX_R1: f64 = 0.2;
const STRONG_MULTIPLIER: f64 = 50.0;
const STRONG_MIN_R1: f64 = 0.8;
// Criterion 7.
const SHAPE_ROUNDS: usize = 4;
const SHAPE_STEPS: usize = 2000;
const SHAPE_FIRST_GAIN: f64 = 0.3;
const SHAPE_BAND: f64 = 0.02;
// Criterion 8.
const ALIAS_K: usize = 10;
// Criterion 9.
const DETERMINISM_STEPS: usize = 200;
// Criterion 10.
const PROPERTY_CASES: u32 = 1000;

/// Learning rate for the toyland runs; the encoder starts from random embeddings
/// rather than a pretrained model, so the default of 1e-5 barely moves it.
const TOYLAND_LR: f64 = 1e-3;
const TOYLAND_BATCH: usize = 16;
const TOYLAND_NEG: usize = 7;
const TOYLAND_SEED: u64 = 2024;

fn report(n: u32, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n}: {verdict} ({detail}; {:.1}s)\n", elapsed.as_secs_f64());
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= target * rel
}

#[test]
fn criterion_01_scaled_softmax_examples() {
    let start = Instant::now();
    let row = |gold: f64, other: f64| {
        let mut v = vec![other; 512];
        v[0] = gold;
        v
    };
    let (_, p1) = scaled_softmax_xent(&row(0.99, -0.99), 0, 1.0).unwrap();
    let (_, p2) = scaled_softmax_xent(&row(0.2, -0.2), 0, 1.0).unwrap();
    let (_, p3) = scaled_softmax_xent(&row(0.2, -0.2), 0, 10.0).unwrap();
    let elapsed = start.elapsed();
    let pass = within(p1[0], 0.014, SOFTMAX_LOOSE)
        && within(p1[1], 0.0019, SOFTMAX_LOOSE)
        && within(p2[0], 0.0029, SOFTMAX_LOOSE)
        && within(p3[0], 0.0965, SOFTMAX_TIGHT)
        && elapsed < Duration::from_secs(1);
    let detail = format!(
        "gold {:.4}%, other {:.4}%; gold {:.4}%; gold {:.3}%",
        p1[0] * 100.0,
        p1[1] * 100.0,
        p2[0] * 100.0,
        p3[0] * 100.0
    );
    report(1, pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_02_uniform_loss_floor() {
    let start = Instant::now();
    let (b, neg, w) = (32, 7, 64);
    let params = EncoderParams::from_table(Array2::from_elem((1000, 32), 0.3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut block = |rows: usize| TokenBlock::from_flat(w, (0..rows * w).map(|_| rng.gen_range(0..1000)).collect()).unwrap();
    let batch = TrainingBatch {
        neg,
        mention_ids: block(b),
        entity_ids: block(b * (1 + neg)),
        gold_columns: (0..b).map(|i| (i * (1 + neg)) as u32).collect(),
    };
    let loss = batch_loss(&params, &batch, 50.0).unwrap();
    let elapsed = start.elapsed();
    let pass = (loss - 256f64.ln()).abs() < UNIFORM_LOSS_TOL && elapsed < Duration::from_secs(1);
    let detail = format!("loss {loss:.9} vs ln 256 = {:.9}", 256f64.ln());
    report(2, pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_03_gradient_oracle() {
    let start = Instant::now();
    let (v, d, b, neg, w) = (7usize, 4usize, 2usize, 1usize, 3usize);
    let a = 50.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut worst_entry: f64 = 0.0;
    for i in 0..GRAD_INSTANCES {
        let params = EncoderParams::init(v, d, i as u64).unwrap();
        let mut block =
            |rows: usize| TokenBlock::from_flat(w, (0..rows * w).map(|_| rng.gen_range(0..v as u32)).collect()).unwrap();
        let batch = TrainingBatch {
            neg,
            mention_ids: block(b),
            entity_ids: block(b * (1 + neg)),
            gold_columns: (0..b).map(|i| (i * (1 + neg)) as u32).collect(),
        };
        let (_, grad) = batch_loss_and_grad(&params, &batch, a).unwrap();
        let (mut diff, mut fd_norm, mut an_norm) = (0.0, 0.0, 0.0);
        for r in 0..v {
            for c in 0..d {
                let mut plus = params.clone();
                plus.table_mut()[[r, c]] += GRAD_STEP;
                let mut minus = params.clone();
                minus.table_mut()[[r, c]] -= GRAD_STEP;
                let fd = (batch_loss(&plus, &batch, a).unwrap() - batch_loss(&minus, &batch, a).unwrap())
                    / (2.0 * GRAD_STEP);
                let an = grad[[r, c]];
                diff += (fd - an) * (fd - an);
                fd_norm += fd * fd;
                an_norm += an * an;
                worst_entry = worst_entry.max((fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_REL_FLOOR));
            }
        }
        worst = worst.max(diff.sqrt() / fd_norm.sqrt().max(an_norm.sqrt()).max(GRAD_REL_FLOOR));
    }
    let elapsed = start.elapsed();
    let pass = worst < GRAD_MAX_REL && elapsed < Duration::from_secs(30);
    let detail = format!(
        "{GRAD_INSTANCES} instances, max whole-gradient relative error {worst:.2e}, worst single entry {worst_entry:.2e}"
    );
    report(3, pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_04_search_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut unit = |n: usize| {
        EmbeddingMatrix::normalized(Array2::from_shape_fn((n, SEARCH_DIM), |_| rng.gen_range(-1.0..1.0))).unwrap()
    };
    let data = unit(SEARCH_ROWS);
    let queries = unit(SEARCH_QUERIES);
    let qids: Vec<Qid> = (1..=SEARCH_ROWS as u64).map(|i| Qid::new(i).unwrap()).collect();
    let cfg = IndexConfig {
        partitions: SEARCH_PARTITIONS,
        default_probes: SEARCH_PARTITIONS,
        seed: 4,
    };
    let index = SearchIndex::build(data.clone(), qids, None, cfg).unwrap();
    let mut mismatches = 0;
    for i in 0..SEARCH_QUERIES {
        let q = queries.row(i);
        let mut oracle: Vec<(usize, f64)> = (0..SEARCH_ROWS)
            .map(|r| (r, data.row(r).iter().zip(q).map(|(x, y)| x * y).sum::<f64>()))
            .collect();
        oracle.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        oracle.truncate(SEARCH_K);
        let hits = index.search(q, SEARCH_K, None).unwrap();
        let same = hits.len() == oracle.len()
            && hits
                .iter()
                .zip(&oracle)
                .all(|(h, o)| h.row == o.0 && (h.score - dot(data.row(o.0), q)).abs() == 0.0);
        if !same {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(10);
    let detail = format!("{mismatches} of {SEARCH_QUERIES} hit lists differ from brute force");
    report(4, pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

fn dp_lcs(a: &[char], b: &[char]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(0..=INDEL_MAX_LEN);
    (0..len)
        .map(|_| loop {
            let c = match rng.gen_range(0..4) {
                0 => rng.gen_range(0x61..0x65),
                1 => rng.gen_range(0xC0..0x180),
                2 => rng.gen_range(0x3B1..0x3B6),
                _ => rng.gen_range(0x1F600..0x1F604),
            };
            if let Some(c) = char::from_u32(c) {
                break c;
            }
        })
        .collect()
}

#[test]
fn criterion_05_indel_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..INDEL_PAIRS {
        let (a, b) = (random_text(&mut rng), random_text(&mut rng));
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        if indel_distance(&a, &b) != ca.len() + cb.len() - 2 * dp_lcs(&ca, &cb) {
            mismatches += 1;
        }
    }
    let floor = indel_distance("floor", "flower");
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && floor == 3 && elapsed < Duration::from_secs(30);
    let detail = format!("{mismatches} of {INDEL_PAIRS} pairs differ; floor/flower = {floor}");
    report(5, pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

fn toyland() -> &'static Toyland {
    static CORPUS: OnceLock<Toyland> = OnceLock::new();
    CORPUS.get_or_init(|| generate(&ToylandConfig::default()).unwrap())
}

fn toyland_config(a: f64, rounds: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: TOYLAND_BATCH,
        neg: TOYLAND_NEG,
        logit_multiplier: a,
        lr: TOYLAND_LR,
        rounds,
        steps_round1: steps,
        steps_later: steps,
        seed: TOYLAND_SEED,
        ..TrainConfig::default()
    }
}

struct Trained {
    params: EncoderParams,
    reports: Vec<EvalReport>,
    elapsed: Duration,
}

fn finetune(cfg: &TrainConfig) -> Trained {
    let start = Instant::now();
    let t = toyland();
    let entities: Vec<_> = t.entities.iter().collect();
    let eval = EvalSet::prepare(&entities, &t.eval, None, KbMode::Descriptions, cfg.context_size, cfg.vocab()).unwrap();
    let (params, reports) = linklab::trainer::run_finetuning(&entities, &t.train, cfg, &eval, &[1, 10]).unwrap();
    Trained {
        params,
        reports,
        elapsed: start.elapsed(),
    }
}

fn strong_run() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| finetune(&toyland_config(STRONG_MULTIPLIER, ABLATION_ROUNDS, ABLATION_STEPS)))
}

fn r1_series(reports: &[EvalReport]) -> String {
    reports
        .iter()
        .map(|r| format!("{:.3}", r.recall(1).unwrap()))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn criterion_06_logit_multiplier_ablation() {
    let weak = finetune(&toyland_config(WEAK_MULTIPLIER, ABLATION_ROUNDS, ABLATION_STEPS));
    let strong = strong_run();
    let weak_r1 = weak.reports.last().unwrap().recall(1).unwrap();
    let strong_r1 = strong.reports.last().unwrap().recall(1).unwrap();
    let elapsed = weak.elapsed + strong.elapsed;
    let pass = weak_r1 < WEAK_MAX_R1 && strong_r1 >= STRONG_MIN_R1 && elapsed < Duration::from_secs(15 * 60);
    let detail = format!(
        "a={WEAK_MULTIPLIER} R@1 by round [{}], a={STRONG_MULTIPLIER} R@1 by round [{}]",
        r1_series(&weak.reports),
        r1_series(&strong.reports)
    );
    report(6, pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_07_rounds_shape() {
    let run = finetune(&toyland_config(STRONG_MULTIPLIER, SHAPE_ROUNDS, SHAPE_STEPS));
    let r1: Vec<f64> = run.reports.iter().map(|r| r.recall(1).unwrap()).collect();
    let pass = r1.len() == SHAPE_ROUNDS + 1
        && r1[1] > r1[0] + SHAPE_FIRST_GAIN
        && r1[4] >= r1[2] - SHAPE_BAND
        && run.elapsed < Duration::from_secs(30 * 60);
    let detail = format!("R@1 by round [{}]", r1_series(&run.reports));
    report(7, pass, &detail, run.elapsed);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_08_baseline_ordering() {
    let t = toyland();
    let trained = strong_run();
    let start = Instant::now();
    let table = AliasTable::build(t.train.iter().map(|m| (m.surface.as_str(), m.gold_qid)), ALIAS_K, true).unwrap();
    let inflected = t.inflected_eval();
    let golds = |ms: &[linklab::Mention]| ms.iter().map(|m| m.gold_qid).collect::<Vec<_>>();
    let alias_ranked = |ms: &[linklab::Mention]| ms.iter().map(|m| table.link(&m.surface)).collect::<Vec<_>>();
    let string_ranked: Vec<Vec<Qid>> = inflected
        .iter()
        .map(|m| link_by_similarity(&table, &m.surface, ALIAS_K).unwrap())
        .collect();
    let alias_inflected = recall_at_k(&alias_ranked(&inflected), &golds(&inflected), 1).unwrap();
    let string_inflected = recall_at_k(&string_ranked, &golds(&inflected), 1).unwrap();
    let alias_all = recall_at_k(&alias_ranked(&t.eval), &golds(&t.eval), 1).unwrap();
    let dense_all = trained.reports.last().unwrap().recall(1).unwrap();
    // Dense R@1 is recomputed from the final parameters to tie it to this run.
    let entities: Vec<_> = t.entities.iter().collect();
    let cfg = toyland_config(STRONG_MULTIPLIER, ABLATION_ROUNDS, ABLATION_STEPS);
    let eval = EvalSet::prepare(&entities, &t.eval, None, KbMode::Descriptions, cfg.context_size, cfg.vocab()).unwrap();
    let recomputed = eval
        .evaluate(&trained.params, &[1], IndexConfig::exact(0))
        .unwrap()
        .recall(1)
        .unwrap();
    let elapsed = start.elapsed();
    let pass = string_inflected - alias_inflected >= 0.0 && dense_all - alias_all >= 0.0 && recomputed == dense_all;
    let detail = format!(
        "inflected subset ({} mentions): string {string_inflected:.3} vs alias {alias_inflected:.3}; \
         overall: dense {dense_all:.3} vs alias {alias_all:.3}",
        inflected.len()
    );
    report(8, pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

fn cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_linklab"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("LINKLAB_DATA_DIR")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_once(dir: &Path) -> HashMap<String, Vec<u8>> {
    cli(dir, &["--seed", "11", "toyland", "--out", "toy"]);
    cli(dir, &[
        "ingest", "--kb", "toy/kb.jsonl", "--docs", "toy/train_docs.jsonl", "--language", "tl", "--out", "train",
    ]);
    cli(dir, &[
        "ingest", "--kb", "toy/kb.jsonl", "--docs", "toy/eval_docs.jsonl", "--language", "tl", "--out", "eval",
    ]);
    let steps = format!("steps_round1={DETERMINISM_STEPS}");
    let later = format!("steps_later={DETERMINISM_STEPS}");
    let lr = format!("lr={TOYLAND_LR}");
    let b = format!("batch_size={TOYLAND_BATCH}");
    cli(dir, &[
        "--seed", "11", "--set", &steps, "--set", &later, "--set", "rounds=2", "--set", &lr, "--set", &b, "train",
        "--entities", "train/entities.jsonl", "--train-mentions", "train/mentions.jsonl", "--eval-mentions",
        "eval/mentions.jsonl", "--ks", "1,10,100", "--out", "run",
    ]);
    let mut files = HashMap::new();
    for entry in fs::read_dir(dir.join("run")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".bin.gz") || name.ends_with(".tsv") {
            files.insert(name, fs::read(&path).unwrap());
        } else if name == "manifest.json" {
            let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
            let obj = m.as_object_mut().unwrap();
            obj.remove("started");
            obj.remove("finished");
            files.insert(name, serde_json::to_vec(&m).unwrap());
        }
    }
    files
}

#[test]
fn criterion_09_determinism() {
    let start = Instant::now();
    let (a, b) = (tempfile::TempDir::new().unwrap(), tempfile::TempDir::new().unwrap());
    let first = train_once(a.path());
    let second = train_once(b.path());
    let epochs = first.keys().filter(|k| k.ends_with(".bin.gz")).count();
    let reports = first.keys().filter(|k| k.ends_with(".tsv")).count();
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let pass = epochs == 2 && reports == 4 && first.len() == second.len() && differing.is_empty();
    let detail = format!("{epochs} epoch files, {reports} report files compared; differing: {differing:?}");
    report(9, pass, &detail, start.elapsed());
    assert!(pass, "{detail}");
}

fn qid_lists() -> impl Strategy<Value = (Vec<Vec<Qid>>, Vec<Qid>)> {
    (1usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(1u64..15, 0..20), n),
            prop::collection::vec(1u64..15, n),
        )
            .prop_map(|(lists, golds)| {
                let q = |x: u64| Qid::new(x).unwrap();
                (
                    lists.into_iter().map(|l| l.into_iter().map(q).collect()).collect(),
                    golds.into_iter().map(q).collect(),
                )
            })
    })
}

#[test]
fn criterion_10_property_suites() {
    let start = Instant::now();
    let config = RunnerConfig {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..RunnerConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(
        config.clone(),
        proptest::test_runner::TestRng::deterministic_rng(config.rng_algorithm),
    );
    let monotone = runner.run(&qid_lists(), |(ranked, golds)| {
        let mut last = 0.0;
        for k in 1..=25 {
            let r = recall_at_k(&ranked, &golds, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r) && r >= last);
            last = r;
        }
        Ok(())
    });
    let mut runner = TestRunner::new_with_rng(
        config.clone(),
        proptest::test_runner::TestRng::deterministic_rng(config.rng_algorithm),
    );
    let layout = runner.run(&(2usize..9, 1usize..8, 3usize..10, any::<u64>()), |(b, neg, w, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = |rows: usize| TokenBlock::from_flat(w, (0..rows * w).map(|_| rng.gen_range(0..100)).collect()).unwrap();
        let batch = TrainingBatch {
            neg,
            mention_ids: block(b),
            entity_ids: block(b * (1 + neg)),
            gold_columns: (0..b).map(|i| (i * (1 + neg)) as u32).collect(),
        };
        prop_assert!(batch.validate().is_ok());
        let t = batch.targets();
        prop_assert_eq!(t.shape(), &[b, b * (1 + neg)]);
        for i in 0..b {
            for j in 0..b * (1 + neg) {
                prop_assert_eq!(t[[i, j]], if j == i * (1 + neg) { 1.0 } else { 0.0 });
            }
        }
        let mut shifted = batch.clone();
        shifted.gold_columns[b - 1] += 1;
        prop_assert!(shifted.validate().is_err());
        Ok(())
    });
    let pass = monotone.is_ok() && layout.is_ok();
    let detail = format!(
        "R@K monotonicity {} and batch layout {} over {PROPERTY_CASES} cases each",
        if monotone.is_ok() { "held" } else { "broke" },
        if layout.is_ok() { "held" } else { "broke" }
    );
    report(10, pass, &detail, start.elapsed());
    assert!(pass, "{detail}: {monotone:?} {layout:?}");
}
