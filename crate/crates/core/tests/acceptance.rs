//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. The benchmark runs of criteria 9 and 10 are written
//! to `$SICLAT_ACCEPTANCE_DIR` when set (kept), otherwise to a temp dir.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siclat::cli::{self, experiment_from_toml, run_experiment, Comparison, CONFIG_FILE, MODEL_FILE};
use siclat::corpus::{SampleInput, TaskDataset};
use siclat::episodes::{assemble_sequence, EpisodeSampler, PoolRetriever, PromptTemplate};
use siclat::eval::{row_label, MetricReport};
use siclat::metrics::{
    breakdown, capped_utterance_wer, corpus_bleu, edit_distance, mean_utterance_rate, pooled_rate, utterance_wer, BleuConfig,
    Normalizer, ScoredItem,
};
use siclat::model::{
    forward, loss, loss_and_grad, loss_and_grad_with_labels, LoraConfig, ModelInput, ModelParams, Position, Tensor, TrainableScope,
};
use siclat::retrieval::build_index;
use siclat::synthbench::preset_experiment;
use siclat::tokenizer::{ByteTokenizer, BOS, EOS, SEP};
use siclat::train::{checkpoint_path, resume, train, AdamConfig, TrainConfig};

type Verdict = (bool, String);

fn quadratic_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            d[i][j] = (d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1])).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn metric_oracles() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab = ["a", "b", "c", "d", "ee", "f"];
    let mut mismatches = 0;
    for _ in 0..500 {
        let w = |rng: &mut ChaCha8Rng| -> Vec<&str> { (0..rng.random_range(0..15)).map(|_| vocab[rng.random_range(0..6)]).collect() };
        let (a, b) = (w(&mut rng), w(&mut rng));
        mismatches += usize::from(edit_distance(&a, &b) != quadratic_oracle(&a, &b));
        let (x, y): (Vec<char>, Vec<char>) = (a.concat().chars().collect(), b.concat().chars().collect());
        mismatches += usize::from(edit_distance(&x, &y) != quadratic_oracle(&x, &y));
    }
    let n = Normalizer::default();
    let capped = capped_utterance_wer("x y z", "a b", &n);
    let errs = [utterance_wer("x", "a", &n, true), utterance_wer("b c d", "b c d", &n, true)];
    let (mean, pooled) = (mean_utterance_rate(&errs).0, pooled_rate(&errs));
    let secs = t0.elapsed().as_secs_f64();
    let ok = mismatches == 0 && capped == Some(1.0) && mean != pooled && secs < 5.0;
    (ok, format!("{mismatches} oracle mismatches on 1000 pairs; capped WER {capped:?}; mean {mean} vs pooled {pooled}; {secs:.2}s"))
}

fn table_arithmetic() -> Verdict {
    let t0 = Instant::now();
    let mut items = Vec::new();
    for (g, n, rate) in [("a", 333usize, 0.7177), ("b", 334, 0.6527), ("c", 333, 0.6366)] {
        let correct = (rate * n as f64).round() as usize;
        for i in 0..n {
            items.push(ScoredItem {
                id: format!("{g}{i}"),
                task: "qa".into(),
                hypothesis: String::new(),
                reference: String::new(),
                score: if i < correct { 1.0 } else { 0.0 },
                tags: BTreeMap::from([("group".to_string(), g.to_string())]),
            });
        }
    }
    let t = breakdown(&items, &["group"]).unwrap();
    let pct = format!("{:.2}", 100.0 * t.overall.score);
    let secs = t0.elapsed().as_secs_f64();
    (t.overall.total == 669.0 && t.overall.n == 1000 && pct == "66.90" && secs < 1.0, format!("{} / {} = {pct}%", t.overall.total, t.overall.n))
}

fn bleu_cases() -> Verdict {
    let cfg = BleuConfig::default();
    let same = corpus_bleu(&[("a b c d e", vec!["a b c d e"])], &cfg);
    let empty = corpus_bleu(&[("", vec!["a b c d"])], &cfg);
    // pooled counts: 1-grams 3+5 of 4+5, 2-grams 2+4 of 3+4, 3-grams 1+3 of 2+3,
    // 4-grams 0+2 of 1+2; lengths 9 vs 9, no brevity penalty
    let pairs = [("a b c d", vec!["a b c e"]), ("a b c d e", vec!["a b c d e"])];
    let want = ((8.0 / 9.0) * (6.0 / 7.0) * (4.0 / 5.0) * (2.0 / 3.0) as f64).powf(0.25);
    let got = corpus_bleu(&pairs, &cfg);
    let ok = same == 1.0 && empty == 0.0 && (got - want).abs() <= 1e-9;
    (ok, format!("identity {same}, empty {empty}, pooled {got:.12} vs manual {want:.12}"))
}

fn retrieval_exactness() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<(String, Vec<f64>)> =
        (0..1000).map(|i| (format!("v{i:04}"), (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
    let idx = build_index(&rows).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut wrong = 0;
    for _ in 0..100 {
        let q: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut scan: Vec<(f64, &str)> =
            rows.iter().map(|(id, v)| (v.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (norm(v) * norm(&q)), id.as_str())).collect();
        scan.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let want: Vec<&str> = scan.iter().take(8).map(|s| s.1).collect();
        let got: Vec<String> = idx.knn(&q, 8, &HashSet::new()).unwrap().into_iter().map(|h| h.0).collect();
        wrong += usize::from(got != want);
    }
    let ds = TaskDataset::leave_one_out("loo", samples("loo", 40, 0)).unwrap();
    let r = PoolRetriever::build(&ds, 64, None).unwrap();
    let mut self_hits = 0;
    for _ in 0..10_000 {
        let q = &ds.query_set[rng.random_range(0..ds.len())];
        let demos = r.retrieve(q, &r.embed(&q.id, &q.target).unwrap(), rng.random_range(1..=8)).unwrap();
        self_hits += demos.iter().filter(|d| d.sample.id == q.id).count();
    }
    let secs = t0.elapsed().as_secs_f64();
    (wrong == 0 && self_hits == 0 && secs < 10.0, format!("{wrong}/100 queries differ from the scan; {self_hits} self-retrievals in 10000 trials; {secs:.2}s"))
}

fn random_input(rng: &mut ChaCha8Rng, len: usize, feature_dim: usize) -> ModelInput {
    let tokens: Vec<u32> = (0..len).map(|i| if i == 0 { BOS } else if rng.random_bool(0.3) { siclat::tokenizer::FRAME } else { rng.random_range(0..256) }).collect();
    let n_frames = tokens.iter().filter(|&&t| t == siclat::tokenizer::FRAME).count();
    let frames = Tensor::uniform(n_frames, feature_dim, 1.0, rng);
    let positions = (0..len).map(|i| Position { span: (i % 9) as u16, block: (3 - i * 4 / len) as u16 }).collect();
    ModelInput { tokens, frames, positions }
}

fn randomized_adapters(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(&small_model());
    p.attach_lora(&LoraConfig::default());
    for (name, t) in p.tensors_mut() {
        if name.ends_with("lora_a") || name.ends_with("lora_b") {
            *t = Tensor::uniform(t.rows, t.cols, 0.3, &mut rng);
        }
    }
    p
}

fn lora_identity_and_merge() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = ModelParams::init(&small_model());
    let mut zero = base.clone();
    zero.attach_lora(&LoraConfig::default());
    let adapted = randomized_adapters(6);
    let merged = adapted.merge_lora();
    let (mut id_err, mut merge_err) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let x = random_input(&mut rng, 40, 4);
        id_err = id_err.max(forward(&base, &x).unwrap().max_abs_diff(&forward(&zero, &x).unwrap()));
        merge_err = merge_err.max(forward(&adapted, &x).unwrap().max_abs_diff(&forward(&merged, &x).unwrap()));
    }
    let cfg = LoraConfig::default();
    let scale = zero.layers[0].q.lora.as_ref().unwrap().scale;
    let ok = id_err <= 1e-12 && merge_err <= 1e-10 && scale == 4.0 && cfg.rank == 8 && cfg.alpha == 32.0;
    (ok, format!("identity {id_err:.1e}, merge {merge_err:.1e}, scale {scale} (r={}, alpha={})", cfg.rank, cfg.alpha))
}

fn gradient_check() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = randomized_adapters(8);
    let x = random_input(&mut rng, 40, 4);
    let mask: Vec<bool> = (0..40).map(|i| i >= 20).collect();
    let analytic = loss_and_grad(&p, &x, &mask, TrainableScope::Lora).unwrap().grads;
    let names: Vec<(String, usize)> = p.tensors().into_iter().filter(|(n, _)| n.contains("lora_")).map(|(n, t)| (n, t.len())).collect();
    let eps = 1e-5;
    let (mut worst, mut layers) = (0.0f64, HashSet::new());
    let coords = 120;
    for _ in 0..coords {
        let (name, len) = &names[rng.random_range(0..names.len())];
        let i = rng.random_range(0..*len);
        let at = |delta: f64| {
            let mut q = p.clone();
            for (n, t) in q.tensors_mut() {
                if &n == name {
                    t.data[i] += delta;
                }
            }
            loss(&forward(&q, &x).unwrap(), &x.tokens, &mask).unwrap()
        };
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        let a = analytic.tensors().into_iter().find(|(n, _)| n == name).unwrap().1.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        layers.insert(name.split('.').take(2).collect::<Vec<_>>().join("."));
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst <= 1e-4 && layers.len() >= 2 && secs < 120.0;
    (ok, format!("{coords} coordinates over {} layers, worst relative error {worst:.2e}, {secs:.1}s", layers.len()))
}

fn loss_mask_contract() -> Verdict {
    let (m, r) = two_task_mixture();
    let mut sampler = EpisodeSampler::new(m, r, episode_config(3)).unwrap();
    let p = randomized_adapters(9);
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let ep = sampler.next_episode().unwrap();
        let a = loss_and_grad_with_labels(&p, &ep.input, &ep.input.tokens, &ep.loss_mask, TrainableScope::Lora).unwrap();
        let relabeled: Vec<u32> = ep.input.tokens.iter().zip(&ep.loss_mask).map(|(&t, &m)| if m { t } else { (t + 31) % 256 }).collect();
        let b = loss_and_grad_with_labels(&p, &ep.input, &relabeled, &ep.loss_mask, TrainableScope::Lora).unwrap();
        worst = worst.max((a.loss - b.loss).abs());
        for ((_, x), (_, y)) in a.grads.tensors().into_iter().zip(b.grads.tensors()) {
            worst = worst.max(x.max_abs_diff(&y));
        }
    }
    let mut exact = true;
    for s in samples("q", 6, 1) {
        let a = assemble_sequence(&[], &s, &PromptTemplate::default(), 96, false).unwrap();
        let SampleInput::Text(text) = &s.input else { unreachable!() };
        let (input, target) = (ByteTokenizer.encode(text), ByteTokenizer.encode(&s.target));
        let mut tokens = vec![BOS];
        let mut positions = vec![Position { span: 0, block: 1 }];
        let mut mask = vec![false];
        for (i, &t) in input.iter().enumerate() {
            tokens.push(t);
            positions.push(Position { span: i as u16, block: 0 });
            mask.push(false);
        }
        tokens.push(SEP);
        positions.push(Position { span: 0, block: 0 });
        mask.push(false);
        for (i, &t) in target.iter().chain([EOS].iter()).enumerate() {
            tokens.push(t);
            positions.push(Position { span: i as u16, block: 0 });
            mask.push(true);
        }
        let sft = ModelInput { tokens, frames: Tensor::zeros(0, 4), positions };
        let l0 = loss_and_grad(&p, &a.input, &a.loss_mask, TrainableScope::Lora).unwrap();
        let l1 = loss_and_grad(&p, &sft, &mask, TrainableScope::Lora).unwrap();
        exact &= l0.loss == l1.loss && l0.grads.tensors() == l1.grads.tensors();
    }
    (worst <= 1e-12 && exact, format!("relabel difference {worst:.1e}; k=0 equals plain SFT exactly: {exact}"))
}

fn determinism_and_resume() -> Verdict {
    let (m, r) = two_task_mixture();
    let e = episode_config(2);
    let mut s1 = EpisodeSampler::new(m.clone(), r.clone(), e.clone()).unwrap();
    let mut s2 = EpisodeSampler::new(m.clone(), r.clone(), e.clone()).unwrap();
    let stream = (0..200).all(|_| s1.next_episode().unwrap() == s2.next_episode().unwrap());
    let full = TrainConfig {
        total_steps: 40,
        episodes_per_step: 2,
        checkpoint_every: 0,
        optim: AdamConfig { learning_rate: 1e-2, warmup_steps: 5, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let init = randomized_adapters(10);
    let (pa, la) = train(m.clone(), r.clone(), init.clone(), &e, &full, None).unwrap();
    let (pb, lb) = train(m.clone(), r.clone(), init.clone(), &e, &full, None).unwrap();
    let same = la == lb && pa == pb;
    let dir = tempfile::tempdir().unwrap();
    let half = TrainConfig { total_steps: 20, ..full.clone() };
    train(m.clone(), r.clone(), init, &e, &half, Some(dir.path())).unwrap();
    let (pc, lc) = resume(&checkpoint_path(dir.path(), 20), m, r, &e, &full, None).unwrap();
    let resumed = lc.steps == la.steps && pc == pa;
    (stream && same && resumed, format!("episode stream identical: {stream}; TrainLog+params identical: {same}; resume at 20 of 40 identical: {resumed}"))
}

const SEEDS: [u64; 3] = [0, 1, 2];
const RUNS: [&str; 4] = ["base", "sicl_at1", "sicl_at2", "sft_baseline"];
const SHIFTED: &str = "myst";
const UNSEEN_ST: &str = "st_unseen";

fn run_dir(root: &Path, seed: u64, preset: &str) -> PathBuf {
    root.join(format!("seed{seed}")).join(preset)
}

/// Trains and evaluates the four runs of one seed; adapted runs start from
/// that seed's base checkpoint.
fn run_seed(root: &Path, seed: u64) -> BTreeMap<&'static str, MetricReport> {
    let mut out = BTreeMap::new();
    for preset in RUNS {
        let dir = run_dir(root, seed, preset);
        let exp = preset_experiment(preset).unwrap().with_seed(seed);
        let init = exp.init_from.as_ref().map(|b| run_dir(root, seed, b).join(MODEL_FILE));
        let t0 = Instant::now();
        let report = run_experiment(&exp, &dir, init.as_deref(), None).unwrap();
        println!("    seed {seed} {preset}: {:.0}s", t0.elapsed().as_secs_f64());
        out.insert(preset, report);
    }
    out
}

fn score(r: &MetricReport, shots: usize, suite: &str) -> f64 {
    r.cell(&row_label(shots), suite).unwrap().score
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>().join("/")
}

/// Directional checks on per-seed reports: (a) through (d).
fn directional(all: &[BTreeMap<&'static str, MetricReport>], k: usize) -> Vec<Verdict> {
    let col = |run: &str, shots: usize, suite: &str| -> Vec<f64> { all.iter().map(|m| score(&m[run], shots, suite)).collect() };
    let base0 = col("base", 0, SHIFTED);
    let basek = col("base", k, SHIFTED);
    let at1k = col("sicl_at1", k, SHIFTED);
    let at1_st = col("sicl_at1", k, UNSEEN_ST);
    let at2_st = col("sicl_at2", k, UNSEEN_ST);
    let sft0 = col("sft_baseline", 0, SHIFTED);
    let wins = at1k.iter().zip(&basek).filter(|(a, b)| a < b).count();
    vec![
        (mean(&basek) < mean(&base0), format!("base {SHIFTED} WER zero-shot {} -> k={k} {}", fmt(&base0), fmt(&basek))),
        (
            wins * 3 >= 2 * all.len() && mean(&at1k) < mean(&basek),
            format!("{SHIFTED} k={k} WER base {} vs sicl_at1 {} ({wins}/{} seeds better)", fmt(&basek), fmt(&at1k), all.len()),
        ),
        (mean(&at2_st) > mean(&at1_st), format!("{UNSEEN_ST} k={k} BLEU sicl_at1 {} vs sicl_at2 {}", fmt(&at1_st), fmt(&at2_st))),
        (
            mean(&sft0) > mean(&base0) && mean(&at1k) <= mean(&basek),
            format!("{SHIFTED} zero-shot WER base {} vs sft_baseline {}; k={k} base {} vs sicl_at1 {}", fmt(&base0), fmt(&sft0), fmt(&basek), fmt(&at1k)),
        ),
    ]
}

/// Reads the directions of (a) through (d) off the comparison grid.
fn grid_signs(c: &Comparison, k: usize) -> [bool; 4] {
    let few = row_label(k);
    let s = |run: &str, setting: &str, suite: &str| c.cell(run, setting, suite).and_then(|x| x.score).unwrap();
    [
        s("base", &few, SHIFTED) < s("base", "zero-shot", SHIFTED),
        c.cell("sicl_at1", &few, SHIFTED).and_then(|x| x.sign) == Some('+'),
        s("sicl_at2", &few, UNSEEN_ST) > s("sicl_at1", &few, UNSEEN_ST),
        c.cell("sft_baseline", "zero-shot", SHIFTED).and_then(|x| x.sign) == Some('-'),
    ]
}

fn rerun_matches(root: &Path, seed: u64, original: &BTreeMap<&'static str, MetricReport>) -> (bool, f64) {
    let mut worst = 0.0f64;
    let mut same_shape = true;
    for preset in RUNS {
        let frozen = run_dir(root, seed, preset).join(CONFIG_FILE);
        let exp = experiment_from_toml(&std::fs::read_to_string(&frozen).unwrap()).unwrap();
        let init = exp.init_from.as_ref().map(|b| root.join("rerun").join(b).join(MODEL_FILE));
        let again = run_experiment(&exp, &root.join("rerun").join(preset), init.as_deref(), None).unwrap();
        let before = &original[preset];
        same_shape &= again.rows.len() == before.rows.len();
        for (ra, rb) in again.rows.iter().zip(&before.rows) {
            same_shape &= ra.suites.len() == rb.suites.len();
            for (a, b) in ra.suites.iter().zip(&rb.suites) {
                worst = worst.max((a.score - b.score).abs());
            }
        }
    }
    (same_shape && worst <= 1e-9, worst)
}

#[test]
fn acceptance() {
    let mut verdicts: Vec<(String, bool)> = Vec::new();
    let mut report = |id: &str, v: Verdict| {
        println!("{} {id}: {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
        verdicts.push((id.to_string(), v.0));
    };
    report("1 metric oracles", metric_oracles());
    report("2 appendix-table arithmetic", table_arithmetic());
    report("3 BLEU", bleu_cases());
    report("4 retrieval exactness", retrieval_exactness());
    report("5 LoRA identity and merge", lora_identity_and_merge());
    report("6 gradient check", gradient_check());
    report("7 loss-mask contract", loss_mask_contract());
    report("8 determinism and resume", determinism_and_resume());

    let keep = std::env::var_os("SICLAT_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    let params = ModelParams::init(&preset_experiment("base").unwrap().model).count_params(TrainableScope::Full).0;
    let t0 = Instant::now();
    let all: Vec<_> = SEEDS.iter().map(|&s| run_seed(&root, s)).collect();
    let k = preset_experiment("sicl_at1").unwrap().eval.k;
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let d = directional(&all, k);
    for (tag, v) in ["a", "b", "c", "d"].iter().zip(d.iter()) {
        report(&format!("9{tag} directional"), v.clone());
    }
    report("9 budget", (params <= 2_000_000, format!("{params} parameters; {} seeds in {minutes:.1} min", SEEDS.len())));

    let dirs: Vec<PathBuf> = RUNS.iter().map(|p| run_dir(&root, SEEDS[0], p)).collect();
    let grid = cli::cmd_compare(&dirs).unwrap();
    println!("{}", grid.render());
    let signs = grid_signs(&grid, k);
    let expected: Vec<bool> = d.iter().map(|v| v.0).collect();
    let pattern = signs.iter().zip(&expected).all(|(s, e)| *s && *e);
    report("10 grid sign pattern", (pattern, format!("grid (a..d) {signs:?}, directional verdicts {expected:?}")));
    let (same, worst) = rerun_matches(&root, SEEDS[0], &all[0]);
    report("10 rerun from frozen configs", (same, format!("max score difference {worst:.1e}")));

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.1).map(|v| v.0.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
