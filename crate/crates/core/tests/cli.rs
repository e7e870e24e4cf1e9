mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use common::*;
use siclat::cli::{self, compare, experiment_to_toml, read_report, write_report, MODEL_FILE};
use siclat::eval::{MetricReport, ReportRow, SuiteResult};
use siclat::metrics::BreakdownTable;
use siclat::synthbench::SuiteKind;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_siclat"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(exp: &siclat::synthbench::Experiment, dir: &Path) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, experiment_to_toml(exp).unwrap()).unwrap();
    p
}

fn file_digests(dir: &Path) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let bytes = std::fs::read(e.path()).unwrap();
        // FNV-1a
        let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        out.insert(e.file_name().to_string_lossy().into_owned(), h);
    }
    out
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&tiny_experiment("sicl_at2"), dir.path());
    for out in ["a", "b"] {
        let st = bin().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join(out)).output().unwrap().status;
        assert!(st.success());
    }
    let a = file_digests(&dir.path().join("a"));
    assert!(a.contains_key("asr_en.jsonl") && a.contains_key("asr_en.feats.bin") && a.contains_key("st_unseen.jsonl"));
    assert_eq!(a, file_digests(&dir.path().join("b")));
}

#[test]
fn unknown_preset_and_bad_usage_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["gen", "--preset", "nope", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
    assert_eq!(bin().args(["frobnicate"]).output().unwrap().status.code(), Some(1));
    let missing_init = bin().args(["train", "--preset", "sicl_at1", "--steps", "1", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(missing_init.status.code(), Some(1));
}

#[test]
fn train_then_eval_is_deterministic_and_resumable_via_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = tiny_experiment("base");
    exp.train.checkpoint_every = 2;
    let cfg = write_config(&exp, dir.path());
    let run = |out: &str| {
        let st = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join(out)).output().unwrap().status;
        assert!(st.success());
    };
    run("t1");
    run("t2");
    let m1 = std::fs::read(dir.path().join("t1").join(MODEL_FILE)).unwrap();
    assert_eq!(m1, std::fs::read(dir.path().join("t2").join(MODEL_FILE)).unwrap());

    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("t3"))
        .arg("--resume")
        .arg(dir.path().join("t1").join("ckpt-0000002.ckpt"))
        .output()
        .unwrap()
        .status;
    assert!(st.success());
    assert_eq!(m1, std::fs::read(dir.path().join("t3").join(MODEL_FILE)).unwrap());

    for out in ["e1", "e2"] {
        let st = bin()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(out))
            .arg("--checkpoint")
            .arg(dir.path().join("t1").join(MODEL_FILE))
            .output()
            .unwrap()
            .status;
        assert!(st.success());
    }
    let r1 = read_report(&dir.path().join("e1")).unwrap();
    assert_eq!(r1, read_report(&dir.path().join("e2")).unwrap());
    assert_eq!(r1.rows.len(), 2);
    assert_eq!(r1.suite_names(), ["myst", "rsr", "st_unseen", "sqa"]);
    assert!(dir.path().join("e1").join(cli::CONFIG_FILE).exists());
}

fn suite(name: &str, kind: SuiteKind, score: f64) -> SuiteResult {
    SuiteResult {
        suite: name.into(),
        task: name.into(),
        kind,
        shots: 0,
        metric: kind.metric_name().into(),
        score,
        uncapped: None,
        pooled: None,
        n: 1,
        items: Vec::new(),
        breakdown: BreakdownTable { rows: Vec::new(), overall: siclat::metrics::BreakdownRow { group: "Overall".into(), item: "Total".into(), n: 1, score, total: score } },
    }
}

fn report(model: &str, suites: Vec<SuiteResult>) -> MetricReport {
    MetricReport { model: model.into(), rows: vec![ReportRow { label: "zero-shot".into(), shots: 0, suites }] }
}

#[test]
fn compare_signs_follow_metric_direction() {
    let a = report("a", vec![suite("asr", SuiteKind::Asr, 0.30), suite("st", SuiteKind::St, 0.10)]);
    let b = report("b", vec![suite("asr", SuiteKind::Asr, 0.20), suite("st", SuiteKind::St, 0.05)]);
    let c = compare(&[("a".into(), a.clone()), ("b".into(), b.clone())]);
    assert_eq!(c.cell("b", "zero-shot", "asr").unwrap().sign, Some('+'));
    assert_eq!(c.cell("b", "zero-shot", "st").unwrap().sign, Some('-'));
    assert!((c.cell("b", "zero-shot", "asr").unwrap().delta.unwrap() + 0.10).abs() < 1e-12);
    // the first run is the reference, so order matters
    let swapped = compare(&[("b".into(), b), ("a".into(), a.clone())]);
    assert_eq!(swapped.cell("a", "zero-shot", "asr").unwrap().sign, Some('-'));
    let same = compare(&[("a".into(), a.clone()), ("a2".into(), a)]);
    assert!(same.rows[1].cells.iter().all(|c| c.sign == Some('=') && c.delta == Some(0.0)));
}

#[test]
fn compare_marks_absent_suites() {
    let dir = tempfile::tempdir().unwrap();
    write_report(&report("a", vec![suite("asr", SuiteKind::Asr, 0.3)]), &dir.path().join("a")).unwrap();
    write_report(&report("b", vec![suite("qa", SuiteKind::Sqa, 0.5)]), &dir.path().join("b")).unwrap();
    let c = cli::cmd_compare(&[dir.path().join("a"), dir.path().join("b")]).unwrap();
    assert_eq!(c.suites, ["asr", "qa"]);
    assert_eq!(c.cell("b", "zero-shot", "asr").unwrap().score, None);
    assert!(c.render().contains("absent"));
    let out = bin().arg("compare").arg(dir.path().join("a")).arg(dir.path().join("missing")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
