mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use siclat::corpus::{load_manifest, save_manifest, sidecar_path, FeatureSeq, MixtureConfig, MixtureEntry, SampleInput, TaskDataset, TaskId, Weighting};
use siclat::Error;

fn feature_samples(task: &str, n: usize) -> Vec<siclat::corpus::Sample> {
    samples(task, n, 0)
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            let rows = 2 + i % 3;
            s.input = SampleInput::Features(FeatureSeq::new(rows, 3, (0..rows * 3).map(|j| (i * 10 + j) as f32 * 0.25).collect()));
            s.tags.insert("speaker".into(), format!("s{}", i % 2));
            s
        })
        .collect()
}

#[test]
fn split_dataset_with_features_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let all = feature_samples("asr", 9);
    let ds = TaskDataset::split("asr", all[..4].to_vec(), all[4..].to_vec()).unwrap();
    let path = dir.path().join("asr.jsonl");
    save_manifest(&ds, &path).unwrap();
    assert!(sidecar_path(&path).exists());
    assert_eq!(load_manifest(&path).unwrap(), ds);
}

#[test]
fn leave_one_out_text_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = samples("qa", 5, 2);
    s[1].retrieval_key = Some("key text".into());
    s[2].choices = Some(vec!["x".into(), "y".into()]);
    s[2].target = "B".into();
    let ds = TaskDataset::leave_one_out("qa", s).unwrap();
    let path = dir.path().join("qa.jsonl");
    save_manifest(&ds, &path).unwrap();
    assert!(!sidecar_path(&path).exists());
    let back = load_manifest(&path).unwrap();
    assert!(back.leave_one_out);
    assert_eq!(back, ds);
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let ds = TaskDataset::leave_one_out("t", samples("t", 3, 0)).unwrap();
    let path = dir.path().join("t.jsonl");
    save_manifest(&ds, &path).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"id\": \"broken\"\n");
    std::fs::write(&path, text).unwrap();
    match load_manifest(&path) {
        Err(Error::Manifest { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a manifest error, got {other:?}"),
    }
}

#[test]
fn missing_sidecar_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ds = TaskDataset::leave_one_out("asr", feature_samples("asr", 3)).unwrap();
    let path = dir.path().join("asr.jsonl");
    save_manifest(&ds, &path).unwrap();
    std::fs::remove_file(sidecar_path(&path)).unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::MissingFeatureFile(_))));
}

#[test]
fn split_datasets_reject_overlap_and_duplicates() {
    let s = samples("a", 4, 0);
    assert!(matches!(TaskDataset::split("a", s.clone(), s[..1].to_vec()), Err(Error::DuplicateId(_))));
    let mut dup = s.clone();
    dup.push(s[0].clone());
    assert!(matches!(TaskDataset::leave_one_out("a", dup), Err(Error::DuplicateId(_))));
    assert!(TaskDataset::split("b", s, samples("a", 2, 10)).is_err());
}

#[test]
fn mixture_config_round_trips_and_resolves() {
    let cfg = MixtureConfig {
        name: "m".into(),
        weighting: Weighting::Proportional,
        entries: vec![MixtureEntry { sample_count: Some(5), ..MixtureEntry::new("a") }, MixtureEntry::new("b")],
    };
    assert_eq!(MixtureConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let a = TaskDataset::split("a", samples("a", 12, 0), samples("a", 4, 50)).unwrap();
    let b = TaskDataset::leave_one_out("b", samples("b", 15, 0)).unwrap();
    let map: BTreeMap<TaskId, Arc<TaskDataset>> = [("a".to_string(), Arc::new(a)), ("b".to_string(), Arc::new(b))].into();
    let m = cfg.build(&map).unwrap();
    assert_eq!(m.task_ids(), ["a", "b"]);
    assert_eq!(m.tasks[0].len(), 5);
    let missing = MixtureConfig::new("x", vec![MixtureEntry::new("nope")]);
    assert!(missing.build(&map).is_err());
}
