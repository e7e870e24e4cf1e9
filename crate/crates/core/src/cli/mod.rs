//! Experiment runner: dataset generation, training, evaluation and
//! report comparison, each writing into a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_manifest, save_manifest, TaskDataset, TaskId};
use crate::episodes::build_retrievers;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricReport};
use crate::model::checkpoint::load_model;
use crate::model::{ModelParams, TrainableScope};
use crate::synthbench::{preset_experiment, Experiment, World};
use crate::train::{resume, train, TrainLog, TrainMode};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const MODEL_FILE: &str = "model.ckpt";

/// Exit status of the command-line tool for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invariant(_) => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

/// Where an experiment comes from and how it is modified.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Experiment file (TOML); takes precedence over `preset`.
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    /// `dotted.key=value` assignments applied last.
    pub overrides: Vec<String>,
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `key` (dot-separated path into nested tables) to `raw`, parsed as
/// a TOML value when possible and as a string otherwise.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn experiment_to_toml(exp: &Experiment) -> Result<String> {
    toml::to_string(exp).map_err(|e| Error::Config(e.to_string()))
}

pub fn experiment_from_toml(text: &str) -> Result<Experiment> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Resolves preset or file, seed, then overrides.
pub fn resolve(rc: &RunConfig) -> Result<Experiment> {
    let mut exp = match (&rc.config, &rc.preset) {
        (Some(p), _) => experiment_from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        (None, Some(name)) => preset_experiment(name)?,
        (None, None) => return Err(Error::Config("either a config file or a preset is required".into())),
    };
    if let Some(s) = rc.seed {
        exp = exp.with_seed(s);
    }
    if !rc.overrides.is_empty() {
        let mut table: toml::Table = toml::from_str(&experiment_to_toml(&exp)?).map_err(|e| Error::Config(e.to_string()))?;
        for o in &rc.overrides {
            apply_override(&mut table, o)?;
        }
        exp = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    }
    Ok(exp)
}

/// Writes the resolved experiment as `config.toml` in `dir`.
pub fn freeze(exp: &Experiment, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, experiment_to_toml(exp)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub type Datasets = BTreeMap<TaskId, Arc<TaskDataset>>;

/// The experiment's datasets: loaded from `<data_dir>/<task>.jsonl` when a
/// data directory is given, generated in memory otherwise.
pub fn datasets(exp: &Experiment, data_dir: Option<&Path>) -> Result<Datasets> {
    let tasks = exp.needed_tasks();
    match data_dir {
        Some(dir) => tasks
            .iter()
            .map(|t| Ok((t.clone(), Arc::new(load_manifest(&dir.join(format!("{t}.jsonl")))?))))
            .collect(),
        None => {
            let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
            let world = World::build(&exp.world)?;
            Ok(world.generate_tasks(&names)?.into_iter().map(|(k, v)| (k, Arc::new(v))).collect())
        }
    }
}

/// Aligned `task kind domain queries pool leave-one-out` table.
pub fn dataset_summary(exp: &Experiment, data: &Datasets) -> Result<String> {
    let world = World::build(&exp.world)?;
    let plans = world.plans();
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:<5} {:<6} {:>8} {:>8} {:>5}", "task", "kind", "domain", "queries", "pool", "loo");
    for (name, ds) in data {
        let (kind, domain) = plans
            .iter()
            .find(|p| &p.spec.task == name)
            .map(|p| (format!("{:?}", p.spec.kind).to_lowercase(), p.domain.clone()))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{:<12} {:<5} {:<6} {:>8} {:>8} {:>5}",
            name,
            kind,
            domain,
            ds.query_set.len(),
            ds.demo_pool.len(),
            if ds.leave_one_out { "yes" } else { "no" }
        );
    }
    Ok(s)
}

/// Writes one manifest (plus feature sidecar) per task of the experiment
/// into `out_dir`, freezes the config there, and returns the summary.
pub fn cmd_gen(exp: &Experiment, out_dir: &Path) -> Result<String> {
    let data = datasets(exp, None)?;
    freeze(exp, out_dir)?;
    for (name, ds) in &data {
        save_manifest(ds, &out_dir.join(format!("{name}.jsonl")))?;
    }
    dataset_summary(exp, &data)
}

/// Starting parameters: `init` checkpoint (or fresh weights), with
/// adapters attached unless training the full model.
pub fn initial_params(exp: &Experiment, init: Option<&Path>) -> Result<ModelParams> {
    let mut params = match init {
        Some(p) => load_model(p)?.0,
        None => {
            if exp.init_from.is_some() && exp.train.scope != TrainableScope::Full {
                return Err(Error::Config(format!(
                    "preset {} starts from a trained {} model; pass its checkpoint",
                    exp.preset,
                    exp.init_from.as_deref().unwrap_or("")
                )));
            }
            ModelParams::init(&exp.model)
        }
    };
    if params.lora_config.is_some() {
        params = params.merge_lora();
    }
    if exp.train.scope != TrainableScope::Full {
        params.attach_lora(&exp.lora);
    }
    Ok(params)
}

/// Command-line adjustments to training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub mode: Option<TrainMode>,
    pub k: Option<usize>,
    pub steps: Option<u64>,
}

impl TrainOverrides {
    pub fn apply(&self, exp: &mut Experiment) {
        if let Some(m) = self.mode {
            exp.train.mode = m;
        }
        if let Some(k) = self.k {
            exp.episodes.k = k;
        }
        if let Some(s) = self.steps {
            exp.train.total_steps = s;
        }
    }
}

/// Trains into `out_dir` (frozen config, checkpoints, `model.ckpt`,
/// `train_log.jsonl`). With `resume_from`, continues that checkpoint.
pub fn cmd_train(
    exp: &Experiment,
    out_dir: &Path,
    init: Option<&Path>,
    resume_from: Option<&Path>,
    data_dir: Option<&Path>,
) -> Result<TrainLog> {
    freeze(exp, out_dir)?;
    let data = datasets(exp, data_dir)?;
    let mixture = Arc::new(exp.mixture.build(&data)?);
    let retrievers = Arc::new(build_retrievers(&mixture, exp.episodes.embed_dim)?);
    let (_, log) = match resume_from {
        Some(ckpt) => resume(ckpt, mixture, retrievers, &exp.episodes, &exp.train, Some(out_dir))?,
        None => train(mixture, retrievers, initial_params(exp, init)?, &exp.episodes, &exp.train, Some(out_dir))?,
    };
    Ok(log)
}

pub fn eval_options(exp: &Experiment) -> EvalOptions {
    EvalOptions {
        k: exp.eval.k,
        max_new_tokens: exp.eval.max_new_tokens,
        max_seq_len: exp.model.max_seq_len,
        template: exp.episodes.template.clone(),
        task_templates: exp.episodes.task_templates.clone(),
        embed_dim: exp.episodes.embed_dim,
        bleu: exp.eval.bleu,
        normalizer: exp.eval.normalizer.clone(),
    }
}

/// Evaluates `checkpoint` on the experiment's suites and writes
/// `report.json` and `report.txt` into `out_dir`.
pub fn cmd_eval(exp: &Experiment, checkpoint: &Path, out_dir: &Path, data_dir: Option<&Path>) -> Result<MetricReport> {
    let (params, _) = load_model(checkpoint)?;
    let data = datasets(exp, data_dir)?;
    let report = evaluate(&params, &exp.preset, &exp.eval.suites, &data, &eval_options(exp))?;
    write_report(&report, out_dir)?;
    Ok(report)
}

pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let j = dir.join(REPORT_JSON);
    fs::write(&j, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&j, e))?;
    let t = dir.join(REPORT_TXT);
    fs::write(&t, report.render_full()).map_err(|e| Error::io(&t, e))
}

pub fn read_report(dir: &Path) -> Result<MetricReport> {
    let p = dir.join(REPORT_JSON);
    Ok(serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?)
}

/// One cell of a comparison: a run's score and its delta to the first run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareCell {
    pub score: Option<f64>,
    pub delta: Option<f64>,
    /// `+` better, `-` worse, `=` equal to the reference run.
    pub sign: Option<char>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub setting: String,
    pub cells: Vec<CompareCell>,
}

/// Runs × settings against suites, with deltas to the first run's row of
/// the same setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub suites: Vec<String>,
    pub rows: Vec<CompareRow>,
}

pub fn compare(reports: &[(String, MetricReport)]) -> Comparison {
    let mut suites: Vec<String> = Vec::new();
    for (_, r) in reports {
        for s in r.suite_names() {
            if !suites.contains(&s) {
                suites.push(s);
            }
        }
    }
    let mut rows = Vec::new();
    let reference = reports.first().map(|(_, r)| r);
    for (run, r) in reports {
        for row in &r.rows {
            let cells = suites
                .iter()
                .map(|s| {
                    let cell = r.cell(&row.label, s);
                    let score = cell.map(|c| c.score);
                    let base = reference.and_then(|b| b.cell(&row.label, s));
                    let (delta, sign) = match (cell, base) {
                        (Some(c), Some(b)) => {
                            let d = c.score - b.score;
                            let better = if c.kind.higher_is_better() { d } else { -d };
                            (Some(d), Some(if better > 0.0 { '+' } else if better < 0.0 { '-' } else { '=' }))
                        }
                        _ => (None, None),
                    };
                    CompareCell { score, delta, sign }
                })
                .collect();
            rows.push(CompareRow { run: run.clone(), setting: row.label.clone(), cells });
        }
    }
    Comparison { suites, rows }
}

impl Comparison {
    pub fn cell(&self, run: &str, setting: &str, suite: &str) -> Option<&CompareCell> {
        let i = self.suites.iter().position(|s| s == suite)?;
        self.rows.iter().find(|r| r.run == run && r.setting == setting).map(|r| &r.cells[i])
    }

    pub fn render(&self) -> String {
        let rw = self.rows.iter().map(|r| r.run.len()).chain([3]).max().unwrap();
        let sw = self.rows.iter().map(|r| r.setting.len()).chain([7]).max().unwrap();
        let w: Vec<usize> = self.suites.iter().map(|s| s.len().max(16)).collect();
        let mut s = String::new();
        let _ = write!(s, "{:<rw$}  {:<sw$}", "run", "setting");
        for (name, w) in self.suites.iter().zip(&w) {
            let _ = write!(s, "  {name:>w$}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<rw$}  {:<sw$}", r.run, r.setting);
            for (c, w) in r.cells.iter().zip(&w) {
                let text = match (c.score, c.delta, c.sign) {
                    (Some(v), Some(d), Some(g)) => format!("{:.2} ({:+.2} {g})", 100.0 * v, 100.0 * d),
                    (Some(v), _, _) => format!("{:.2}", 100.0 * v),
                    (None, _, _) => "absent".into(),
                };
                let _ = write!(s, "  {text:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Joins the reports of `run_dirs` in argument order.
pub fn cmd_compare(run_dirs: &[PathBuf]) -> Result<Comparison> {
    let reports = run_dirs
        .iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string());
            Ok((name, read_report(d)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(compare(&reports))
}

/// Trains (when the experiment has steps) and evaluates in one directory.
pub fn run_experiment(exp: &Experiment, out_dir: &Path, init: Option<&Path>, data: Option<&Path>) -> Result<MetricReport> {
    cmd_train(exp, out_dir, init, None, data)?;
    cmd_eval(exp, &out_dir.join(MODEL_FILE), out_dir, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_values() {
        let rc = RunConfig {
            preset: Some("sicl_at1".into()),
            seed: Some(3),
            overrides: vec!["train.total_steps=7".into(), "episodes.k=2".into(), "world.reverse_words=true".into()],
            ..RunConfig::default()
        };
        let e = resolve(&rc).unwrap();
        assert_eq!((e.train.total_steps, e.episodes.k, e.world.reverse_words, e.seed), (7, 2, true, 3));
        assert!(resolve(&RunConfig { overrides: vec!["nokey".into()], ..rc.clone() }).is_err());
        assert!(resolve(&RunConfig { preset: Some("zzz".into()), ..RunConfig::default() }).is_err());
    }

    #[test]
    fn experiment_toml_roundtrip() {
        for p in crate::synthbench::PRESETS {
            let e = preset_experiment(p).unwrap().with_seed(5);
            assert_eq!(experiment_from_toml(&experiment_to_toml(&e).unwrap()).unwrap(), e);
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Invariant("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFiniteLoss { step: 1 }), 3);
        assert_eq!(exit_code(&Error::UnknownPreset("x".into())), 1);
    }
}
