use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::featmat::FeatureSeq;
use super::{Sample, SampleInput, TaskDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    #[default]
    Query,
    Pool,
    /// Query and pool member at once (leave-one-out datasets).
    Both,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RecordInput {
    Text(String),
    Features { file: String, offset: u64 },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    task: String,
    #[serde(default)]
    split: Split,
    input: RecordInput,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tags: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retrieval_key: Option<String>,
}

/// `dir/name.jsonl` → `dir/name.feats.bin`.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    let stem = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.with_file_name(format!("{stem}.feats.bin"))
}

/// Writes the dataset as JSON Lines plus a feature sidecar (only when some
/// sample has feature input). Query samples come first, in order; pool-only
/// samples follow.
pub fn save_manifest(ds: &TaskDataset, path: &Path) -> Result<()> {
    let pool_ids: HashSet<&str> = ds.demo_pool.iter().map(|s| s.id.as_str()).collect();
    let query_ids: HashSet<&str> = ds.query_set.iter().map(|s| s.id.as_str()).collect();
    let side = sidecar_path(path);
    let side_name = side.file_name().unwrap().to_string_lossy().into_owned();
    let mut feats = Vec::new();
    let mut lines = String::new();

    let ordered = ds
        .query_set
        .iter()
        .map(|s| (s, if pool_ids.contains(s.id.as_str()) { Split::Both } else { Split::Query }))
        .chain(ds.demo_pool.iter().filter(|s| !query_ids.contains(s.id.as_str())).map(|s| (s, Split::Pool)));
    for (s, split) in ordered {
        let input = match &s.input {
            SampleInput::Text(t) => RecordInput::Text(t.clone()),
            SampleInput::Features(f) => RecordInput::Features { file: side_name.clone(), offset: f.encode_into(&mut feats) },
        };
        let rec = Record {
            id: s.id.clone(),
            task: s.task.clone(),
            split,
            input,
            target: s.target.clone(),
            choices: s.choices.clone(),
            tags: s.tags.clone(),
            retrieval_key: s.retrieval_key.clone(),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    fs::write(path, lines).map_err(|e| Error::io(path, e))?;
    if !feats.is_empty() {
        let mut f = fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
        f.write_all(&feats).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads and validates a manifest. Feature paths resolve relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<TaskDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut sidecars: HashMap<String, Vec<u8>> = HashMap::new();
    let mut seen = HashSet::new();
    let mut task: Option<String> = None;
    let mut query = Vec::new();
    let mut pool_only = Vec::new();
    let mut shared_ids = HashSet::new();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| Error::Manifest { path: path.to_path_buf(), line: line_no, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        match &task {
            None => task = Some(rec.task.clone()),
            Some(t) if *t != rec.task => return Err(malformed(format!("task {:?} differs from {t:?}", rec.task))),
            _ => {}
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        let input = match rec.input {
            RecordInput::Text(t) => SampleInput::Text(t),
            RecordInput::Features { file, offset } => {
                if !sidecars.contains_key(&file) {
                    let p = dir.join(&file);
                    if !p.exists() {
                        return Err(Error::MissingFeatureFile(p));
                    }
                    sidecars.insert(file.clone(), fs::read(&p).map_err(|e| Error::io(&p, e))?);
                }
                SampleInput::Features(FeatureSeq::decode_at(&sidecars[&file], offset, &dir.join(&file))?)
            }
        };
        let sample = Arc::new(Sample {
            id: rec.id,
            task: rec.task,
            input,
            target: rec.target,
            choices: rec.choices,
            tags: rec.tags,
            retrieval_key: rec.retrieval_key,
        });
        sample.validate()?;
        match rec.split {
            Split::Query => query.push(sample),
            Split::Pool => pool_only.push(sample),
            Split::Both => {
                shared_ids.insert(sample.id.clone());
                query.push(sample);
            }
        }
    }
    let task = task.ok_or_else(|| Error::Manifest { path: path.to_path_buf(), line: 0, msg: "no records".into() })?;
    // pool order: shared samples in query order, then pool-only samples
    let mut pool: Vec<Arc<Sample>> = query.iter().filter(|q| shared_ids.contains(&q.id)).cloned().collect();
    pool.extend(pool_only);
    let ds = TaskDataset { task, query_set: query, demo_pool: pool, leave_one_out: !shared_ids.is_empty() };
    ds.validate()?;
    Ok(ds)
}
