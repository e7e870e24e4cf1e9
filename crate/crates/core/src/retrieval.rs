//! Exhaustive cosine kNN over dense text embeddings.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::FeatureSeq;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f64>,
    norms: Vec<f64>,
    by_id: HashMap<String, usize>,
}

/// `(id, cosine)` pairs, best first.
pub type RetrievalResult = Vec<(String, f64)>;

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingIndex { dim, ids: Vec::new(), vectors: Vec::new(), norms: Vec::new(), by_id: HashMap::new() })
    }

    pub fn insert(&mut self, id: impl Into<String>, v: &[f64]) -> Result<()> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroVector(id));
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.by_id.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.extend_from_slice(v);
        self.norms.push(norm);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.by_id.get(id).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn norm(&self, id: &str) -> Option<f64> {
        self.by_id.get(id).map(|&i| self.norms[i])
    }

    /// The `k` most cosine-similar ids outside `exclude`; ties go to the
    /// smaller id.
    pub fn knn(&self, query: &[f64], k: usize, exclude: &HashSet<String>) -> Result<RetrievalResult> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        let available = self.len() - exclude.iter().filter(|id| self.contains(id)).count();
        if k == 0 || k > available {
            return Err(Error::PoolTooSmall { k, available });
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(qn > 0.0 && qn.is_finite()) {
            return Err(Error::ZeroVector("query".into()));
        }
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .chunks_exact(self.dim)
            .enumerate()
            .filter(|(i, _)| exclude.is_empty() || !exclude.contains(&self.ids[*i]))
            .map(|(i, v)| {
                let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
                ((dot / (self.norms[i] * qn)).clamp(-1.0, 1.0), i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored.into_iter().map(|(s, i)| (self.ids[i].clone(), s)).collect())
    }
}

/// Builds an index over `(id, vector)` pairs; the dimension is taken from the
/// first vector.
pub fn build_index(samples: &[(String, Vec<f64>)]) -> Result<EmbeddingIndex> {
    let dim = samples.first().map(|(_, v)| v.len()).ok_or_else(|| Error::Config("empty index".into()))?;
    let mut idx = EmbeddingIndex::new(dim)?;
    for (id, v) in samples {
        idx.insert(id.clone(), v)?;
    }
    Ok(idx)
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic, L2-normalized signed feature hashing of character 2- and
/// 3-grams (with boundary markers). Trigrams carry twice the weight.
pub fn fallback_embed(text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim < 8 {
        return Err(Error::Config(format!("embedding dimension {dim} below 8")));
    }
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    let chars: Vec<char> = std::iter::once('\u{2}').chain(text.chars()).chain(std::iter::once('\u{3}')).collect();
    let mut v = vec![0.0; dim];
    let mut buf = [0u8; 4];
    for (n, weight) in [(2usize, 0.5), (3, 1.0)] {
        for w in chars.windows(n) {
            let h = fnv1a(w.iter().flat_map(|c| c.encode_utf8(&mut buf).as_bytes().to_vec()).chain([n as u8]));
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % dim as u64) as usize] += sign * weight;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // all n-grams cancelled out; fall back to a fixed coordinate
        v[(fnv1a(text.bytes()) % dim as u64) as usize] = 1.0;
        return Ok(v);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `path.ids` row-id table next to an embedding matrix.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Precomputed embeddings: a feature-sidecar matrix plus a newline-separated
/// id table with one id per row.
pub fn load_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let m = crate::corpus::featmat::read_matrix(path)?;
    let ip = ids_path(path);
    let ids = fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
    let ids: Vec<&str> = ids.lines().filter(|l| !l.is_empty()).collect();
    if ids.len() != m.rows {
        return Err(Error::FeatureFormat { path: ip, msg: format!("{} ids for {} rows", ids.len(), m.rows) });
    }
    Ok(ids.iter().enumerate().map(|(r, id)| (id.to_string(), m.row(r).iter().map(|&x| x as f64).collect())).collect())
}

pub fn save_embeddings(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
    let data = rows.iter().flat_map(|(_, v)| v.iter().map(|&x| x as f32)).collect();
    crate::corpus::featmat::write_matrix(path, &FeatureSeq::new(rows.len(), dim, data))?;
    let ids: String = rows.iter().map(|(id, _)| format!("{id}\n")).collect();
    let ip = ids_path(path);
    fs::write(&ip, ids).map_err(|e| Error::io(&ip, e))
}
