//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//! `b"SICLCKPT"`, `u32` version, `u32` header length, JSON header,
//! `u32` tensor count, then per tensor: `u16` name length, UTF-8 name,
//! `u8` dtype (0 = f64, 1 = f32), `u8` ndim, `u32` dims, payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LoraConfig, ModelConfig};
use super::params::{ModelParams, TensorRole};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SICLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    model: ModelConfig,
    lora: Option<LoraConfig>,
    adapters_only: bool,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn write_container(path: &Path, header: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let h = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(h.len() as u32).to_le_bytes());
    buf.extend_from_slice(&h);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(0);
        buf.push(2);
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(c.take(hlen)?)?;
    let n = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let nlen = c.u16()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        let dtype = c.u8()?;
        let ndim = c.u8()? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {ndim}"))),
        };
        let count = rows * cols;
        let data = match dtype {
            0 => c.take(count * 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            1 => c.take(count * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            other => return Err(Error::Checkpoint(format!("{name}: unknown dtype {other}"))),
        };
        tensors.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok((header, tensors))
}

fn fill(params: &mut ModelParams, tensors: Vec<(String, Tensor)>, require_all: bool) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for (name, slot) in params.tensors_mut() {
        match by_name.remove(&name) {
            Some(t) => {
                if t.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch { name, expected: slot.shape(), got: t.shape() });
                }
                *slot = t;
            }
            None if require_all => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            None => {}
        }
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(())
}

/// Saves the full model (base weights plus any adapters).
pub fn save_model(params: &ModelParams, path: &Path, meta: serde_json::Value) -> Result<()> {
    let header = ModelHeader { model: params.config.clone(), lora: params.lora_config.clone(), adapters_only: false, meta };
    write_container(path, &serde_json::to_value(header)?, &params.tensors())
}

pub fn load_model(path: &Path) -> Result<(ModelParams, serde_json::Value)> {
    let (header, tensors) = read_container(path)?;
    let header: ModelHeader = serde_json::from_value(header)?;
    if header.adapters_only {
        return Err(Error::Checkpoint(format!("{} holds adapters only", path.display())));
    }
    header.model.validate()?;
    let mut params = ModelParams::init(&header.model);
    if let Some(lc) = &header.lora {
        params.attach_lora(lc);
    }
    fill(&mut params, tensors, true)?;
    Ok((params, header.meta))
}

/// Saves the model followed by additional named tensors (e.g. optimizer
/// moments), which must not collide with parameter names.
pub fn save_model_with(params: &ModelParams, extras: &[(String, &Tensor)], path: &Path, meta: serde_json::Value) -> Result<()> {
    let header = ModelHeader { model: params.config.clone(), lora: params.lora_config.clone(), adapters_only: false, meta };
    let mut tensors = params.tensors();
    tensors.extend(extras.iter().map(|(n, t)| (n.clone(), *t)));
    write_container(path, &serde_json::to_value(header)?, &tensors)
}

/// Inverse of [`save_model_with`]: tensors whose name starts with
/// `extra_prefix` are returned separately, in file order.
pub fn load_model_with(path: &Path, extra_prefix: &str) -> Result<(ModelParams, serde_json::Value, Vec<(String, Tensor)>)> {
    let (header, tensors) = read_container(path)?;
    let header: ModelHeader = serde_json::from_value(header)?;
    if header.adapters_only {
        return Err(Error::Checkpoint(format!("{} holds adapters only", path.display())));
    }
    header.model.validate()?;
    let mut params = ModelParams::init(&header.model);
    if let Some(lc) = &header.lora {
        params.attach_lora(lc);
    }
    let (extras, own): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with(extra_prefix));
    fill(&mut params, own, true)?;
    Ok((params, header.meta, extras))
}

/// Saves only the adapter matrices.
pub fn save_adapters(params: &ModelParams, path: &Path) -> Result<()> {
    let lora = params.lora_config.clone().ok_or_else(|| Error::Checkpoint("model has no adapters".into()))?;
    let header = ModelHeader { model: params.config.clone(), lora: Some(lora), adapters_only: true, meta: serde_json::Value::Null };
    let tensors: Vec<(String, &Tensor)> =
        params.tensors().into_iter().filter(|(n, _)| ModelParams::role(n) == TensorRole::Adapter).collect();
    write_container(path, &serde_json::to_value(header)?, &tensors)
}

/// Attaches adapters stored by [`save_adapters`] onto a compatible base.
pub fn load_adapters(base: &ModelParams, path: &Path) -> Result<ModelParams> {
    let (header, tensors) = read_container(path)?;
    let header: ModelHeader = serde_json::from_value(header)?;
    if header.model != base.config {
        return Err(Error::Checkpoint("adapter file was built for a different model config".into()));
    }
    let lora = header.lora.ok_or_else(|| Error::Checkpoint("adapter file without lora config".into()))?;
    let mut params = base.clone();
    params.attach_lora(&lora);
    fill(&mut params, tensors, false)?;
    Ok(params)
}
