//! Binary checkpoints.
//!
//! Layout, all integers 32-bit little-endian:
//! `"S2LT"`, version, config length, config (UTF-8 JSON), then one record per
//! tensor: name length, name, rank, extents, values as f32. Parameters come first
//! in name order, then optimizer state under `opt/m/..`, `opt/v/..` and `opt/t`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::data::{TaskSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2LT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

/// Everything needed to rebuild a model besides its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub task: TaskSpec,
    pub step: u64,
    /// Resolved experiment configuration the run was started from.
    #[serde(default)]
    pub experiment: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub opt: Option<AdamState>,
}

fn put_u32(w: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds 32 bits")))?;
    w.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(w: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(w, name.len())?;
    w.extend_from_slice(name.as_bytes());
    put_u32(w, t.shape().len())?;
    for &e in t.shape() {
        put_u32(w, e)?;
    }
    for &v in t.data() {
        w.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Serializes a checkpoint to bytes.
pub fn write_checkpoint_to(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.extend_from_slice(CHECKPOINT_MAGIC);
    w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_string(&ckpt.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut w, meta.len())?;
    w.extend_from_slice(meta.as_bytes());
    for (n, t) in ckpt.params.names().iter().zip(ckpt.params.tensors()) {
        put_tensor(&mut w, n, t)?;
    }
    if let Some(opt) = &ckpt.opt {
        // exact for step counts below 2^24
        let t = Tensor::scalar(opt.t as f64);
        let mut entries: Vec<(String, &Tensor)> = vec![("opt/t".to_string(), &t)];
        for (i, n) in ckpt.params.names().iter().enumerate() {
            entries.push((format!("opt/m/{n}"), &opt.m[i]));
            entries.push((format!("opt/v/{n}"), &opt.v[i]));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for (n, t) in entries {
            put_tensor(&mut w, &n, t)?;
        }
    }
    Ok(w)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = write_checkpoint_to(ckpt)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()?;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let e = self.u32()?;
            count = count
                .checked_mul(e)
                .filter(|&c| c <= (self.buf.len() - self.pos) / 4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} extents exceed the file")))?;
            shape.push(e);
        }
        let raw = self.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Parses checkpoint bytes and checks them against the embedded config.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    meta.model
        .validate()
        .map_err(|e| Error::Checkpoint(format!("embedded model config invalid: {e}")))?;
    if meta.model.text_vocab != meta.vocab.len() || meta.model.lid_vocab != meta.vocab.lid_len() {
        return Err(Error::Checkpoint("model vocabulary sizes disagree with the embedded vocabulary".into()));
    }
    let mut params = Vec::new();
    let mut opt = Vec::new();
    let mut prev: Option<String> = None;
    while !r.done() {
        let (name, t) = r.tensor()?;
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Checkpoint(format!("tensor {name} out of order")));
        }
        prev = Some(name.clone());
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {name} holds non-finite values")));
        }
        if name.starts_with("opt/") {
            opt.push((name, t));
        } else if !opt.is_empty() {
            return Err(Error::Checkpoint(format!("parameter {name} after optimizer state")));
        } else {
            params.push((name, t));
        }
    }
    let params = ModelParams::from_named(params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    params.check_against(&meta.model)?;
    let opt = if opt.is_empty() {
        None
    } else {
        Some(rebuild_opt(&params, opt)?)
    };
    Ok(Checkpoint { meta, params, opt })
}

fn rebuild_opt(params: &ModelParams, entries: Vec<(String, Tensor)>) -> Result<AdamState> {
    let mut state = AdamState::new(params.tensors());
    let mut seen = 0;
    for (name, t) in entries {
        if name == "opt/t" {
            state.t = t.data()[0] as u64;
            seen += 1;
            continue;
        }
        let (slot, pname) = if let Some(p) = name.strip_prefix("opt/m/") {
            (0, p)
        } else if let Some(p) = name.strip_prefix("opt/v/") {
            (1, p)
        } else {
            return Err(Error::Checkpoint(format!("unknown optimizer entry {name}")));
        };
        let i = params
            .index_of(pname)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer entry {name} has no parameter")))?;
        if t.shape() != params.tensors()[i].shape() {
            return Err(Error::Checkpoint(format!("optimizer entry {name} has the wrong shape")));
        }
        if slot == 0 {
            state.m[i] = t;
        } else {
            state.v[i] = t;
        }
        seen += 1;
    }
    if seen != 2 * params.names().len() + 1 {
        return Err(Error::Checkpoint("incomplete optimizer state".into()));
    }
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
