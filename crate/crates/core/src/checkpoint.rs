//! Parameter container plus JSON sidecar.
//!
//! Binary layout (little endian): magic `MCLUCKPT`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols and `rows * cols` `f64` values. The sidecar `<file>.json` holds
//! the run configuration, epoch and metric history.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::write_atomic;
use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;
use crate::model::Model;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"MCLUCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub epoch: usize,
    pub history: Vec<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, m) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(invalid!("checkpoint is truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Mat)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(invalid!("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(invalid!("unsupported checkpoint version {version}"));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| invalid!("checkpoint tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r
            .take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Mat::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(invalid!("checkpoint has {} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

/// Copies named tensors into `store`; every parameter must be present.
pub fn assign_params(store: &mut ParamStore, tensors: Vec<(String, Mat)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(invalid!(
            "checkpoint holds {} tensors, the model has {}",
            tensors.len(),
            store.len()
        ));
    }
    for (name, m) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| invalid!("checkpoint tensor {name:?} is not a model parameter"))?;
        let dst = store.get_mut(id);
        if dst.shape() != m.shape() {
            return Err(invalid!(
                "checkpoint tensor {name:?} is {:?}, the model expects {:?}",
                m.shape(),
                dst.shape()
            ));
        }
        *dst = m;
    }
    Ok(())
}

pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(meta).map_err(|e| invalid!("sidecar: {e}"))?;
    write_atomic(&sidecar_path(path), json.as_bytes())?;
    write_atomic(path, &encode_params(&model.params))
}

/// Rebuilds the model from the sidecar configuration and loads its weights.
pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let sc = sidecar_path(path);
    let text = fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| invalid!("{}: {e}", sc.display()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut model = Model::new(&meta.config.model_config(), meta.config.seed)?;
    assign_params(&mut model.params, decode_params(&bytes)?)?;
    Ok((model, meta))
}
