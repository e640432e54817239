//! Checkpoint files: framed JSON header (tensor table, config, step, Adam
//! step count) followed by every tensor as little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{self, put_f32s, Reader};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"RMTCHCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    adam_t: u64,
    #[serde(default)]
    task_fingerprint: Option<String>,
    tensors: Vec<Entry>,
}

const GROUPS: [&str; 3] = ["param", "adam.m", "adam.v"];

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let stores = [&state.model.params, &state.adam.m, &state.adam.v];
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (group, store) in GROUPS.iter().zip(stores) {
        for (name, t) in store.iter() {
            tensors.push(Entry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel();
        }
    }
    let header = Header {
        config: state.config.clone(),
        step: state.step,
        adam_t: state.adam.t,
        task_fingerprint: state.task_fingerprint.clone(),
        tensors,
    };
    let mut buf = binfmt::encode_header(MAGIC, VERSION, &header);
    for store in stores {
        for (_, t) in store.iter() {
            put_f32s(&mut buf, t.data());
        }
    }
    buf
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<TrainState> {
    let (h, mut r): (Header, _) = Reader::open(path, bytes, MAGIC, VERSION)?;
    let corrupt = |message: String| Error::CorruptHeader {
        path: path.to_path_buf(),
        message,
    };
    let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
    let mut expected = 0;
    for e in &h.tensors {
        if e.offset != expected {
            return Err(corrupt(format!("tensor {} at offset {} (expected {expected})", e.name, e.offset)));
        }
        let (group, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| corrupt(format!("tensor name {}", e.name)))?;
        let g = GROUPS
            .iter()
            .position(|&x| x == group)
            .ok_or_else(|| corrupt(format!("tensor group {group}")))?;
        let n: usize = e.shape.iter().product();
        let data = r.f32s(n, &e.name)?;
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?;
        stores[g].insert(name, t);
        expected += 4 * n;
    }
    r.finish()?;
    let [params, m, v] = stores;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(corrupt("optimizer state does not match parameters".into()));
    }
    h.config.validate("config").map_err(|err| corrupt(err.to_string()))?;
    Ok(TrainState {
        model: Model {
            config: h.config.model.clone(),
            params,
        },
        adam: Adam { t: h.adam_t, m, v },
        config: h.config,
        step: h.step,
        task_fingerprint: h.task_fingerprint,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    binfmt::write_file(path, &to_bytes(state))
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(path, &binfmt::read_file(path)?)
}
