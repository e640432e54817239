//! Generated datasets and their binary file format.
//!
//! Payload: training instances (query, positive, hard negative), then eval
//! queries, the eval corpus, and one `(target, pool)` record per query.
//! Each sequence is `u32 n_vec, u32 dim, f32 * n_vec * dim, u32 n_tok,
//! u32 * n_tok`; vectors always precede tokens.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{self, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::sequence::{Element, TokenSequence};
use crate::synth::{EvalSet, TaskConfig, TrainingInstance, World};

pub const MAGIC: &[u8; 8] = b"RMTCHDAT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskConfig,
    pub n_train: usize,
    pub n_eval_queries: usize,
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    /// Share of each eval pool's distractors at the hard-negative angle.
    #[serde(default)]
    pub hard_fraction: f64,
}

fn default_pool() -> usize {
    64
}

impl DataConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        self.task.validate(&format!("{path}.task"))?;
        if self.n_train == 0 {
            return Err(Error::config(format!("{path}.n_train"), "must be at least 1"));
        }
        if self.n_eval_queries == 0 {
            return Err(Error::config(format!("{path}.n_eval_queries"), "must be at least 1"));
        }
        if self.pool_size < 2 {
            return Err(Error::config(format!("{path}.pool_size"), "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::config(format!("{path}.hard_fraction"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: DataConfig,
    n_train: usize,
    n_eval_queries: usize,
    corpus_size: usize,
    pool_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<TrainingInstance>,
    pub eval: EvalSet,
}

impl Dataset {
    pub fn generate(config: &DataConfig) -> Result<Self> {
        config.validate("data")?;
        let world = World::new(&config.task)?;
        let train = (0..config.n_train as u64).map(|i| world.instance(i)).collect();
        let eval = world.eval_set(config.n_eval_queries, config.pool_size, config.hard_fraction)?;
        Ok(Self {
            config: config.clone(),
            train,
            eval,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            n_train: self.train.len(),
            n_eval_queries: self.eval.queries.len(),
            corpus_size: self.eval.corpus.len(),
            pool_size: self.eval.pool_size(),
        };
        let mut buf = binfmt::encode_header(MAGIC, VERSION, &header);
        for inst in &self.train {
            put_seq(&mut buf, &inst.query)?;
            put_seq(&mut buf, &inst.positive)?;
            put_seq(&mut buf, &inst.hard_negative)?;
        }
        for s in self.eval.queries.iter().chain(&self.eval.corpus) {
            put_seq(&mut buf, s)?;
        }
        for (pool, &target) in self.eval.pools.iter().zip(&self.eval.targets) {
            put_u32(&mut buf, target as u32);
            put_u32(&mut buf, pool.len() as u32);
            pool.iter().for_each(|&i| put_u32(&mut buf, i));
        }
        Ok(buf)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (h, mut r): (Header, _) = Reader::open(path, bytes, MAGIC, VERSION)?;
        let mut train = Vec::with_capacity(h.n_train);
        for _ in 0..h.n_train {
            train.push(TrainingInstance {
                query: get_seq(&mut r)?,
                positive: get_seq(&mut r)?,
                hard_negative: get_seq(&mut r)?,
            });
        }
        let queries = (0..h.n_eval_queries).map(|_| get_seq(&mut r)).collect::<Result<Vec<_>>>()?;
        let corpus = (0..h.corpus_size).map(|_| get_seq(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut pools = Vec::with_capacity(h.n_eval_queries);
        let mut targets = Vec::with_capacity(h.n_eval_queries);
        for _ in 0..h.n_eval_queries {
            let target = r.u32("pool target")? as usize;
            let n = r.u32("pool length")? as usize;
            let raw = r.take(n * 4, "pool")?;
            let pool: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            if target >= pool.len() || pool.iter().any(|&i| i as usize >= corpus.len()) {
                return Err(Error::CorruptHeader {
                    path: path.to_path_buf(),
                    message: "pool index out of range".into(),
                });
            }
            pools.push(pool);
            targets.push(target);
        }
        r.finish()?;
        Ok(Self {
            config: h.config,
            train,
            eval: EvalSet {
                queries,
                corpus,
                pools,
                targets,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &binfmt::read_file(path)?)
    }
}

fn put_seq(buf: &mut Vec<u8>, seq: &TokenSequence) -> Result<()> {
    let n_vec = seq.vectors().count();
    if seq.elements[..n_vec].iter().any(|e| matches!(e, Element::Token(_))) {
        return Err(Error::Contract("dataset sequences must put vectors before tokens".into()));
    }
    let dim = seq.vectors().next().map_or(0, <[f32]>::len);
    if seq.vectors().any(|v| v.len() != dim) {
        return Err(Error::Contract("dataset vectors must share one width".into()));
    }
    put_u32(buf, n_vec as u32);
    put_u32(buf, dim as u32);
    seq.vectors().for_each(|v| put_f32s(buf, v));
    let toks: Vec<u32> = seq.tokens().collect();
    put_u32(buf, toks.len() as u32);
    toks.iter().for_each(|&t| put_u32(buf, t));
    Ok(())
}

fn get_seq(r: &mut Reader<'_>) -> Result<TokenSequence> {
    let n_vec = r.u32("vector count")? as usize;
    let dim = r.u32("vector width")? as usize;
    let flat = r.f32s(n_vec * dim, "vectors")?;
    let mut el: Vec<Element> = if dim == 0 {
        Vec::new()
    } else {
        flat.chunks(dim).map(|c| Element::Vector(c.to_vec())).collect()
    };
    let n_tok = r.u32("token count")? as usize;
    let raw = r.take(n_tok * 4, "tokens")?;
    el.extend(raw.chunks_exact(4).map(|c| Element::Token(u32::from_le_bytes(c.try_into().unwrap()))));
    Ok(TokenSequence::new(el))
}
