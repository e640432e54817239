//! Retrieval evaluation, inspection dumps and the gradient-check suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt;
use crate::embedder::{FusedEmbedding, Side};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::matcher::MatchLayout;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, Session};
use crate::rng::{domain, keyed_rng};
use crate::sequence::TokenSequence;
use crate::synth::{EvalSet, TaskConfig, TrainingInstance, World};
use crate::tensor::{cosine, Tensor};
use crate::trainer::{total_loss_graph, TrainConfig};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Short stable hash of any serializable config.
pub fn fingerprint<C: Serialize>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// Anything that maps inputs to fused embeddings.
pub trait Encoder {
    fn embed(&self, seqs: &[&TokenSequence], side: Side) -> Result<Vec<FusedEmbedding>>;
    fn fingerprint(&self) -> String;
}

/// Encoding chunk; fixed so results do not depend on the worker count.
const CHUNK: usize = 64;

/// Worker count for evaluation encoding, from `REMATCH_THREADS` (default 1).
pub fn worker_count() -> usize {
    std::env::var("REMATCH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

impl Encoder for Model {
    fn embed(&self, seqs: &[&TokenSequence], side: Side) -> Result<Vec<FusedEmbedding>> {
        let chunks: Vec<&[&TokenSequence]> = seqs.chunks(CHUNK).collect();
        let workers = worker_count().min(chunks.len()).max(1);
        if workers == 1 {
            return self.embed_all(seqs, side, CHUNK);
        }
        let per = chunks.len().div_ceil(workers);
        let parts: Vec<Result<Vec<FusedEmbedding>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| {
                    s.spawn(move || {
                        let mut out = Vec::new();
                        for c in group {
                            out.extend(self.embed_all(c, side, CHUNK)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("encoder worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(seqs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        fingerprint(&self.config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hit_at_1: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub pool_size: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// 0-based rank of candidate `target` among `scores`: higher scores first,
/// ties broken by lower index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

fn widen(e: &FusedEmbedding) -> Vec<f64> {
    e.vector.iter().map(|&x| x as f64).collect()
}

pub fn evaluate(encoder: &impl Encoder, set: &EvalSet) -> Result<EvalReport> {
    if set.queries.is_empty() || set.pools.iter().any(Vec::is_empty) {
        return Err(Error::Contract("evaluation needs queries with non-empty pools".into()));
    }
    let queries: Vec<&TokenSequence> = set.queries.iter().collect();
    let docs: Vec<&TokenSequence> = set.corpus.iter().collect();
    let q = encoder.embed(&queries, Side::Query)?;
    let d: Vec<Vec<f64>> = encoder.embed(&docs, Side::Document)?.iter().map(widen).collect();
    let mut hits = [0usize; RECALL_KS.len()];
    for (i, pool) in set.pools.iter().enumerate() {
        let qv = widen(&q[i]);
        let scores = pool
            .iter()
            .map(|&j| cosine(&qv, &d[j as usize]))
            .collect::<Result<Vec<_>>>()?;
        let r = rank_of(&scores, set.targets[i]);
        for (h, &k) in hits.iter_mut().zip(&RECALL_KS) {
            *h += (r < k) as usize;
        }
    }
    let n = set.queries.len() as f64;
    let recall_at_k: BTreeMap<usize, f64> = RECALL_KS.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n)).collect();
    Ok(EvalReport {
        hit_at_1: recall_at_k[&1],
        recall_at_k,
        n_queries: set.queries.len(),
        pool_size: set.pool_size(),
        config_fingerprint: encoder.fingerprint(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub len: usize,
    pub positive_slot: u8,
    pub labels: Vec<crate::matcher::Label>,
    pub spans: Vec<SpanRecord>,
}

pub fn sidecar(layout: &MatchLayout) -> MaskSidecar {
    MaskSidecar {
        len: layout.len(),
        positive_slot: match layout.positive_slot {
            crate::matcher::Slot::One => 1,
            crate::matcher::Slot::Two => 2,
        },
        labels: layout.labels.clone(),
        spans: layout
            .segments
            .iter()
            .map(|s| SpanRecord {
                name: s.kind.name(),
                start: s.start,
                len: s.len,
            })
            .collect(),
    }
}

/// Binary PGM: 255 where attention is allowed, 0 where blocked.
pub fn mask_pgm(mask: &AttentionMask) -> Vec<u8> {
    let n = mask.len();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(mask.as_slice().iter().map(|&a| if a { 255u8 } else { 0 }));
    out
}

pub fn read_pgm(path: &Path, bytes: &[u8]) -> Result<AttentionMask> {
    let corrupt = |m: &str| Error::CorruptHeader {
        path: path.to_path_buf(),
        message: m.into(),
    };
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(corrupt("short PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| corrupt("non-UTF-8 PGM header"))?);
    }
    at += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad PGM number"));
    if fields[0] != "P5" || num(fields[3])? != 255 {
        return Err(corrupt("not an 8-bit P5 PGM"));
    }
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    if w != h {
        return Err(corrupt("mask PGM must be square"));
    }
    let body = bytes.get(at..).filter(|b| b.len() == w * h).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        message: format!("expected {} pixels", w * h),
    })?;
    let allow = body
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            255 => Ok(true),
            _ => Err(corrupt("pixel values must be 0 or 255")),
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionMask::from_vec(w, allow)
}

/// Writes `<stem>.pgm` and `<stem>.json` for a layout's mask.
pub fn dump_mask(layout: &MatchLayout, mask: &AttentionMask, stem: &Path) -> Result<()> {
    binfmt::write_file(&stem.with_extension("pgm"), &mask_pgm(mask))?;
    let json = serde_json::to_string_pretty(&sidecar(layout)).expect("sidecar serializes");
    binfmt::write_file(&stem.with_extension("json"), json.as_bytes())
}

/// CSV of fused embeddings: eval queries (`q<i>`), then corpus documents
/// (`d<j>`), nine significant digits per value.
pub fn embeddings_csv(encoder: &impl Encoder, set: &EvalSet) -> Result<String> {
    let queries: Vec<&TokenSequence> = set.queries.iter().collect();
    let docs: Vec<&TokenSequence> = set.corpus.iter().collect();
    let q = encoder.embed(&queries, Side::Query)?;
    let d = encoder.embed(&docs, Side::Document)?;
    let dim = q.first().map_or(0, |e| e.vector.len());
    let mut out = String::from("id,side");
    for c in 0..dim {
        write!(out, ",v{c}").unwrap();
    }
    out.push('\n');
    let rows = q
        .iter()
        .enumerate()
        .map(|(i, e)| (format!("q{i}"), "query", e))
        .chain(d.iter().enumerate().map(|(j, e)| (format!("d{j}"), "document", e)));
    for (id, side, e) in rows {
        out.push_str(&id);
        out.push(',');
        out.push_str(side);
        for v in &e.vector {
            write!(out, ",{v:.8e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(encoder: &impl Encoder, set: &EvalSet, path: &Path) -> Result<()> {
    binfmt::write_file(path, embeddings_csv(encoder, set)?.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub components: Vec<ComponentCheck>,
    pub passed: bool,
}

pub const GRADCHECK_RTOL: f64 = 1e-4;
pub const GRADCHECK_ATOL: f64 = 1e-8;
pub const GRADCHECK_STEP: f64 = 1e-6;
/// Minimum coordinates per component.
pub const GRADCHECK_SAMPLES: usize = 24;

const COMPONENTS: [&str; 4] = ["loss_cl", "loss_orth", "loss_qdm", "loss_total"];
/// Parameters every component check must touch.
const REQUIRED: [&str; 4] = ["lt.query", "lt.doc", "proj.1.w", "proj.2.w"];

/// Finite-difference check of every loss term in 64-bit arithmetic on a
/// two-instance batch.
pub fn gradcheck_suite(model: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with_fault(model, seed, None)
}

/// As [`gradcheck_suite`], with one backward rule scaled by `factor`.
#[doc(hidden)]
pub fn gradcheck_with_fault(model: &ModelConfig, seed: u64, fault: Option<(&'static str, f64)>) -> Result<GradcheckReport> {
    let m = Model::init(model.clone(), seed)?;
    let params: ParamStore<f64> = m.params.cast();
    let task = TaskConfig {
        patch_dim: model.backbone.d_model,
        text_len: 4,
        n_patches: 2,
        ..TaskConfig::with_seed(seed)
    };
    let world = World::new(&task)?;
    let data: Vec<TrainingInstance> = (0..2).map(|i| world.instance(i)).collect();
    let batch: Vec<&TrainingInstance> = data.iter().collect();
    let cfg = TrainConfig::new(model.clone(), 1, seed);

    let loss_of = |p: &ParamStore<f64>, which: usize, fault: Option<(&'static str, f64)>| -> Result<(f64, Option<Vec<(String, Tensor<f64>)>>)> {
        let mut sess = Session::new(p);
        let vars = total_loss_graph(&mut sess, &cfg, &batch, 0)?;
        let v = [Some(vars.cl), Some(vars.orth), vars.qdm, Some(vars.total)][which].expect("matching enabled");
        let value = sess.tape.value(v).item();
        if let Some((op, f)) = fault {
            sess.tape.corrupt_backward(op, f);
        }
        let grads = sess.tape.backward(v)?.into_params();
        Ok((value, Some(grads.0.into_iter().collect())))
    };

    let mut rng = keyed_rng(seed, domain::GRADCHECK, 0);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut components = Vec::new();
    for (which, &component) in COMPONENTS.iter().enumerate() {
        let (_, grads) = loss_of(&params, which, fault)?;
        let grads: BTreeMap<String, Tensor<f64>> = grads.expect("gradients").into_iter().collect();
        // one coordinate of every tensor, two more of each required one
        let mut coords: Vec<(String, usize)> = Vec::new();
        for name in &names {
            let i = sample(&mut rng, params.get(name)?.numel(), 1).index(0);
            coords.push((name.clone(), i));
        }
        for req in REQUIRED {
            let n = params.get(req)?.numel();
            for i in sample(&mut rng, n, 2.min(n)) {
                coords.push((req.to_string(), i));
            }
        }
        while coords.len() < GRADCHECK_SAMPLES {
            let name = &names[sample(&mut rng, names.len(), 1).index(0)];
            let i = sample(&mut rng, params.get(name)?.numel(), 1).index(0);
            coords.push((name.clone(), i));
        }
        let mut failures = 0;
        let mut max_rel: f64 = 0.0;
        let mut worst = String::new();
        for (name, i) in &coords {
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[*i]);
            let mut p = params.clone();
            let orig = p.get(name)?.data()[*i];
            p.get_mut(name)?.data_mut()[*i] = orig + GRADCHECK_STEP;
            let up = loss_of(&p, which, None)?.0;
            p.get_mut(name)?.data_mut()[*i] = orig - GRADCHECK_STEP;
            let down = loss_of(&p, which, None)?.0;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let err = (analytic - numeric).abs();
            // relative to |numeric|, floored where the absolute term dominates
            let rel = err / numeric.abs().max(GRADCHECK_ATOL / GRADCHECK_RTOL);
            let ok = err <= GRADCHECK_ATOL + GRADCHECK_RTOL * numeric.abs();
            if !ok {
                failures += 1;
            }
            if rel > max_rel || worst.is_empty() {
                max_rel = rel;
                worst = format!("{name}[{i}]: analytic {analytic:.10e} numeric {numeric:.10e}");
            }
        }
        components.push(ComponentCheck {
            component: component.to_string(),
            checked: coords.len(),
            failures,
            max_rel_error: max_rel,
            worst,
            passed: failures == 0,
        });
    }
    let passed = components.iter().all(|c| c.passed);
    Ok(GradcheckReport { seed, components, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<FusedEmbedding>, Vec<FusedEmbedding>);

    impl Encoder for Fixed {
        fn embed(&self, seqs: &[&TokenSequence], side: Side) -> Result<Vec<FusedEmbedding>> {
            let src = if side == Side::Query { &self.0 } else { &self.1 };
            Ok(src[..seqs.len()].to_vec())
        }
        fn fingerprint(&self) -> String {
            "fixed".into()
        }
    }

    fn e(v: &[f32]) -> FusedEmbedding {
        FusedEmbedding { vector: v.to_vec() }
    }

    #[test]
    fn ranks_follow_tie_rule() {
        assert_eq!(rank_of(&[0.5, 0.9, 0.5], 2), 2);
        assert_eq!(rank_of(&[0.5, 0.9, 0.5], 0), 1);
        assert_eq!(rank_of(&[0.1, 0.2], 1), 0);
    }

    #[test]
    fn report_from_fixed_encoder() {
        let set = EvalSet {
            queries: vec![TokenSequence::from_tokens(&[1]); 2],
            corpus: vec![TokenSequence::from_tokens(&[1]); 3],
            pools: vec![vec![0, 1, 2], vec![0, 1, 2]],
            targets: vec![0, 2],
        };
        let enc = Fixed(
            vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])],
            vec![e(&[1.0, 0.1]), e(&[0.0, 1.0]), e(&[0.2, 1.0])],
        );
        let r = evaluate(&enc, &set).unwrap();
        assert_eq!(r.hit_at_1, 0.5);
        assert_eq!(r.recall_at_k[&5], 1.0);
        assert_eq!(r.config_fingerprint, "fixed");
    }

    #[test]
    fn pgm_round_trip() {
        let m = AttentionMask::causal(4, 8).unwrap();
        let bytes = mask_pgm(&m);
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        let px = &bytes[bytes.len() - 16..];
        assert_eq!(&px[..4], &[255, 0, 0, 0]);
        assert_eq!(read_pgm(Path::new("m"), &bytes).unwrap(), m);
        assert!(read_pgm(Path::new("m"), &bytes[..bytes.len() - 1]).is_err());
    }
}
