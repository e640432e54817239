//! Temperature-scaled cosine similarity and the in-batch contrastive loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embedder::FusedEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{cosine, Scalar, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityParams {
    pub temperature: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl SimilarityParams {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!("{path}.temperature"), "must be positive and finite"));
        }
        Ok(())
    }
}

fn cos64(a: &FusedEmbedding, b: &FusedEmbedding) -> Result<f64> {
    if a.vector.len() != b.vector.len() {
        return Err(Error::shape("similarity", &[a.vector.len()], &[b.vector.len()]));
    }
    let a: Vec<f64> = a.vector.iter().map(|&x| x as f64).collect();
    let b: Vec<f64> = b.vector.iter().map(|&x| x as f64).collect();
    cosine(&a, &b)
}

/// `exp(cos(a, b) / temperature)`.
pub fn phi(a: &FusedEmbedding, b: &FusedEmbedding, params: SimilarityParams) -> Result<f64> {
    Ok(log_phi(a, b, params)?.exp())
}

/// `cos(a, b) / temperature`; what the loss actually consumes.
pub fn log_phi(a: &FusedEmbedding, b: &FusedEmbedding, params: SimilarityParams) -> Result<f64> {
    Ok(cos64(a, b)? / params.temperature)
}

/// One training instance: query, its positive and its hard negative.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEmbeddings {
    pub query: FusedEmbedding,
    pub positive: FusedEmbedding,
    pub negative: FusedEmbedding,
}

/// In-batch contrastive loss over `[B, d]` query, positive and negative rows.
///
/// Row `i` is scored against all `2B` documents (every positive, then every
/// negative); the loss is the mean negative log-probability of column `i`.
pub fn info_nce_graph<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    positives: Var,
    negatives: Var,
    temperature: f64,
) -> Result<Var> {
    let b = tape.value(queries).rows();
    for v in [positives, negatives] {
        if tape.shape(v) != tape.shape(queries) {
            return Err(Error::shape("info_nce", tape.shape(queries), tape.shape(v)));
        }
    }
    let q = tape.l2_normalize_rows(queries)?;
    let docs = tape.concat_rows(&[positives, negatives])?;
    let d = tape.l2_normalize_rows(docs)?;
    let sim = tape.matmul_nt(q, d)?;
    let logits = tape.scale(sim, T::of(1.0 / temperature));
    let logp = tape.log_softmax(logits);
    let picked = tape.pick(logp, (0..b).collect::<Vec<_>>())?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::one()))
}

fn stack(rows: impl Iterator<Item = Vec<f64>>) -> Result<Tensor<f64>> {
    let rows: Vec<Vec<f64>> = rows.collect();
    Tensor::from_rows(&rows)
}

/// Contrastive loss of a batch, evaluated in `f64`.
pub fn info_nce(batch: &[InstanceEmbeddings], params: SimilarityParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("info_nce of an empty batch".into()));
    }
    let widen = |e: &FusedEmbedding| e.vector.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(stack(batch.iter().map(|i| widen(&i.query)))?);
    let p = tape.leaf(stack(batch.iter().map(|i| widen(&i.positive)))?);
    let n = tape.leaf(stack(batch.iter().map(|i| widen(&i.negative)))?);
    let loss = info_nce_graph(&mut tape, q, p, n, params.temperature)?;
    Ok(tape.value(loss).item())
}

/// Index of the candidate with the highest cosine to `query`; ties go to
/// the lowest index.
pub fn retrieve_top1(query: &FusedEmbedding, candidates: &[FusedEmbedding]) -> Result<usize> {
    Ok(rank(query, candidates)?[0])
}

/// Candidate indices by descending cosine, ties by ascending index.
pub fn rank(query: &FusedEmbedding, candidates: &[FusedEmbedding]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract("retrieval over an empty pool".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| cos64(query, c))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(v: &[f32]) -> FusedEmbedding {
        FusedEmbedding { vector: v.to_vec() }
    }

    #[test]
    fn phi_values() {
        let p = SimilarityParams::default();
        assert!((phi(&f(&[1.0, 0.0]), &f(&[2.0, 0.0]), p).unwrap() - 50f64.exp()).abs() / 50f64.exp() < 1e-12);
        assert!((phi(&f(&[1.0, 0.0]), &f(&[0.0, 2.0]), p).unwrap() - 1.0).abs() < 1e-12);
        assert!((log_phi(&f(&[1.0, 0.0]), &f(&[-1.0, 0.0]), p).unwrap() + 50.0).abs() < 1e-12);
        assert!(matches!(phi(&f(&[0.0, 0.0]), &f(&[1.0, 0.0]), p), Err(Error::DegenerateVector(_))));
        assert!(matches!(phi(&f(&[1.0]), &f(&[1.0, 0.0]), p), Err(Error::Shape { .. })));
    }

    #[test]
    fn top1_ties_and_errors() {
        let q = f(&[1.0, 0.0]);
        let pool = [f(&[0.0, 1.0]), f(&[2.0, 0.0]), f(&[3.0, 0.0])];
        assert_eq!(retrieve_top1(&q, &pool).unwrap(), 1);
        assert!(retrieve_top1(&q, &[]).is_err());
        assert_eq!(rank(&q, &pool).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn single_instance_reduces_to_two_way_softmax() {
        let p = SimilarityParams { temperature: 0.5 };
        let inst = InstanceEmbeddings {
            query: f(&[1.0, 0.0]),
            positive: f(&[1.0, 1.0]),
            negative: f(&[0.0, 1.0]),
        };
        let (sp, sn) = (0.5f64.sqrt() / 0.5, 0.0);
        let expected = -(sp - (sp.exp() + f64::exp(sn)).ln());
        assert!((info_nce(&[inst], p).unwrap() - expected).abs() < 1e-12);
    }
}
