//! Learnable multi-token augmentation.
//!
//! Each input gets its side's K learnable tokens appended; the last-layer
//! states at those K positions form the multi-embedding, which is averaged
//! into a single vector. An orthogonality penalty on the normalized rows
//! pushes the K states apart.

use serde::{Deserialize, Serialize};

use crate::backbone::{input_elems, Backbone, InputElem, SeqInput};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, DOC_TOKENS, QUERY_TOKENS};
use crate::params::Session;
use crate::sequence::{Element, TokenSequence};
use crate::tensor::{Scalar, Tensor};
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Document,
}

impl Side {
    fn param(self) -> &'static str {
        match self {
            Side::Query => QUERY_TOKENS,
            Side::Document => DOC_TOKENS,
        }
    }
}

/// `K x d` last-layer states at the learnable-token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEmbedding {
    pub vectors: Tensor<f32>,
    pub side: Side,
}

impl MultiEmbedding {
    pub fn k(&self) -> usize {
        self.vectors.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub vector: Vec<f32>,
}

/// Chat template around an encoder input: `SYSTEM USER <payload> ASSISTANT`.
pub fn wrap_chat(seq: &TokenSequence) -> TokenSequence {
    let mut elements = Vec::with_capacity(seq.len() + 3);
    elements.push(Element::Token(vocab::SYSTEM));
    elements.push(Element::Token(vocab::USER));
    elements.extend(seq.elements.iter().cloned());
    elements.push(Element::Token(vocab::ASSISTANT));
    let mut segment_ids = vec![u32::MAX, u32::MAX];
    segment_ids.extend_from_slice(&seq.segment_ids);
    segment_ids.push(u32::MAX);
    TokenSequence {
        positions: (0..elements.len()).collect(),
        elements,
        segment_ids,
    }
}

/// Graph handles for a batch of encoded inputs.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[n * K, d]`, K consecutive rows per input.
    pub rows: Var,
    /// `[n, d]` row means.
    pub fused: Var,
}

/// Encodes every `(input, side)` pair in one packed causal forward.
pub fn encode_batch<T: Scalar>(
    sess: &mut Session<'_, T>,
    cfg: &ModelConfig,
    items: &[(&TokenSequence, Side)],
) -> Result<Encoded> {
    let k = cfg.k;
    let max = cfg.backbone.max_seq_len;
    let mut inputs = Vec::with_capacity(items.len());
    for &(seq, side) in items {
        let wrapped;
        let seq = if cfg.chat_wrap {
            wrapped = wrap_chat(seq);
            &wrapped
        } else {
            seq
        };
        if seq.len() + k > max {
            return Err(Error::Capacity {
                len: seq.len() + k,
                max,
            });
        }
        let tokens = sess.param(side.param())?;
        let mut elems: Vec<InputElem<T>> = input_elems(seq);
        elems.extend((0..k).map(|i| InputElem::Row(tokens, i)));
        inputs.push(SeqInput::causal(elems));
    }
    let packed = Backbone::new(&cfg.backbone).forward_packed(sess, &inputs)?;
    let idx: Vec<usize> = (0..inputs.len())
        .flat_map(|s| {
            let end = packed.starts[s] + packed.lens[s];
            end - k..end
        })
        .collect();
    let rows = sess.tape.gather_rows(packed.hidden, idx)?;
    let fused = sess.tape.mean_rows(rows, k)?;
    Ok(Encoded { rows, fused })
}

/// Mean over groups of the pairwise orthogonality penalty
/// `2 / (K (K - 1)) * sum_{i<j} (e_i . e_j)^2` on L2-normalized rows.
///
/// `rows` holds `n * k` rows. Returns a `[1]` tensor; zero when `k == 1`.
pub fn orth_penalty<T: Scalar>(tape: &mut Tape<T>, rows: Var, k: usize) -> Result<Var> {
    let n = tape.value(rows).rows() / k;
    if k < 2 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let normed = tape.l2_normalize_rows(rows)?;
    let mut off_diag = Tensor::full(&[k, k], T::one());
    for i in 0..k {
        off_diag.data_mut()[i * k + i] = T::zero();
    }
    let off_diag = tape.constant(off_diag);
    let mut per_group = Vec::with_capacity(n);
    for g in 0..n {
        let block = tape.slice_rows(normed, g * k, k)?;
        let gram = tape.matmul_nt(block, block)?;
        let sq = tape.mul(gram, gram)?;
        let off = tape.mul(sq, off_diag)?;
        per_group.push(tape.sum(off));
    }
    let all = tape.concat_rows(&per_group)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, T::one() / T::of((n * k * (k - 1)) as f64)))
}

/// Orthogonality loss of one multi-embedding, evaluated in `f64`.
pub fn orth_loss(me: &MultiEmbedding) -> Result<f64> {
    if me.k() < 2 {
        return Ok(0.0);
    }
    let mut tape = Tape::<f64>::new();
    let rows = tape.leaf(me.vectors.cast());
    let loss = orth_penalty(&mut tape, rows, me.k())?;
    Ok(tape.value(loss).item())
}

pub fn fuse(me: &MultiEmbedding) -> FusedEmbedding {
    let (k, d) = (me.vectors.rows(), me.vectors.cols());
    let mut acc = vec![0.0f64; d];
    for r in 0..k {
        for (a, &v) in acc.iter_mut().zip(me.vectors.row(r)) {
            *a += v as f64;
        }
    }
    FusedEmbedding {
        vector: acc.into_iter().map(|v| (v / k as f64) as f32).collect(),
    }
}

impl Model {
    /// Multi-embedding of one input using the configured chat wrapping.
    pub fn encode(&self, seq: &TokenSequence, side: Side) -> Result<MultiEmbedding> {
        self.encode_with(seq, side, self.config.chat_wrap)
    }

    pub fn encode_with(&self, seq: &TokenSequence, side: Side, chat_wrap: bool) -> Result<MultiEmbedding> {
        let cfg = ModelConfig {
            chat_wrap,
            ..self.config.clone()
        };
        let mut sess = Session::new(&self.params);
        let enc = encode_batch(&mut sess, &cfg, &[(seq, side)])?;
        Ok(MultiEmbedding {
            vectors: sess.tape.value(enc.rows).clone(),
            side,
        })
    }

    /// Fused embeddings for many inputs, encoded in chunks.
    pub fn embed_all(&self, seqs: &[&TokenSequence], side: Side, chunk: usize) -> Result<Vec<FusedEmbedding>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let items: Vec<_> = part.iter().map(|&s| (s, side)).collect();
            let mut sess = Session::new(&self.params);
            let enc = encode_batch(&mut sess, &self.config, &items)?;
            let fused = sess.tape.value(enc.fused);
            out.extend((0..fused.rows()).map(|r| FusedEmbedding {
                vector: fused.row(r).to_vec(),
            }));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn me(rows: &[Vec<f32>]) -> MultiEmbedding {
        MultiEmbedding {
            vectors: Tensor::from_rows(rows).unwrap(),
            side: Side::Query,
        }
    }

    #[test]
    fn orth_closed_forms() {
        let v = vec![0.3, -1.0, 2.0];
        assert!((orth_loss(&me(&[v.clone(), v.clone()])).unwrap() - 1.0).abs() < 1e-6);
        assert!(orth_loss(&me(&[vec![1.0, 0.0], vec![0.0, 3.0]])).unwrap().abs() < 1e-6);
        // unit vectors 60 degrees apart
        let half = me(&[vec![1.0, 0.0], vec![0.5, 0.75f32.sqrt()]]);
        assert!((orth_loss(&half).unwrap() - 0.25).abs() < 1e-6);
        assert_eq!(orth_loss(&me(&[vec![1.0, 2.0]])).unwrap(), 0.0);
    }

    #[test]
    fn orth_zero_row_is_degenerate() {
        let err = orth_loss(&me(&[vec![0.0, 0.0], vec![1.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector(_)));
    }

    #[test]
    fn fuse_cases() {
        assert_eq!(fuse(&me(&[vec![1.0, -2.0]])).vector, vec![1.0, -2.0]);
        assert_eq!(fuse(&me(&[vec![1.0, -2.0], vec![-1.0, 2.0]])).vector, vec![0.0, 0.0]);
    }

    #[test]
    fn chat_wrap_only_adds_template() {
        let seq = TokenSequence::from_tokens(&[vocab::QUERY_TASK, 70, 71]);
        let w = wrap_chat(&seq);
        assert_eq!(w.len(), seq.len() + 3);
        assert_eq!(&w.elements[2..2 + seq.len()], &seq.elements[..]);
        assert_eq!(w.elements[0], Element::Token(vocab::SYSTEM));
        assert_eq!(w.elements[1], Element::Token(vocab::USER));
        assert_eq!(w.elements[w.len() - 1], Element::Token(vocab::ASSISTANT));
    }

    fn small_model(k: usize) -> Model {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                n_layers: 2,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                ..BackboneConfig::tiny()
            },
            k,
            chat_wrap: false,
        };
        Model::init(cfg, 11).unwrap()
    }

    #[test]
    fn encode_shapes_and_capacity() {
        let m = small_model(4);
        let seq = TokenSequence::from_tokens(&[vocab::QUERY_TASK, 70, 80, 90]);
        let e = m.encode(&seq, Side::Query).unwrap();
        assert_eq!(e.vectors.shape(), &[4, 16]);
        let long = TokenSequence::from_tokens(&vec![70; m.config.backbone.max_seq_len - 3]);
        assert!(matches!(m.encode(&long, Side::Query), Err(Error::Capacity { .. })));
    }

    #[test]
    fn k1_is_trailing_token_state() {
        let m = small_model(1);
        let seq = TokenSequence::from_tokens(&[vocab::QUERY_TASK, 70, 80]);
        let e = m.encode(&seq, Side::Document).unwrap();
        assert_eq!(e.vectors.rows(), 1);
        assert_eq!(fuse(&e).vector, e.vectors.row(0).to_vec());
    }

    #[test]
    fn learnable_rows_are_causal() {
        let m = small_model(4);
        let seq = TokenSequence::from_tokens(&[vocab::QUERY_TASK, 70, 80]);
        let base = m.encode(&seq, Side::Query).unwrap();
        let mut other = m.clone();
        // perturb learnable token 2: rows 0 and 1 must not move
        other.params.get_mut(QUERY_TOKENS).unwrap().data_mut()[2 * 16] += 0.5;
        let moved = other.encode(&seq, Side::Query).unwrap();
        assert_eq!(base.vectors.row(0), moved.vectors.row(0));
        assert_eq!(base.vectors.row(1), moved.vectors.row(1));
        assert_ne!(base.vectors.row(2), moved.vectors.row(2));
        // perturbing the input reaches every row
        let changed = TokenSequence::from_tokens(&[vocab::QUERY_TASK, 71, 80]);
        let c = m.encode(&changed, Side::Query).unwrap();
        for r in 0..4 {
            assert_ne!(base.vectors.row(r), c.vectors.row(r));
        }
    }

    #[test]
    fn different_queries_differ() {
        let m = small_model(3);
        let a = m.encode(&TokenSequence::from_tokens(&[vocab::QUERY_TASK, 70]), Side::Query).unwrap();
        let b = m.encode(&TokenSequence::from_tokens(&[vocab::QUERY_TASK, 100]), Side::Query).unwrap();
        assert_ne!(fuse(&a), fuse(&b));
    }

    #[test]
    fn chat_wrapped_encoding_matches_manual_wrap() {
        let m = small_model(2);
        let seq = TokenSequence::from_tokens(&[vocab::QUERY_TASK, 70, 90]);
        let wrapped = m.encode_with(&seq, Side::Query, true).unwrap();
        let manual = m.encode_with(&wrap_chat(&seq), Side::Query, false).unwrap();
        assert_eq!(wrapped, manual);
    }
}
