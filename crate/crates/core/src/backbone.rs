//! Decoder-only transformer over mixed token/vector inputs.
//!
//! Pre-norm residual blocks with learned absolute positions. Several
//! sequences are packed row-wise so every linear layer runs as one matrix
//! product; attention stays within each sequence under its own mask.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionPlan, SeqBlock, SeqMask, Var};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::params::{normal_tensor, ParamStore, Session};
use crate::sequence::{Element, TokenSequence};
use crate::tensor::{Scalar, Tensor};
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_ff: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            vocab_size: 512,
            max_seq_len: 512,
            d_ff: 512,
        }
    }
}

impl BackboneConfig {
    /// Smallest configuration used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            vocab_size: vocab::MIN_VOCAB,
            max_seq_len: 160,
            d_ff: 16,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let at = |f: &str| format!("{path}.{f}");
        if self.d_model == 0 {
            return Err(Error::config(at("d_model"), "must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(at("n_heads"), "must divide d_model"));
        }
        if self.vocab_size < vocab::MIN_VOCAB {
            return Err(Error::config(
                at("vocab_size"),
                format!("must be at least {} to hold reserved tokens", vocab::MIN_VOCAB),
            ));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config(at("max_seq_len"), "must be positive"));
        }
        if self.d_ff == 0 {
            return Err(Error::config(at("d_ff"), "must be positive"));
        }
        Ok(())
    }

    pub fn init_params(&self, rng: &mut impl Rng, store: &mut ParamStore<f32>) {
        let (d, f) = (self.d_model, self.d_ff);
        let std = 0.02;
        // fan-in scaled linear layers; residual writers shrink with depth
        let fan_in = |n: usize| 1.0 / (n as f32).sqrt();
        let depth = ((2 * self.n_layers.max(1)) as f32).sqrt();
        store.insert("tok_emb", normal_tensor(rng, &[self.vocab_size, d], 1.0));
        store.insert("pos_emb", normal_tensor(rng, &[self.max_seq_len, d], 1.0));
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            for ln in ["ln1", "ln2"] {
                store.insert(p(&format!("{ln}.g")), Tensor::full(&[d], 1.0));
                store.insert(p(&format!("{ln}.b")), Tensor::zeros(&[d]));
            }
            for (name, rows, cols, s) in [
                ("attn.q", d, d, fan_in(d)),
                ("attn.k", d, d, fan_in(d)),
                ("attn.v", d, d, fan_in(d)),
                ("attn.o", d, d, fan_in(d) / depth),
                ("ff.up", d, f, fan_in(d)),
                ("ff.down", f, d, fan_in(f) / depth),
            ] {
                store.insert(p(&format!("{name}.w")), normal_tensor(rng, &[rows, cols], s));
                store.insert(p(&format!("{name}.b")), Tensor::zeros(&[cols]));
            }
        }
        store.insert("ln_f.g", Tensor::full(&[d], 1.0));
        store.insert("ln_f.b", Tensor::zeros(&[d]));
        store.insert("lm_head.w", normal_tensor(rng, &[d, self.vocab_size], std));
        store.insert("lm_head.b", Tensor::zeros(&[self.vocab_size]));
    }
}

/// An input position as seen by the graph.
#[derive(Clone, Debug)]
pub enum InputElem<T> {
    Token(u32),
    /// Constant vector in model space.
    Value(Vec<T>),
    /// Row of a recorded tensor (learnable tokens, projected features).
    Row(Var, usize),
}

/// One sequence ready for the backbone.
#[derive(Clone, Debug)]
pub struct SeqInput<T> {
    pub elems: Vec<InputElem<T>>,
    pub positions: Vec<usize>,
    pub mask: SeqMask,
}

impl<T: Scalar> SeqInput<T> {
    /// Causal input with consecutive positions.
    pub fn causal(elems: Vec<InputElem<T>>) -> Self {
        let positions = (0..elems.len()).collect();
        Self {
            elems,
            positions,
            mask: SeqMask::Causal,
        }
    }

    pub fn with_mask(elems: Vec<InputElem<T>>, positions: Vec<usize>, mask: AttentionMask) -> Self {
        Self {
            elems,
            positions,
            mask: SeqMask::Explicit(Arc::new(mask)),
        }
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }
}

pub fn input_elems<T: Scalar>(seq: &TokenSequence) -> Vec<InputElem<T>> {
    seq.elements
        .iter()
        .map(|e| match e {
            Element::Token(t) => InputElem::Token(*t),
            Element::Vector(v) => InputElem::Value(v.iter().map(|&x| T::of(x as f64)).collect()),
        })
        .collect()
}

/// Hidden states of packed sequences; sequence `i` occupies rows
/// `starts[i]..starts[i] + lens[i]`.
#[derive(Clone, Debug)]
pub struct Packed {
    pub hidden: Var,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packed {
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.starts[seq] + pos
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Backbone<'c> {
    pub cfg: &'c BackboneConfig,
}

impl<'c> Backbone<'c> {
    pub fn new(cfg: &'c BackboneConfig) -> Self {
        Self { cfg }
    }

    fn check(&self, sess: &Session<'_, impl Scalar>, seq: &SeqInput<impl Scalar>) -> Result<()> {
        let cfg = self.cfg;
        if seq.is_empty() {
            return Err(Error::Contract("empty sequence".into()));
        }
        if seq.len() > cfg.max_seq_len {
            return Err(Error::Capacity {
                len: seq.len(),
                max: cfg.max_seq_len,
            });
        }
        if seq.positions.len() != seq.len() {
            return Err(Error::shape("positions", &[seq.positions.len()], &[seq.len()]));
        }
        if let Some(&p) = seq.positions.iter().find(|&&p| p >= cfg.max_seq_len) {
            return Err(Error::Capacity {
                len: p + 1,
                max: cfg.max_seq_len,
            });
        }
        if let SeqMask::Explicit(m) = &seq.mask {
            if m.len() != seq.len() {
                return Err(Error::shape("mask", &[m.len(), m.len()], &[seq.len()]));
            }
        }
        for e in &seq.elems {
            match e {
                InputElem::Token(t) if *t as usize >= cfg.vocab_size => {
                    return Err(Error::Vocab {
                        id: *t,
                        vocab: cfg.vocab_size,
                    })
                }
                InputElem::Value(v) if v.len() != cfg.d_model => {
                    return Err(Error::shape("input vector", &[v.len()], &[cfg.d_model]))
                }
                InputElem::Value(v) if v.iter().any(|x| !x.is_finite()) => {
                    return Err(Error::Contract("non-finite input vector".into()))
                }
                InputElem::Row(var, row) => {
                    let t = sess.tape.value(*var);
                    if t.cols() != cfg.d_model || *row >= t.rows() {
                        return Err(Error::shape("input row", t.shape(), &[*row, cfg.d_model]));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Input embeddings (token table or injected vector) plus positions.
    pub fn embed<T: Scalar>(&self, sess: &mut Session<'_, T>, seqs: &[SeqInput<T>]) -> Result<Var> {
        let d = self.cfg.d_model;
        let mut token_ids = Vec::new();
        let mut values: Vec<T> = Vec::new();
        let mut vars: Vec<Var> = Vec::new();
        let mut var_slot: HashMap<Var, usize> = HashMap::new();
        let mut positions = Vec::new();
        // (source kind, index within kind)
        let mut refs: Vec<(usize, usize)> = Vec::new();
        for seq in seqs {
            self.check(sess, seq)?;
            positions.extend_from_slice(&seq.positions);
            for e in &seq.elems {
                match e {
                    InputElem::Token(t) => {
                        refs.push((0, token_ids.len()));
                        token_ids.push(*t as usize);
                    }
                    InputElem::Value(v) => {
                        refs.push((1, values.len() / d));
                        values.extend_from_slice(v);
                    }
                    InputElem::Row(var, row) => {
                        let next = vars.len();
                        let slot = *var_slot.entry(*var).or_insert(next);
                        if slot == next {
                            vars.push(*var);
                        }
                        refs.push((2 + slot, *row));
                    }
                }
            }
        }
        let mut parts = Vec::new();
        let mut base = vec![0usize; 2 + vars.len()];
        let mut offset = 0;
        if !token_ids.is_empty() {
            let table = sess.param("tok_emb")?;
            parts.push(sess.tape.gather_rows(table, token_ids.clone())?);
            offset += token_ids.len();
        }
        if !values.is_empty() {
            base[1] = offset;
            let n = values.len() / d;
            parts.push(sess.tape.constant(Tensor::new(vec![n, d], values)?));
            offset += n;
        }
        for (slot, &var) in vars.iter().enumerate() {
            base[2 + slot] = offset;
            parts.push(var);
            offset += sess.tape.value(var).rows();
        }
        let source = sess.tape.concat_rows(&parts)?;
        let perm: Vec<usize> = refs.iter().map(|&(kind, i)| base[kind] + i).collect();
        let x = sess.tape.gather_rows(source, perm)?;
        let pos_table = sess.param("pos_emb")?;
        let pos = sess.tape.gather_rows(pos_table, positions)?;
        sess.tape.add(x, pos)
    }

    /// Last-layer hidden states (residual stream) for each packed sequence.
    pub fn forward_packed<T: Scalar>(&self, sess: &mut Session<'_, T>, seqs: &[SeqInput<T>]) -> Result<Packed> {
        if seqs.is_empty() {
            return Err(Error::Contract("forward on zero sequences".into()));
        }
        let mut x = self.embed(sess, seqs)?;
        let mut starts = Vec::with_capacity(seqs.len());
        let mut blocks = Vec::with_capacity(seqs.len());
        let mut acc = 0;
        for s in seqs {
            starts.push(acc);
            blocks.push(SeqBlock {
                start: acc,
                len: s.len(),
                mask: s.mask.clone(),
            });
            acc += s.len();
        }
        let plan = Arc::new(AttentionPlan {
            n_heads: self.cfg.n_heads,
            blocks,
        });
        for l in 0..self.cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let h = sess.layer_norm(x, &p("ln1"))?;
            let q = sess.linear(h, &p("attn.q"))?;
            let k = sess.linear(h, &p("attn.k"))?;
            let v = sess.linear(h, &p("attn.v"))?;
            let a = sess.tape.attention(q, k, v, plan.clone())?;
            let o = sess.linear(a, &p("attn.o"))?;
            x = sess.tape.add(x, o)?;
            let h = sess.layer_norm(x, &p("ln2"))?;
            let u = sess.linear(h, &p("ff.up"))?;
            let u = sess.tape.gelu(u);
            let f = sess.linear(u, &p("ff.down"))?;
            x = sess.tape.add(x, f)?;
        }
        Ok(Packed {
            hidden: x,
            starts,
            lens: seqs.iter().map(SeqInput::len).collect(),
        })
    }

    /// Single-sequence forward under an explicit mask.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<'_, T>,
        seq: &TokenSequence,
        mask: &AttentionMask,
    ) -> Result<Var> {
        seq.validate(self.cfg.vocab_size, self.cfg.d_model, self.cfg.max_seq_len)?;
        if mask.len() != seq.len() {
            return Err(Error::shape("mask", &[mask.len()], &[seq.len()]));
        }
        let input = SeqInput::with_mask(input_elems(seq), seq.positions.clone(), mask.clone());
        Ok(self.forward_packed(sess, &[input])?.hidden)
    }

    /// Next-token logits `[rows, vocab]` from hidden states.
    pub fn logits<T: Scalar>(&self, sess: &mut Session<'_, T>, hidden: Var) -> Result<Var> {
        let h = sess.layer_norm(hidden, "ln_f")?;
        sess.linear(h, "lm_head")
    }
}

/// Lower-triangular mask bounded by the model capacity.
pub fn causal_mask(len: usize, cfg: &BackboneConfig) -> Result<AttentionMask> {
    AttentionMask::causal(len, cfg.max_seq_len)
}
