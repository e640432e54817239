use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One input position: a vocabulary id or a vector already in model space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Element {
    Token(u32),
    Vector(Vec<f32>),
}

/// Mixed discrete/continuous input with per-element segment labels and
/// position indices.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TokenSequence {
    pub elements: Vec<Element>,
    pub segment_ids: Vec<u32>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    /// Single segment, consecutive positions.
    pub fn new(elements: Vec<Element>) -> Self {
        let n = elements.len();
        Self {
            elements,
            segment_ids: vec![0; n],
            positions: (0..n).collect(),
        }
    }

    pub fn from_tokens(ids: &[u32]) -> Self {
        Self::new(ids.iter().map(|&i| Element::Token(i)).collect())
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.elements.iter().filter_map(|e| match e {
            Element::Token(t) => Some(*t),
            Element::Vector(_) => None,
        })
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.elements.iter().filter_map(|e| match e {
            Element::Vector(v) => Some(v.as_slice()),
            Element::Token(_) => None,
        })
    }

    /// Checks lengths, vocabulary range and vector shapes.
    pub fn validate(&self, vocab_size: usize, d_model: usize, max_len: usize) -> Result<()> {
        if self.segment_ids.len() != self.len() || self.positions.len() != self.len() {
            return Err(Error::Contract("sequence metadata length mismatch".into()));
        }
        if self.len() > max_len {
            return Err(Error::Capacity {
                len: self.len(),
                max: max_len,
            });
        }
        for e in &self.elements {
            match e {
                Element::Token(t) if *t as usize >= vocab_size => {
                    return Err(Error::Vocab {
                        id: *t,
                        vocab: vocab_size,
                    })
                }
                Element::Vector(v) if v.len() != d_model => {
                    return Err(Error::shape("sequence vector", &[v.len()], &[d_model]))
                }
                Element::Vector(v) if v.iter().any(|x| !x.is_finite()) => {
                    return Err(Error::Contract("non-finite continuous element".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
