//! Boolean attention visibility matrices.

use crate::error::{Error, Result};

/// `allow[i * len + j]` is true iff position `i` may attend to position `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Mask that blocks everything except the diagonal.
    pub fn diagonal(len: usize) -> Self {
        let mut allow = vec![false; len * len];
        for i in 0..len {
            allow[i * len + i] = true;
        }
        Self { len, allow }
    }

    /// Lower-triangular mask of size `len`, bounded by `max_len`.
    pub fn causal(len: usize, max_len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Contract("causal mask needs at least one position".into()));
        }
        if len > max_len {
            return Err(Error::Capacity { len, max: max_len });
        }
        let mut allow = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allow[i * len + j] = true;
            }
        }
        Ok(Self { len, allow })
    }

    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allow = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                allow.push(f(i, j));
            }
        }
        Self::from_vec(len, allow)
    }

    /// Validates that every position can see itself.
    pub fn from_vec(len: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != len * len {
            return Err(Error::shape("attention mask", &[len, len], &[allow.len()]));
        }
        if (0..len).any(|i| !allow[i * len + i]) {
            return Err(Error::Contract("attention mask must allow the diagonal".into()));
        }
        Ok(Self { len, allow })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        assert!(i != j || value, "diagonal must stay visible");
        self.allow[i * self.len + j] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// True iff no position attends to a later one.
    pub fn is_causal(&self) -> bool {
        (0..self.len).all(|i| (i + 1..self.len).all(|j| !self.allows(i, j)))
    }

    /// Restriction to a subset of positions, preserving their order.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        Self::from_fn(keep.len(), |a, b| self.allows(keep[a], keep[b]))
    }
}
