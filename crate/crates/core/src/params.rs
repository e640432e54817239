use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named trainable tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// A tape plus lazily bound parameters: each parameter is copied onto the
/// tape the first time a forward pass touches it.
pub struct Session<'p, T: Scalar = f32> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: HashMap<String, Var>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.tape.param(name, value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// `x @ W + b` for parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, T::of(1e-5))
    }
}
