use crate::autodiff::GradientSet;
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with bias correction; moments mirror the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            let mut s = ParamStore::new();
            for (name, t) in p.iter() {
                s.insert(name.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &GradientSet<f32>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let step = (lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        for (name, p) in params.iter_mut() {
            // parameters the loss never touched keep their value and moments
            let Some(g) = grads.get(name) else {
                continue;
            };
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + EPS as f32);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, -1.0, 0.5]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(vec![3.0, -0.2, 0.0]));
        let g = GradientSet(g);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1).unwrap();
        // bias-corrected first step is lr * sign(g)
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let before = p.clone();
        let g = GradientSet(BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, 1.0]))]));
        Adam::new(&p).step(&mut p, &g, 0.0).unwrap();
        assert!(p.bitwise_eq(&before));
    }
}
