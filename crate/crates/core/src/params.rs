//! Named parameter tensors, seeded initialisation, graph binding and Adam.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Model parameters keyed by dotted path (`fusion.moving.t1ce.b1.w`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalar count of the parameters under `prefix.`.
    pub fn numel_under(&self, prefix: &str) -> usize {
        let p = format!("{prefix}.");
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Adds every parameter of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Records every parameter in `g`, as a leaf when `trainable`.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let t = v.cast::<T>();
                let var = if trainable { g.leaf(t) } else { g.constant(t) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles of bound parameters, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Seeded initialiser. Parameters are drawn in call order, so a fixed
/// construction sequence gives bit-identical stores.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        Tensor::new(shape, data)
    }

    /// Conv weight `[co, ci, k, k, k]` and bias `[co]`.
    pub fn conv(&mut self, store: &mut ParamStore, name: &str, ci: usize, co: usize, k: usize) -> Result<()> {
        let fan_in = ci * k * k * k;
        store.insert(format!("{name}.w"), self.uniform(&[co, ci, k, k, k], fan_in))?;
        store.insert(format!("{name}.b"), self.uniform(&[co], fan_in))
    }

    /// Linear weight `[out, inp]` and, optionally, bias `[out]`.
    pub fn linear(&mut self, store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Result<()> {
        store.insert(format!("{name}.w"), self.uniform(&[out, inp], inp))?;
        if bias {
            store.insert(format!("{name}.b"), self.uniform(&[out], inp))?;
        }
        Ok(())
    }

    /// Layer-norm gain (ones) and shift (zeros).
    pub fn layer_norm(&mut self, store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
        store.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
        store.insert(format!("{name}.b"), Tensor::zeros(&[dim]))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let n = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0, std).expect("finite std");
        Tensor::new(shape, (0..n).map(|_| self.rng.sample(dist) as f32).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients<f32>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - c.beta1.powi(t);
        let c2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        let eps = c.eps as f32;
        for (name, var) in bound.iter() {
            let Some(grad) = grads.get(var) else { continue };
            let param = store.get_mut(name).expect("bound names come from the store");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let build = |seed| {
            let mut s = ParamStore::new();
            let mut init = Init::new(seed);
            init.conv(&mut s, "a", 2, 3, 3).unwrap();
            init.linear(&mut s, "b", 4, 5, true).unwrap();
            s
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
        let s = build(3);
        let bound = 1.0 / (2.0f32 * 27.0).sqrt();
        assert!(s.get("a.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(s.numel(), 3 * 2 * 27 + 3 + 20 + 5);
        assert_eq!(s.numel_under("a"), 3 * 2 * 27 + 3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("x", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(&[2], vec![3.0, -2.0])).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..500 {
            let mut g = Graph::<f32>::new();
            let b = s.bind(&mut g, true);
            let x = b.get("x").unwrap();
            let sq = g.square(x);
            let l = g.sum(sq);
            let grads = g.backward(l);
            adam.update(&mut s, &b, &grads, 0.05);
        }
        assert!(s.get("x").unwrap().data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn first_adam_step_has_lr_magnitude() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(&[3], vec![1.0, 1.0, 1.0])).unwrap();
        let mut g = Graph::<f32>::new();
        let b = s.bind(&mut g, true);
        let x = b.get("x").unwrap();
        let w = g.constant(Tensor::new(&[3], vec![10.0, -0.1, 0.0]));
        let p = g.mul(x, w);
        let l = g.sum(p);
        let grads = g.backward(l);
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut s, &b, &grads, 0.01);
        let x = s.get("x").unwrap().data();
        assert!((x[0] - 0.99).abs() < 1e-6 && (x[1] - 1.01).abs() < 1e-6 && x[2] == 1.0);
    }
}
