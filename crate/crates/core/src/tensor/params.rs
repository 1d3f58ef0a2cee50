use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named parameters in insertion order, plus Adam moment buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Domain(format!("duplicate parameter name '{name}'")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.first_moment.push(Tensor::zeros(value.shape()));
        self.second_moment.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &Grads, cfg: &AdamConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = grads.0[i].data();
            let m = self.first_moment[i].data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            }
            let v = self.second_moment[i].data_mut();
            for (v, &g) in v.iter_mut().zip(g) {
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            }
            let (m, v) = (self.first_moment[i].data(), self.second_moment[i].data());
            for ((p, &m), &v) in self.values[i].data_mut().iter_mut().zip(m).zip(v) {
                *p -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            }
        }
    }

    pub fn to_doc(&self) -> StoreDoc {
        let entry = |i: usize, t: &Tensor| ParamDoc {
            name: self.names[i].clone(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        };
        StoreDoc {
            params: self.values.iter().enumerate().map(|(i, t)| entry(i, t)).collect(),
            adam_steps: self.steps,
            first_moment: self.first_moment.iter().enumerate().map(|(i, t)| entry(i, t)).collect(),
            second_moment: self.second_moment.iter().enumerate().map(|(i, t)| entry(i, t)).collect(),
        }
    }

    pub fn from_doc(doc: StoreDoc) -> Result<Self> {
        let mut store = ParamStore::new();
        for p in doc.params {
            store.add(p.name, Tensor::new(p.shape, p.data).map_err(|e| Error::Checkpoint(e.to_string()))?)?;
        }
        let load = |entries: Vec<ParamDoc>, store: &ParamStore| -> Result<Vec<Tensor>> {
            if entries.len() != store.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            entries
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    if p.name != store.names[i] || p.shape != store.values[i].shape() {
                        return Err(Error::Checkpoint(format!("optimizer entry '{}' is misaligned", p.name)));
                    }
                    Tensor::new(p.shape, p.data).map_err(|e| Error::Checkpoint(e.to_string()))
                })
                .collect()
        };
        store.first_moment = load(doc.first_moment, &store)?;
        store.second_moment = load(doc.second_moment, &store)?;
        store.steps = doc.adam_steps;
        Ok(store)
    }

    /// Bit-level equality of values, moments and step count.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        let same = |a: &[Tensor], b: &[Tensor]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        self.names == other.names
            && self.steps == other.steps
            && same(&self.values, &other.values)
            && same(&self.first_moment, &other.first_moment)
            && same(&self.second_moment, &other.second_moment)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamDoc {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreDoc {
    pub params: Vec<ParamDoc>,
    pub adam_steps: u64,
    pub first_moment: Vec<ParamDoc>,
    pub second_moment: Vec<ParamDoc>,
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub(crate) Vec<Tensor>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(store.values.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flat_map(|t| t.data_mut().iter_mut()).for_each(|x| *x *= k);
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flat_map(|t| t.data().iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / (norm + 1e-12));
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[1, 1])).is_err());
        assert_eq!(s.id("w"), Some(ParamId(0)));
        assert_eq!(s.n_scalars(), 4);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::matrix(1, 4, vec![1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
        let before = s.get(id).clone();
        let mut g = Grads::zeros_like(&s);
        g.0[0] = Tensor::matrix(1, 4, vec![0.3, -7.0, 1e-3, 250.0]).unwrap();
        let cfg = AdamConfig::default();
        s.adam_step(&g, &cfg);
        for ((a, b), gr) in before.data().iter().zip(s.get(id).data()).zip(g.0[0].data()) {
            let delta = b - a;
            assert!(delta.abs() <= cfg.lr * (1.0 + 1e-4));
            assert_eq!(delta.signum(), -gr.signum());
            assert!((delta.abs() - cfg.lr).abs() < cfg.lr * 1e-3);
        }
    }

    #[test]
    fn doc_round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::matrix(1, 3, vec![0.1, 1.0 / 3.0, -2.5e-300]).unwrap()).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.0[0] = Tensor::matrix(1, 3, vec![0.7, -0.2, 1.0]).unwrap();
        s.adam_step(&g, &AdamConfig::default());
        let json = serde_json::to_string(&s.to_doc()).unwrap();
        let back = ParamStore::from_doc(serde_json::from_str(&json).unwrap()).unwrap();
        assert!(s.bit_eq(&back));
    }

    #[test]
    fn clip_norm_caps_global_norm() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1, 2])).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.0[0] = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(g.clip_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-9);
    }
}
