use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::graph::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named tensors owned by a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Name and shape of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: [usize; 2],
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform `+-sqrt(6 / (fan_in + fan_out))` initialization.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let t = Tensor::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros((rows, cols)))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, Tensor::from_elem((rows, cols), value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| TensorSpec { name: n.clone(), shape: [t.nrows(), t.ncols()] })
            .collect()
    }

    /// All values concatenated in registration order, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// Overwrites values from a flat vector matching [`ParamStore::to_flat`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.n_scalars(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            for (dst, src) in t.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Polyak averaging: `self <- (1 - tau) * self + tau * source`.
    pub fn soft_update_from(&mut self, source: &ParamStore, tau: f64) {
        for (dst, src) in self.tensors.iter_mut().zip(&source.tensors) {
            dst.zip_mut_with(src, |d, s| *d += tau * (s - *d));
        }
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: store.iter().map(|t| Tensor::zeros(t.raw_dim())).collect(),
            v: store.iter().map(|t| Tensor::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for ((param, g), (m, v)) in store.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(param).and(g).and(m).and(v).for_each(|p, g, m, v| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
