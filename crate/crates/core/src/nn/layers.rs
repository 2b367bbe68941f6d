use rand::Rng as _;

use super::graph::{Graph, Tensor, Var};
use super::params::{ParamId, ParamStore};
use crate::rng::Rng;

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let b = store.add_zeros(format!("{name}.bias"), 1, fan_out);
        Self { w, b, fan_in, fan_out }
    }

    /// Layer whose weights and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add_zeros(format!("{name}.weight"), fan_in, fan_out);
        let b = store.add_zeros(format!("{name}.bias"), 1, fan_out);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }

    /// Graph-free forward pass for inference.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(store.get(layer.w)) + store.get(layer.b);
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Inverted-dropout mask: entries are `0` with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Tensor {
    if p <= 0.0 {
        return Tensor::ones((rows, cols));
    }
    let keep = 1.0 / (1.0 - p);
    Tensor::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Standard sinusoidal position table, `seq x dim`.
pub fn sinusoidal_encoding(seq: usize, dim: usize) -> Tensor {
    Tensor::from_shape_fn((seq, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn positional_encoding_is_fixed() {
        let a = sinusoidal_encoding(6, 8);
        let b = sinusoidal_encoding(6, 8);
        assert_eq!(a, b);
        assert_eq!(a[[0, 0]], 0.0);
        assert_eq!(a[[0, 1]], 1.0);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn dropout_mask_scale() {
        let mut rng = rng_from(4);
        let m = dropout_mask(200, 50, 0.1, &mut rng);
        let mean = m.sum() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.03);
        assert!(m.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-12));
        assert!(dropout_mask(3, 3, 0.0, &mut rng).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn predict_matches_graph_forward() {
        let mut rng = rng_from(2);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], &mut rng);
        let x = Tensor::from_shape_fn((4, 3), |(i, j)| i as f64 - j as f64 * 0.5);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = mlp.forward(&mut g, &store, xi);
        let diff = (g.value(out) - &mlp.predict(&store, &x)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }
}
