//! Minimal neural-network toolkit: autodiff graph, parameter storage,
//! Adam, common layers and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{AttentionShape, Graph, Tensor, Var};
pub use layers::{dropout_mask, sinusoidal_encoding, Linear, Mlp};
pub use params::{Adam, ParamId, ParamStore, TensorSpec};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        Tensor::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    /// Runs `build` as a loss over the store and checks every parameter.
    fn assert_grads<F>(store: &ParamStore, build: F)
    where
        F: Fn(&mut Graph, &ParamStore) -> Var,
    {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        g.backward(loss);
        let grads = g.param_grads(store);
        let report = check_gradients(
            store,
            &grads,
            |s| {
                let mut g = Graph::new();
                let l = build(&mut g, s);
                g.scalar(l)
            },
            1e-6,
            1,
        );
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn elementwise_and_matmul_ops() {
        let mut s = ParamStore::new();
        let a = s.add("a", randn(4, 3, 1));
        let b = s.add("b", randn(3, 5, 2));
        let row = s.add("row", randn(1, 5, 3));
        let c = s.add("c", randn(4, 5, 4));
        assert_grads(&s, |g, st| {
            let (a, b, row, c) = (g.param(st, a), g.param(st, b), g.param(st, row), g.param(st, c));
            let ab = g.matmul(a, b);
            let x = g.add_row(ab, row);
            let t = g.tanh(x);
            let e = g.exp(c);
            let sp = g.softplus(c);
            let m = g.mul(t, e);
            let d = g.sub(m, sp);
            let r = g.relu(d);
            let sc = g.scale(r, 0.7);
            let sum = g.add(sc, t);
            g.mean(sum)
        });
    }

    #[test]
    fn softmax_family_and_indexing() {
        let mut s = ParamStore::new();
        let x = s.add("x", randn(5, 8, 5));
        let w = s.add("w", randn(5, 8, 6));
        assert_grads(&s, |g, st| {
            let x = g.param(st, x);
            let w = g.param(st, w);
            let p = g.softmax_rows(x);
            let lp = g.log_softmax_rows(x);
            let prod = g.mul(p, w);
            let mixed = g.add(prod, lp);
            let rs = g.row_sum(mixed);
            let picked = g.gather(mixed, &[0, 3, 7, 2, 2]);
            let sl = g.slice_cols(mixed, 2, 5);
            let cat = g.concat_cols(&[rs, picked, sl]);
            let re = g.reshape(cat, 25, 1);
            let sq = g.mul(re, re);
            g.mean(sq)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut s = ParamStore::new();
        let x = s.add("x", randn(6, 7, 7));
        let gamma = s.add("gamma", randn(1, 7, 8));
        let beta = s.add("beta", randn(1, 7, 9));
        let w = s.add("w", randn(6, 7, 10));
        assert_grads(&s, |g, st| {
            let (x, ga, be, w) = (g.param(st, x), g.param(st, gamma), g.param(st, beta), g.param(st, w));
            let y = g.layer_norm(x, ga, be);
            let m = g.mul(y, w);
            g.mean(m)
        });
    }

    #[test]
    fn attention_gradients_and_probabilities() {
        let shape = AttentionShape { batch: 2, seq: 3, heads: 2 };
        let mut s = ParamStore::new();
        let q = s.add("q", randn(6, 4, 11));
        let k = s.add("k", randn(6, 4, 12));
        let v = s.add("v", randn(6, 4, 13));
        let w = s.add("w", randn(6, 4, 14));
        assert_grads(&s, |g, st| {
            let (q, k, v, w) = (g.param(st, q), g.param(st, k), g.param(st, v), g.param(st, w));
            let o = g.attention(q, k, v, shape);
            let m = g.mul(o, w);
            g.mean(m)
        });

        let mut g = Graph::new();
        let (qv, kv, vv) = (g.param(&s, q), g.param(&s, k), g.param(&s, v));
        let o = g.attention(qv, kv, vv, shape);
        let probs = g.attention_probs(o).unwrap();
        for row in probs.chunks(3) {
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", randn(2, 2, 1));
        let mut g = Graph::new();
        let x = g.input(randn(3, 2, 2));
        let wv = g.param(&s, w);
        let y = g.matmul(x, wv);
        let l = g.mean(y);
        g.backward(l);
        assert!(g.grad(x).is_none());
        assert!(g.grad(wv).is_some());
    }
}
