//! Tape-based reverse-mode autodiff over dense row-major matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are copied
//! in from a [`ParamStore`] and their gradients are collected after
//! [`Graph::backward`].

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};

pub type Tensor = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, probs: Vec<f64> },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowSum(Var),
    Gather(Var, Vec<usize>),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let rg = self.rg(&[a]);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with learned `1 x d` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Scaled dot-product multi-head self-attention.
    ///
    /// `q`, `k`, `v` are `(batch * seq) x d` with the sequence of each
    /// example in consecutive rows; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let AttentionShape { batch, seq, heads } = shape;
        assert_eq!(qv.nrows(), batch * seq, "attention input rows must equal batch * seq");
        assert_eq!(d % heads, 0, "model dimension must be divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros((batch * seq, d));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let rows = b * seq..(b + 1) * seq;
                let qb = qv.slice(s![rows.clone(), cols.clone()]);
                let kb = kv.slice(s![rows.clone(), cols.clone()]);
                let vb = vv.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qb.dot(&kb.t()) * scale;
                for mut row in scores.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let s = row.sum();
                    row /= s;
                }
                let base = (b * heads + h) * seq * seq;
                probs[base..base + seq * seq].copy_from_slice(scores.as_slice().expect("contiguous"));
                out.slice_mut(s![rows, cols]).assign(&scores.dot(&vb));
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, shape, probs }, rg)
    }

    /// Attention probabilities of an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape must preserve element count");
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Tensor::from_shape_vec((rows, cols), data).expect("shape checked");
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    /// `n x m -> n x 1` sum over columns.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a]);
        self.push(v, Op::RowSum(a), rg)
    }

    /// Picks column `idx[i]` of row `i`, giving an `n x 1` result.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len());
        let v = Tensor::from_shape_fn((idx.len(), 1), |(i, _)| src[[i, idx[i]]]);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gather(a, idx.to_vec()), rg)
    }

    /// Mean of all entries as a `1 x 1` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Tensor::from_elem((1, 1), src.sum() / src.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar `loss` node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &gout);
            self.grads[i] = Some(gout);
        }
    }

    fn backward_node(&mut self, i: usize, gout: &Tensor) {
        // Ops are moved out temporarily so cached tensors can be borrowed
        // while gradients are accumulated into other nodes.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
        match &op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = gout.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(gout);
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::Add(a, b) => {
                self.acc(*a, gout.clone());
                self.acc(*b, gout.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(*a, gout.clone());
                self.acc(*row, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                self.acc(*a, gout.clone());
                self.acc(*b, -gout);
            }
            Op::Mul(a, b) => {
                let ga = gout * self.value(*b);
                let gb = gout * self.value(*a);
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::Scale(a, c) => self.acc(*a, gout * *c),
            Op::Relu(a) => {
                let mut g = gout.clone();
                Zip::from(&mut g).and(self.value(*a)).for_each(|g, x| {
                    if *x <= 0.0 {
                        *g = 0.0;
                    }
                });
                self.acc(*a, g);
            }
            Op::Tanh(a) => {
                let g = gout * &self.nodes[i].value.mapv(|y| 1.0 - y * y);
                self.acc(*a, g);
            }
            Op::Exp(a) => {
                let g = gout * &self.nodes[i].value;
                self.acc(*a, g);
            }
            Op::Softplus(a) => {
                let g = gout * &self.value(*a).mapv(sigmoid);
                self.acc(*a, g);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut g = gout * y;
                let dots = g.sum_axis(Axis(1));
                Zip::from(g.rows_mut()).and(y.rows()).and(&dots).for_each(|mut gr, yr, d| {
                    gr.zip_mut_with(&yr, |gv, yv| *gv -= yv * d);
                });
                self.acc(*a, g);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let sums = gout.sum_axis(Axis(1));
                let mut g = gout.clone();
                Zip::from(g.rows_mut()).and(y.rows()).and(&sums).for_each(|mut gr, yr, s| {
                    gr.zip_mut_with(&yr, |gv, yv| *gv -= yv.exp() * s);
                });
                self.acc(*a, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let d = xhat.ncols() as f64;
                let dxhat = gout * gv;
                let mut gx = Tensor::zeros(xhat.raw_dim());
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_dh = dh.sum();
                    let sum_dhx = dh.dot(&xh);
                    let is = inv_std[r];
                    Zip::from(&mut row).and(&dh).and(&xh).for_each(|o, a, b| {
                        *o = is / d * (d * a - sum_dh - b * sum_dhx);
                    });
                }
                let ggamma = (gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let gbeta = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(*x, gx);
                self.acc(*gamma, ggamma);
                self.acc(*beta, gbeta);
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    *shape,
                    gout,
                );
                self.acc(*q, gq);
                self.acc(*k, gk);
                self.acc(*v, gv);
            }
            Op::Reshape(a) => {
                let dim = self.value(*a).raw_dim();
                let data: Vec<f64> = gout.iter().copied().collect();
                self.acc(*a, Tensor::from_shape_vec(dim, data).expect("same size"));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    let g = gout.slice(s![.., start..start + w]).to_owned();
                    self.acc(*p, g);
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut g = Tensor::zeros(self.value(*a).raw_dim());
                let w = gout.ncols();
                g.slice_mut(s![.., *start..*start + w]).assign(gout);
                self.acc(*a, g);
            }
            Op::RowSum(a) => {
                let dim = self.value(*a).raw_dim();
                let mut g = Tensor::zeros(dim);
                for (mut row, go) in g.rows_mut().into_iter().zip(gout.column(0)) {
                    row.fill(*go);
                }
                self.acc(*a, g);
            }
            Op::Gather(a, idx) => {
                let mut g = Tensor::zeros(self.value(*a).raw_dim());
                for (r, c) in idx.iter().enumerate() {
                    g[[r, *c]] = gout[[r, 0]];
                }
                self.acc(*a, g);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let g = Tensor::from_elem(self.value(*a).raw_dim(), gout[[0, 0]] / n);
                self.acc(*a, g);
            }
        }
        self.nodes[i].op = op;
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter node, summed per parameter id.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|t| Tensor::zeros(t.raw_dim())).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads[i].as_ref()) {
                out[id.0] += g;
            }
        }
        out
    }
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    shape: AttentionShape,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let AttentionShape { batch, seq, heads } = shape;
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(q.raw_dim());
    let mut gk = Tensor::zeros(k.raw_dim());
    let mut gv = Tensor::zeros(v.raw_dim());
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let rows = b * seq..(b + 1) * seq;
            let base = (b * heads + h) * seq * seq;
            let p = ArrayView2::from_shape((seq, seq), &probs[base..base + seq * seq]).expect("shape");
            let go = gout.slice(s![rows.clone(), cols.clone()]);
            let qb = q.slice(s![rows.clone(), cols.clone()]);
            let kb = k.slice(s![rows.clone(), cols.clone()]);
            let vb = v.slice(s![rows.clone(), cols.clone()]);
            let dp = go.dot(&vb.t());
            gv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
            let mut ds = &dp * &p;
            let row_dots = ds.sum_axis(Axis(1));
            Zip::from(ds.rows_mut()).and(p.rows()).and(&row_dots).for_each(|mut r, pr, dot| {
                r.zip_mut_with(&pr, |x, pv| *x -= pv * dot);
            });
            ds *= scale;
            gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kb));
            gk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qb));
        }
    }
    (gq, gk, gv)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
