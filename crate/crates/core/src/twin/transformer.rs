//! Transformer digital twin: self-attention over the six ten-minute
//! steps of the current hour, then a two-layer decoder that sees the
//! encoded history together with the requested P-level.

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureStats;
use crate::domain::{N_FEATURES, WINDOW_LEN, WINDOW_STEPS};
use crate::error::{invalid, Result};
use crate::nn::{dropout_mask, sinusoidal_encoding, AttentionShape, Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::rng::{rng_from, Rng};

use super::forecaster::Forecaster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinParams {
    pub n_encoder_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub decoder_hidden: usize,
    pub dropout_p: f64,
}

impl Default for TwinParams {
    fn default() -> Self {
        Self {
            n_encoder_layers: 3,
            n_heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            decoder_hidden: 128,
            dropout_p: 0.1,
        }
    }
}

impl TwinParams {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(invalid("model_dim must be a positive multiple of n_heads"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(invalid("dropout_p must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderBlock {
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinModel {
    pub params: TwinParams,
    pub stats: FeatureStats,
    store: ParamStore,
    embed: Linear,
    blocks: Vec<EncoderBlock>,
    final_ln: (ParamId, ParamId),
    dec_hidden: Linear,
    dec_out: Linear,
    positions: Tensor,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, dim: usize) -> (ParamId, ParamId) {
    (
        store.add_filled(format!("{name}.gamma"), 1, dim, 1.0),
        store.add_zeros(format!("{name}.beta"), 1, dim),
    )
}

impl TwinModel {
    /// Fresh model with Glorot-initialized weights and a zero output layer,
    /// so an untrained twin predicts the feature means.
    pub fn new(params: TwinParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = rng_from(seed);
        let d = params.model_dim;
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "embed", N_FEATURES, d, &mut rng);
        let blocks = (0..params.n_encoder_layers)
            .map(|i| {
                let name = format!("encoder.{i}");
                EncoderBlock {
                    ln1: layer_norm_params(&mut store, &format!("{name}.ln1"), d),
                    q: Linear::new(&mut store, &format!("{name}.q"), d, d, &mut rng),
                    k: Linear::new(&mut store, &format!("{name}.k"), d, d, &mut rng),
                    v: Linear::new(&mut store, &format!("{name}.v"), d, d, &mut rng),
                    out: Linear::new(&mut store, &format!("{name}.out"), d, d, &mut rng),
                    ln2: layer_norm_params(&mut store, &format!("{name}.ln2"), d),
                    ff1: Linear::new(&mut store, &format!("{name}.ff1"), d, params.ffn_dim, &mut rng),
                    ff2: Linear::new(&mut store, &format!("{name}.ff2"), params.ffn_dim, d, &mut rng),
                }
            })
            .collect();
        let final_ln = layer_norm_params(&mut store, "final_ln", d);
        let dec_hidden = Linear::new(&mut store, "decoder.0", WINDOW_STEPS * d + 1, params.decoder_hidden, &mut rng);
        let dec_out = Linear::zeroed(&mut store, "decoder.1", params.decoder_hidden, WINDOW_LEN);
        Ok(Self {
            params,
            stats: FeatureStats::default(),
            store,
            embed,
            blocks,
            final_ln,
            dec_hidden,
            dec_out,
            positions: sinusoidal_encoding(WINDOW_STEPS, d),
        })
    }

    /// Encoded history concatenated with the action column: `B x (6d + 1)`.
    fn encode(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, actions: &Tensor) -> Var {
        let batch = x.nrows();
        let d = self.params.model_dim;
        let tokens_in = g.input(
            x.to_shape((batch * WINDOW_STEPS, N_FEATURES)).expect("row-major window").to_owned(),
        );
        let mut h = self.embed.forward(g, store, tokens_in);
        let pos = g.input(tile_rows(&self.positions, batch));
        h = g.add(h, pos);
        let shape = AttentionShape { batch, seq: WINDOW_STEPS, heads: self.params.n_heads };
        for blk in &self.blocks {
            let (g1, b1) = (g.param(store, blk.ln1.0), g.param(store, blk.ln1.1));
            let n1 = g.layer_norm(h, g1, b1);
            let q = blk.q.forward(g, store, n1);
            let k = blk.k.forward(g, store, n1);
            let v = blk.v.forward(g, store, n1);
            let att = g.attention(q, k, v, shape);
            let att = blk.out.forward(g, store, att);
            h = g.add(h, att);
            let (g2, b2) = (g.param(store, blk.ln2.0), g.param(store, blk.ln2.1));
            let n2 = g.layer_norm(h, g2, b2);
            let f = blk.ff1.forward(g, store, n2);
            let f = g.relu(f);
            let f = blk.ff2.forward(g, store, f);
            h = g.add(h, f);
        }
        let (gf, bf) = (g.param(store, self.final_ln.0), g.param(store, self.final_ln.1));
        let h = g.layer_norm(h, gf, bf);
        let flat = g.reshape(h, batch, WINDOW_STEPS * d);
        let a = g.input(actions.clone());
        g.concat_cols(&[flat, a])
    }
}

fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let views: Vec<_> = (0..times).map(|_| t.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("same width")
}

impl Forecaster for TwinModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    fn set_stats(&mut self, stats: FeatureStats) {
        self.stats = stats;
    }

    fn dropout_p(&self) -> f64 {
        self.params.dropout_p
    }

    fn build(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, actions: &Tensor, masks: Option<&mut [Rng]>) -> Var {
        let enc = self.encode(g, store, x, actions);
        let mut h = self.dec_hidden.forward(g, store, enc);
        h = g.relu(h);
        if let Some(rngs) = masks {
            let width = self.params.decoder_hidden;
            let mut mask = Tensor::zeros((x.nrows(), width));
            for (mut row, rng) in mask.rows_mut().into_iter().zip(rngs.iter_mut()) {
                row.assign(&dropout_mask(1, width, self.params.dropout_p, rng).row(0));
            }
            let m = g.input(mask);
            h = g.mul(h, m);
        }
        self.dec_out.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PLevel, StateWindow};
    use crate::nn::check_gradients;
    use crate::twin::forecaster::{forecast, sample};

    fn window(seed: u64) -> StateWindow {
        let vals: Vec<f64> = (0..72).map(|i| ((i as f64 + seed as f64) * 0.37).sin() * 3.0 + 50.0).collect();
        StateWindow::from_flat(&vals).unwrap()
    }

    fn tiny() -> TwinParams {
        TwinParams { n_encoder_layers: 1, n_heads: 1, model_dim: 8, ffn_dim: 8, decoder_hidden: 8, dropout_p: 0.1 }
    }

    #[test]
    fn untrained_twin_predicts_feature_means() {
        let m = TwinModel::new(TwinParams::default(), 0).unwrap();
        let out = forecast(&m, &window(1), PLevel::new(5).unwrap(), false, 0).unwrap();
        assert!(out.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(TwinModel::new(TwinParams { model_dim: 10, n_heads: 4, ..Default::default() }, 0).is_err());
        assert!(TwinModel::new(TwinParams { dropout_p: 1.0, ..Default::default() }, 0).is_err());
    }

    fn perturbed_output(m: &mut TwinModel, seed: u64) {
        let mut rng = rng_from(seed);
        for t in m.store.iter_mut() {
            t.mapv_inplace(|v| v + 0.3 * (rand::Rng::random::<f64>(&mut rng) - 0.5));
        }
    }

    #[test]
    fn dropout_controls_determinism() {
        let mut m = TwinModel::new(TwinParams::default(), 3).unwrap();
        perturbed_output(&mut m, 3);
        let s = window(2);
        let a = PLevel::new(6).unwrap();
        assert_eq!(forecast(&m, &s, a, false, 1).unwrap(), forecast(&m, &s, a, false, 2).unwrap());
        let draws: Vec<Vec<f64>> = (0..50).map(|i| forecast(&m, &s, a, true, i).unwrap().to_flat()).collect();
        let distinct = draws.iter().filter(|d| **d != draws[0]).count();
        assert!(distinct >= 1);

        let samples = sample(&m, &s, a, 1, 9).unwrap();
        assert_eq!(samples.len(), 1);
        let mut no_drop = m.clone();
        no_drop.params.dropout_p = 0.0;
        let same = sample(&no_drop, &s, a, 10, 9).unwrap();
        assert!(same.iter().all(|w| *w == same[0]));
    }

    #[test]
    fn mc_mean_matches_deterministic_output() {
        let mut m = TwinModel::new(TwinParams::default(), 5).unwrap();
        perturbed_output(&mut m, 5);
        let s = window(4);
        let a = PLevel::new(3).unwrap();
        let n = 500;
        let draws: Vec<Vec<f64>> = sample(&m, &s, a, n, 77)
            .unwrap()
            .iter()
            .map(|w| m.stats.normalize(w).to_vec())
            .collect();
        let det = m.stats.normalize(&forecast(&m, &s, a, false, 0).unwrap());
        for j in 0..72 {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - det[j]).abs() <= 3.0 * se + 1e-12, "entry {j}: {mean} vs {}", det[j]);
        }
    }

    #[test]
    fn normalization_round_trip_is_exact() {
        let mut m = TwinModel::new(TwinParams::default(), 8).unwrap();
        perturbed_output(&mut m, 8);
        m.stats = FeatureStats { mean: [10.0; 12], std: [2.0; 12] };
        let s = window(6);
        let a = PLevel::new(7).unwrap();
        let x = crate::twin::forecaster::window_rows(&m.stats, &[&s]);
        let ac = crate::twin::forecaster::action_column(&[a]);
        let z = crate::twin::forecaster::predict_z_batch(&m, &x, &ac, None);
        let manual = m.stats.denormalize(z.as_slice().unwrap()).unwrap();
        assert_eq!(manual, forecast(&m, &s, a, false, 0).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = TwinModel::new(tiny(), 11).unwrap();
        perturbed_output(&mut m, 11);
        let x = Tensor::from_shape_fn((3, 72), |(i, j)| ((i * 72 + j) as f64 * 0.13).cos());
        let a = Tensor::from_shape_fn((3, 1), |(i, _)| i as f64 - 1.0);
        let y = Tensor::from_shape_fn((3, 72), |(i, j)| ((i + j) as f64 * 0.07).sin());
        let loss = |store: &ParamStore| -> (Graph, Var) {
            let mut g = Graph::new();
            let mut rngs: Vec<Rng> = (0..3).map(rng_from).collect();
            let pred = m.build(&mut g, store, &x, &a, Some(&mut rngs));
            let t = g.input(y.clone());
            let d = g.sub(pred, t);
            let sq = g.mul(d, d);
            let l = g.mean(sq);
            (g, l)
        };
        let (mut g, l) = loss(&m.store);
        g.backward(l);
        let grads = g.param_grads(&m.store);
        let report = check_gradients(&m.store, &grads, |s| { let (g, l) = loss(s); g.scalar(l) }, 1e-6, 1);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
