//! Flattened-input MLP forecaster with MC dropout after every hidden layer.

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureStats;
use crate::domain::WINDOW_LEN;
use crate::error::{invalid, Result};
use crate::nn::{dropout_mask, Graph, Linear, ParamStore, Tensor, Var};
use crate::rng::{rng_from, Rng};

use super::forecaster::Forecaster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpParams {
    pub hidden: Vec<usize>,
    pub dropout_p: f64,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self { hidden: vec![512, 256, 128], dropout_p: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpForecaster {
    pub params: MlpParams,
    pub stats: FeatureStats,
    store: ParamStore,
    layers: Vec<Linear>,
}

impl MlpForecaster {
    pub fn new(params: MlpParams, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&params.dropout_p) {
            return Err(invalid("dropout_p must lie in [0, 1)"));
        }
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let mut sizes = vec![WINDOW_LEN + 1];
        sizes.extend(&params.hidden);
        let mut layers: Vec<Linear> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("mlp.{i}"), w[0], w[1], &mut rng))
            .collect();
        let last_in = *sizes.last().expect("input width");
        layers.push(Linear::zeroed(&mut store, &format!("mlp.{}", layers.len()), last_in, WINDOW_LEN));
        Ok(Self { params, stats: FeatureStats::default(), store, layers })
    }
}

impl Forecaster for MlpForecaster {
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

    fn build(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, actions: &Tensor, mut masks: Option<&mut [Rng]>) -> Var {
        let xi = g.input(x.clone());
        let ai = g.input(actions.clone());
        let mut h = g.concat_cols(&[xi, ai]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i == last {
                break;
            }
            h = g.relu(h);
            if let Some(rngs) = masks.as_deref_mut() {
                let width = layer.fan_out;
                let mut mask = Tensor::zeros((x.nrows(), width));
                for (mut row, rng) in mask.rows_mut().into_iter().zip(rngs.iter_mut()) {
                    row.assign(&dropout_mask(1, width, self.params.dropout_p, rng).row(0));
                }
                let m = g.input(mask);
                h = g.mul(h, m);
            }
        }
        h
    }
}
