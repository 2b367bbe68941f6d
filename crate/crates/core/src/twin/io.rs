//! Either twin architecture behind one type, plus checkpoint I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{pack_store, unpack_meta, unpack_store, Container, MAGIC_TWIN};
use crate::dataset::FeatureStats;
use crate::error::Result;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::rng::Rng;

use super::forecaster::Forecaster;
use super::mlp::{MlpForecaster, MlpParams};
use super::transformer::{TwinModel, TwinParams};

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTwin {
    Transformer(TwinModel),
    Mlp(MlpForecaster),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TwinMeta {
    Transformer { params: TwinParams, stats: FeatureStats },
    Mlp { params: MlpParams, stats: FeatureStats },
}

impl AnyTwin {
    fn inner(&self) -> &dyn Forecaster {
        match self {
            AnyTwin::Transformer(m) => m,
            AnyTwin::Mlp(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Forecaster {
        match self {
            AnyTwin::Transformer(m) => m,
            AnyTwin::Mlp(m) => m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnyTwin::Transformer(_) => "transformer",
            AnyTwin::Mlp(_) => "mlp",
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = match self {
            AnyTwin::Transformer(m) => TwinMeta::Transformer { params: m.params, stats: m.stats },
            AnyTwin::Mlp(m) => TwinMeta::Mlp { params: m.params.clone(), stats: m.stats },
        };
        pack_store(MAGIC_TWIN, &meta, self.store())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut twin = match unpack_meta::<TwinMeta>(c)? {
            TwinMeta::Transformer { params, stats } => {
                let mut m = TwinModel::new(params, 0)?;
                m.stats = stats;
                AnyTwin::Transformer(m)
            }
            TwinMeta::Mlp { params, stats } => {
                let mut m = MlpForecaster::new(params, 0)?;
                m.stats = stats;
                AnyTwin::Mlp(m)
            }
        };
        unpack_store(c, twin.store_mut())?;
        Ok(twin)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, MAGIC_TWIN)?)
    }
}

impl Forecaster for AnyTwin {
    fn store(&self) -> &ParamStore {
        self.inner().store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().store_mut()
    }

    fn stats(&self) -> &FeatureStats {
        self.inner().stats()
    }

    fn set_stats(&mut self, stats: FeatureStats) {
        self.inner_mut().set_stats(stats)
    }

    fn dropout_p(&self) -> f64 {
        self.inner().dropout_p()
    }

    fn build(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, actions: &Tensor, masks: Option<&mut [Rng]>) -> Var {
        self.inner().build(g, store, x, actions, masks)
    }
}
