//! Digital twin: learned one-hour-ahead forecasters of the 6x12 window.

pub mod eval;
pub mod forecaster;
pub mod io;
pub mod mlp;
pub mod transformer;

pub use eval::{crps, map_trend, rollout_error_profile, twin_eval, Trend, TwinEvalReport};
pub use forecaster::{
    evaluate_mse, forecast, predict_z_batch, rollout, sample, split_indices, train_forecaster, Forecaster, TrainConfig,
    TrainLog,
};
pub use io::AnyTwin;
pub use mlp::{MlpForecaster, MlpParams};
pub use transformer::{TwinModel, TwinParams};
