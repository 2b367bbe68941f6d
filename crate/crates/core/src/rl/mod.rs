//! Offline policy learning: shaped replay buffer, dynamics ensemble,
//! penalized model rollouts, discrete SAC and behavioral cloning.

pub mod buffer;
pub mod config;
pub mod ensemble;
pub mod rollout;
pub mod sac;
pub mod train;

pub use buffer::{build_shaped_buffer, shaped_raw_rewards, Batch, ReplayBuffer, ZTransition};
pub use config::{AlgoKind, OrlConfig};
pub use ensemble::{train_dynamics_ensemble, DynamicsEnsemble, EnsembleLog, MemberPrediction};
pub use rollout::{model_rollout, synthetic_reward, Penalty, RolloutEnv, RolloutStats};
pub use sac::{actor_loss, argmax_level, bc_update, critic_loss, sac_update, softmax_rows, Net, PolicyModel, SacAgent, SacStats};
pub use train::{train_policy, write_log_jsonl, EpochLog, TrainExtras, TrainOutput};
