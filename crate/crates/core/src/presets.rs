//! Settings for the toy reproduction runs.
//!
//! The library defaults describe the full-width field network. The toy runs use
//! a narrower network with fewer time frequencies so a 5000-step run fits in
//! well under two minutes on one core.

use crate::fieldnet::FieldNetConfig;
use crate::objectives::{LossConfig, Objective};
use crate::trainer::{SMode, TrainConfig};

pub const TOY_HIDDEN: usize = 32;
pub const TOY_NUM_FREQS: usize = 4;

pub fn toy_net() -> FieldNetConfig {
    FieldNetConfig { hidden: TOY_HIDDEN, num_freqs: TOY_NUM_FREQS, ..Default::default() }
}

/// Default training settings for `objective` with the given batch size and seed.
pub fn toy_train(objective: Objective, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig { loss: LossConfig::with_objective(objective), batch_size, seed, ..Default::default() }
}

/// One-step consistency training with `s` pinned to the data end.
pub fn toy_train_s_zero(objective: Objective, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig { s_mode: SMode::Zero, ..toy_train(objective, batch_size, seed) }
}
