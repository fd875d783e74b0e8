//! Flow-map learning on low-dimensional toy problems.
//!
//! A flow map `F(x; t, s)` parameterizes the jump `x_t -> x_s` of a probability-flow
//! ODE through `f = (A'_{t,s} x_t - A_{t,s} F) / nu`. This crate provides the
//! interpolants, analytic mixture oracles, a small MLP with exact JVPs and
//! reverse-mode through the tangent, the family of self-distillation objectives,
//! a trainer, few-step samplers and loss-landscape diagnostics.

pub mod error;
pub mod interpolant;
pub mod fieldnet;
pub mod mixture;
pub mod objectives;
pub mod sampler;
pub mod trainer;
pub mod diagnostics;
pub mod presets;

pub use error::{Error, Result};
pub use interpolant::{BridgeCoeffs, Interpolant, InterpolantKind, Schedule};
pub use fieldnet::{BoundNet, Field, FieldNet, FieldNetConfig, GradTape, Inputs, Tangent, NULL_LABEL};
pub use mixture::{batch_marginal_velocity, GaussianMixture, OracleField, PosteriorStats};
pub use objectives::{
    evaluate_loss, flow_map, Guiding, JvpMode, LossBatch, LossConfig, LossContext, LossOutput, LossTerms, Objective,
    Weighting,
};
pub use sampler::{few_step_sample, post_cfg_sample, Conditioning, SampleSchedule};
pub use trainer::{
    evaluate_metrics, frozen_landscape, run_experiment, sample_times, train_step, MetricsRecord, RunResult, SMode, TimeDist, TrainConfig, TrainState,
};
pub use diagnostics::{ed_proxy, energy_distance, grad_norm_trace, landscape_probe, LandscapeReport, LandscapeSettings};

/// Smallest normalized time reached by samplers and flow-map targets.
pub const T_MIN: f64 = 1e-3;
