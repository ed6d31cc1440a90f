//! Numerical laboratory for one-layer softmax attention trained by gradient
//! descent on in-context regression prompts.
//!
//! The model maps a prompt of N labelled tokens plus a query token to
//! ŷ = ν·Σ_i softmax(x_iᵀ Q x_query)·y_i. The crate provides feature/task/prompt
//! generators, the forward pass and exact gradients, a finite-difference
//! oracle, a Monte-Carlo GD trainer with trajectory logging and phase
//! detection, and parameter sweeps with log-log scaling fits.
//!
//! Model and gradient code is generic over [`Scalar`] (f32 or f64); the
//! samplers, trainer and sweeps run in f64.

pub mod error;
pub mod experiments;
pub mod features;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod scalar;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
pub use features::{make_features, FeatureMode, FeatureSet};
pub use grad::{
    analytic_grad, fd_oracle, population_grad, projected_grad, GradRecord, PopulationGradEstimate,
    ProjectedGrad,
};
pub use model::{bilinear_weights, forward, loss_identity_residual, AttentionOutput, AttentionState};
pub use prompt::{concentration_check, sample_prompt, ConcentrationReport, Prompt, PromptConfig};
pub use scalar::Scalar;
pub use task::{sample_task, TaskFamily, TaskFunction, TaskSpec};

pub type FeatureSetF32 = FeatureSet<f32>;
pub type FeatureSetF64 = FeatureSet<f64>;
pub type PromptF32 = Prompt<f32>;
pub type PromptF64 = Prompt<f64>;
pub type TaskFunctionF32 = TaskFunction<f32>;
pub type TaskFunctionF64 = TaskFunction<f64>;
pub type AttentionStateF32 = AttentionState<f32>;
pub type AttentionStateF64 = AttentionState<f64>;
pub type AttentionOutputF32 = AttentionOutput<f32>;
pub type AttentionOutputF64 = AttentionOutput<f64>;
pub type GradRecordF32 = GradRecord<f32>;
pub type GradRecordF64 = GradRecord<f64>;

/// Version string recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
