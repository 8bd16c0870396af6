//! Exact toy-scale realizations of the training objectives and of the
//! stopping guarantees: tabular softmax policies, SFT and multi-step DPO
//! losses with analytic gradients, the Gibbs closed form, and probes of the
//! reward process on finite chains.

mod chain;
mod gibbs;
mod objectives;
mod policy;
pub mod probes;
pub mod random;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chain::{action_context, stopping_time_sim, submartingale_probe, ProbeReport, StateProbe, StoppingReport, ToyChain, Transition};
pub use gibbs::{gibbs_min_value, gibbs_optimum, grid_minimize_binary, kl_divergence, kl_objective};
pub use objectives::{
    analytic_gradient, finite_diff_gradient, max_relative_error, pair_margin, sdpo_gradient, sdpo_loss, sft_loss, sft_loss_gradient,
    sft_objective, sft_objective_gradient, toy_reward, toy_step_scores, train_sdpo, train_sft, Objective, TrainConfig, TrainOutcome,
};
pub use policy::{logsumexp, Gradient, PreferencePair, Segment, ToyPolicy, ToyTrajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("unknown context `{0}`")]
    UnknownContext(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at iteration {iteration}")]
    DivergenceDetected { iteration: usize },
    #[error("numerical overflow")]
    NumericalOverflow,
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// SFT instance file: initial policy, trajectories, and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftInstance {
    pub policy: ToyPolicy,
    pub dataset: Vec<ToyTrajectory>,
    #[serde(default)]
    pub config: TrainConfig,
}

/// Preference instance file: reference policy `φ₀`, pairs, settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpoInstance {
    pub reference: ToyPolicy,
    pub pairs: Vec<PreferencePair>,
    #[serde(default)]
    pub config: TrainConfig,
}

/// Gibbs instance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsInstance {
    pub p0: Vec<f64>,
    pub values: Vec<f64>,
    pub eta: f64,
}
