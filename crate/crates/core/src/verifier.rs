//! Trajectory reward from tuned/reference log-probability ratios, the
//! per-step stopping test, and Bradley–Terry preference probabilities.
//!
//! The reward of a trajectory is
//! `η · Σ_h [log V̂(t_h|s_h) − log V₀(t_h|s_h)] + η · Σ_h [log V̂(a_h|t_h) − log V₀(a_h|t_h)] + Q`,
//! with `Q` a per-question constant that cancels from every difference used
//! here. The stop test compares the *unscaled* step ratio against `ε`; the
//! `η` factor lives only in [`reward_delta`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifierError {
    #[error("step score is missing its action pair")]
    IncompleteScore,
    #[error("eta must be positive and finite, got {0}")]
    InvalidEta(f64),
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("score list does not match trajectory shape: {0}")]
    ShapeMismatch(String),
}

/// Tuned and reference log-probabilities for one planning and, unless it is
/// the final answer, the action that followed it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub planning_logprob_tuned: f64,
    pub planning_logprob_ref: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_logprob_tuned: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_logprob_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_final: bool,
}

impl StepScore {
    pub fn step(planning_tuned: f64, planning_ref: f64, action_tuned: f64, action_ref: f64) -> Self {
        Self {
            planning_logprob_tuned: planning_tuned,
            planning_logprob_ref: planning_ref,
            action_logprob_tuned: Some(action_tuned),
            action_logprob_ref: Some(action_ref),
            is_final: false,
        }
    }

    pub fn final_answer(planning_tuned: f64, planning_ref: f64) -> Self {
        Self {
            planning_logprob_tuned: planning_tuned,
            planning_logprob_ref: planning_ref,
            action_logprob_tuned: None,
            action_logprob_ref: None,
            is_final: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub eta: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub q_convention: f64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            epsilon: 0.5,
            q_convention: 0.0,
        }
    }
}

impl VerifierConfig {
    pub fn new(eta: f64, epsilon: f64) -> Result<Self, VerifierError> {
        let cfg = Self {
            eta,
            epsilon,
            q_convention: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), VerifierError> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(VerifierError::InvalidEta(self.eta));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(VerifierError::InvalidEpsilon(self.epsilon));
        }
        Ok(())
    }
}

/// Unscaled log-ratio of one step: planning term plus action term (zero for
/// the final answer).
pub fn step_log_ratio(score: &StepScore) -> Result<f64, VerifierError> {
    let planning = score.planning_logprob_tuned - score.planning_logprob_ref;
    let action = match (score.action_logprob_tuned, score.action_logprob_ref, score.is_final) {
        (Some(t), Some(r), _) => t - r,
        (None, None, true) => 0.0,
        _ => return Err(VerifierError::IncompleteScore),
    };
    Ok(planning + action)
}

/// Trajectory reward. Expects `H` tool-step scores followed by one
/// final-answer score; a prefix without the final entry scores the state
/// `s_{h+1}` reached so far.
pub fn reward(scores: &[StepScore], cfg: &VerifierConfig) -> Result<f64, VerifierError> {
    if let Some(pos) = scores.iter().position(|s| s.is_final) {
        if pos + 1 != scores.len() {
            return Err(VerifierError::ShapeMismatch(format!(
                "final-answer score at position {pos} of {}",
                scores.len()
            )));
        }
    }
    let mut sum = 0.0;
    for s in scores {
        sum += step_log_ratio(s)?;
    }
    Ok(cfg.eta * sum + cfg.q_convention)
}

/// `r(s_{h+1}) − r(s_h)`; `Q` cancels.
pub fn reward_delta(score: &StepScore, cfg: &VerifierConfig) -> Result<f64, VerifierError> {
    Ok(cfg.eta * step_log_ratio(score)?)
}

/// Stop when the unscaled step ratio is strictly inside `(−ε, ε)`.
pub fn should_stop(raw_ratio: f64, cfg: &VerifierConfig) -> bool {
    raw_ratio.abs() < cfg.epsilon
}

/// Bradley–Terry probability that the first trajectory is preferred.
pub fn preference_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
