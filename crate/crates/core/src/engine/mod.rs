//! The plan → act → observe → verify loop.
//!
//! At step `h` the reasoner sees the rendered state `s_h` and replies with a
//! planning text followed by one fenced action block. The action is run
//! through the toolbox, the new step is scored by the tuned and reference
//! verifiers, and the loop exits once the unscaled step log-ratio falls
//! strictly inside `(−ε, ε)` or `max_steps` is reached. The final answer is
//! generated after the loop.

mod ingest;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{load_benchmark, BenchmarkItem, IngestError};

use crate::gateway::{DecodeConfig, Gateway, GatewayError, GenerateRequest, ModelHandle, ModelRole, Purpose};
use crate::image::ImageStore;
use crate::toolbox::{directive, execute, ActionKind, DirectiveError, ToolBackend, ToolError};
use crate::trajectory::{InitialState, ObservationPayload, ReasoningStep, State, Trajectory};
use crate::verifier::{self, StepScore, VerifierConfig, VerifierError};

pub const DEFAULT_SYSTEM_PROMPT: &str = "You answer questions about images. At each step, write a short \
planning text describing how to manipulate the image, then exactly one action block:\n\
```action\n<Action> key=value ...\n```\n\
Available actions: Grounding, Depth, ZoomIn, Crop, OCR, ImageSegment, ImageCaptioner, \
SimilarityComputing, Sketch, Overlay. Image arguments accept `input`, `input:N`, `last`, or an image id.";

const STEP_INSTRUCTION: &str = "Write the planning for the next step followed by one action block.";
const FINAL_INSTRUCTION: &str = "Write the final answer.";

/// Scoring context for the action term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionContext {
    /// `V(a_h | t_h)`, conditioning on the planning text alone.
    #[default]
    PlanningOnly,
    /// Rendered `s_h` followed by the planning text.
    FullHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub verifier: VerifierConfig,
    pub max_steps: usize,
    pub reasoner_decode: DecodeConfig,
    pub action_context: ActionContext,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            verifier: VerifierConfig::default(),
            max_steps: 10,
            reasoner_decode: DecodeConfig::default(),
            action_context: ActionContext::PlanningOnly,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.verifier.validate()?;
        if self.max_steps == 0 {
            return Err(EngineError::InvalidMaxSteps);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error("max_steps must be at least 1")]
    InvalidMaxSteps,
    #[error("initial state has no image")]
    NoImage,
    #[error("verifier handles must have roles verifier_tuned and verifier_reference")]
    VerifierRoles,
}

/// Failure of a single step; aborts the episode.
#[derive(Debug, Error)]
pub enum StepError {
    #[error("model failure: {0}")]
    Model(#[from] GatewayError),
    #[error("action directive: {0}")]
    Directive(#[from] DirectiveError),
    #[error("tool {action:?} failed: {source}")]
    Tool { action: ActionKind, source: ToolError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    VerifierStop,
    MaxSteps,
    ModelError,
    ToolError,
    /// Ungated rollouts only: the reasoner answered instead of acting.
    AnswerEmitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub trajectory: Trajectory,
    pub scores: Vec<StepScore>,
    pub raw_ratios: Vec<f64>,
    pub deltas: Vec<f64>,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl EpisodeReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Placeholder used for image observations in rendered contexts.
pub fn image_placeholder(image_ref: &str) -> String {
    format!("<image:{image_ref}>")
}

/// Deterministic text rendering of `s_h`.
pub fn render_context(state: &State) -> String {
    let mut out = String::new();
    out.push_str("[system]\n");
    out.push_str(&state.initial.system_prompt);
    out.push_str("\n[question]\n");
    out.push_str(&state.initial.question);
    out.push('\n');
    for r in &state.initial.image_refs {
        out.push_str(&image_placeholder(r));
        out.push('\n');
    }
    if !state.history.is_empty() {
        out.push_str("[history]\n");
    }
    for (i, step) in state.history.iter().enumerate() {
        out.push_str(&format!("[step {}]\n", i + 1));
        out.push_str(&step.planning);
        out.push('\n');
        if let Some(a) = &step.action {
            out.push_str(&directive::render(a));
            out.push('\n');
        }
        if let Some(o) = &step.observation {
            out.push_str("[observation]\n");
            match &o.payload {
                ObservationPayload::Image { image_ref } => out.push_str(&image_placeholder(image_ref)),
                ObservationPayload::Text { text } => out.push_str(text),
                ObservationPayload::Structured { value } => out.push_str(&value.to_string()),
            }
            out.push('\n');
        }
    }
    out
}

fn prompt(state: &State, instruction: &str, hint: Option<&str>) -> String {
    let mut p = render_context(state);
    p.push_str("[instruction]\n");
    p.push_str(instruction);
    if let Some(h) = hint {
        p.push('\n');
        p.push_str(h);
    }
    p.push('\n');
    p
}

#[derive(Debug, Clone)]
pub struct VerifierPair {
    pub tuned: ModelHandle,
    pub reference: ModelHandle,
}

impl VerifierPair {
    pub fn new(tuned: ModelHandle, reference: ModelHandle) -> Result<Self, EngineError> {
        if tuned.role != ModelRole::VerifierTuned || reference.role != ModelRole::VerifierReference {
            return Err(EngineError::VerifierRoles);
        }
        Ok(Self { tuned, reference })
    }
}

/// Options for an ungated rollout, used by data generation and error
/// induction.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    /// Continue as an error-induction attempt.
    pub induced_attempt: Option<u32>,
    /// Extra instruction appended to every prompt.
    pub hint: Option<String>,
}

/// Shared, thread-safe runtime: gateway, models, toolbox.
#[derive(Clone)]
pub struct Engine {
    pub gateway: Arc<Gateway>,
    pub reasoner: ModelHandle,
    pub verifier: Option<VerifierPair>,
    pub store: Arc<ImageStore>,
    pub tools: Arc<ToolBackend>,
    pub cfg: EngineConfig,
}

enum StepPurpose<'a> {
    Gated,
    Rollout { first_index: usize, opts: &'a Rollout },
}

impl Engine {
    fn generate(
        &self,
        handle: &ModelHandle,
        state: &State,
        purpose: Purpose,
        attempt: u32,
        hint: Option<&str>,
    ) -> Result<String, GatewayError> {
        let instruction = match purpose {
            Purpose::FinalAnswer | Purpose::InducedFinal => FINAL_INSTRUCTION,
            _ => STEP_INSTRUCTION,
        };
        let req = GenerateRequest {
            prompt: prompt(state, instruction, hint),
            question: state.initial.question.clone(),
            purpose,
            attempt,
        };
        self.gateway.generate(handle, &req, &self.cfg.reasoner_decode)
    }

    fn act(&self, state: &State, text: &str) -> Result<(ReasoningStep, State), StepError> {
        let (planning, inv) = directive::parse(text)?;
        let resolved = inv.resolve_images(state).map_err(|source| StepError::Tool {
            action: inv.action,
            source,
        })?;
        let observation = execute(&resolved, &self.store, &self.tools).map_err(|source| StepError::Tool {
            action: inv.action,
            source,
        })?;
        let step = ReasoningStep::new(planning, inv, observation);
        let next = state.advanced(step.clone());
        Ok((step, next))
    }

    /// One planning/action/observation cycle: `s_{h+1} = (s_h, t_h, a_h, o_h)`.
    pub fn step_once(&self, state: &State) -> Result<(ReasoningStep, State), StepError> {
        let text = self.generate(&self.reasoner, state, Purpose::Step { index: state.step_index() }, 0, None)?;
        self.act(state, &text)
    }

    /// Tuned and reference scores of a freshly produced step.
    pub fn score_step(&self, pair: &VerifierPair, state: &State, step: &ReasoningStep) -> Result<StepScore, GatewayError> {
        let ctx = render_context(state);
        let action_text = step.action.as_ref().map(directive::render).unwrap_or_default();
        let action_ctx = match self.cfg.action_context {
            ActionContext::PlanningOnly => step.planning.clone(),
            ActionContext::FullHistory => format!("{ctx}{}\n", step.planning),
        };
        let g = &self.gateway;
        Ok(StepScore::step(
            g.score_sequence(&pair.tuned, &ctx, &step.planning)?,
            g.score_sequence(&pair.reference, &ctx, &step.planning)?,
            g.score_sequence(&pair.tuned, &action_ctx, &action_text)?,
            g.score_sequence(&pair.reference, &action_ctx, &action_text)?,
        ))
    }

    /// Verifier-gated episode from `s_1`.
    pub fn run_episode(&self, initial: InitialState) -> Result<EpisodeReport, EngineError> {
        self.cfg.validate()?;
        let pair = self.verifier.clone().ok_or(EngineError::VerifierRoles)?;
        VerifierPair::new(pair.tuned.clone(), pair.reference.clone())?;
        if initial.image_refs.is_empty() {
            return Err(EngineError::NoImage);
        }
        Ok(self.run_loop(State::new(initial), &self.reasoner, Some(&pair), StepPurpose::Gated))
    }

    /// Ungated rollout: keeps acting until the model answers without an
    /// action block or `max_steps` is reached.
    pub fn rollout(&self, state: State, handle: &ModelHandle, opts: &Rollout) -> EpisodeReport {
        let first_index = state.step_index();
        self.run_loop(state, handle, None, StepPurpose::Rollout { first_index, opts })
    }

    fn run_loop(&self, mut state: State, handle: &ModelHandle, pair: Option<&VerifierPair>, mode: StepPurpose<'_>) -> EpisodeReport {
        let mut report = EpisodeReport {
            trajectory: Trajectory::from_state(&state),
            scores: Vec::new(),
            raw_ratios: Vec::new(),
            deltas: Vec::new(),
            stop_reason: StopReason::MaxSteps,
            failure: None,
        };
        let (attempt, hint) = match &mode {
            StepPurpose::Rollout { opts, .. } => (opts.induced_attempt.unwrap_or(0), opts.hint.as_deref()),
            StepPurpose::Gated => (0, None),
        };
        let final_purpose = match &mode {
            StepPurpose::Rollout { opts, .. } if opts.induced_attempt.is_some() => Purpose::InducedFinal,
            _ => Purpose::FinalAnswer,
        };
        let abort = |mut report: EpisodeReport, state: &State, reason, failure| {
            report.trajectory = Trajectory::from_state(state).abort().expect("fresh trajectory is in progress");
            report.stop_reason = reason;
            report.failure = Some(failure);
            report
        };

        let mut answered = None;
        let mut taken = 0;
        while taken < self.cfg.max_steps {
            let purpose = match &mode {
                StepPurpose::Rollout { first_index, opts } if opts.induced_attempt.is_some() => Purpose::InducedStep {
                    offset: state.step_index() - first_index,
                },
                _ => Purpose::Step { index: state.step_index() },
            };
            let text = match self.generate(handle, &state, purpose, attempt, hint) {
                Ok(t) => t,
                Err(e) => return abort(report, &state, StopReason::ModelError, failure("generate", &e, None)),
            };
            if matches!(mode, StepPurpose::Rollout { .. }) && !directive::has_directive(&text) {
                answered = Some(text.trim().to_string());
                report.stop_reason = StopReason::AnswerEmitted;
                break;
            }
            let (step, next) = match self.act(&state, &text) {
                Ok(v) => v,
                Err(StepError::Model(e)) => return abort(report, &state, StopReason::ModelError, failure("generate", &e, None)),
                Err(StepError::Directive(e)) => return abort(report, &state, StopReason::ToolError, failure("directive", &e, None)),
                Err(StepError::Tool { action, source }) => {
                    return abort(report, &state, StopReason::ToolError, failure("tool", &source, Some(action)))
                }
            };
            taken += 1;
            if let Some(pair) = pair {
                let score = match self.score_step(pair, &state, &step) {
                    Ok(s) => s,
                    Err(e) => return abort(report, &state, StopReason::ModelError, failure("score", &e, None)),
                };
                let raw = verifier::step_log_ratio(&score).expect("complete score");
                report.scores.push(score);
                report.raw_ratios.push(raw);
                report.deltas.push(self.cfg.verifier.eta * raw);
                state = next;
                if verifier::should_stop(raw, &self.cfg.verifier) {
                    report.stop_reason = StopReason::VerifierStop;
                    break;
                }
            } else {
                state = next;
            }
        }

        let answer = match answered {
            Some(a) => a,
            None => match self.generate(handle, &state, final_purpose, attempt, hint) {
                Ok(t) => t.trim().to_string(),
                Err(e) => return abort(report, &state, StopReason::ModelError, failure("final_answer", &e, None)),
            },
        };
        report.trajectory = Trajectory::from_state(&state)
            .finalize(answer)
            .expect("fresh trajectory is in progress");
        report
    }

    /// Runs episodes on at most `jobs` worker threads; results keep input order.
    pub fn run_batch(&self, inputs: &[InitialState], jobs: usize) -> Vec<Result<EpisodeReport, EngineError>> {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| inputs.par_iter().map(|s| self.run_episode(s.clone())).collect())
    }
}

fn failure(stage: &str, err: &dyn std::fmt::Display, action: Option<ActionKind>) -> Failure {
    Failure {
        stage: stage.to_string(),
        message: err.to_string(),
        action,
    }
}
