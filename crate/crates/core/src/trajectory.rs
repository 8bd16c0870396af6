//! Trajectory data model: the alternating planning / action / observation
//! record of one episode, closed by a final answer.
//!
//! A completed trajectory with `H` tool steps carries `H + 1` plannings (the
//! last one is the final answer), `H` actions and `H` observations. `H = 0`
//! means the model answered without using a tool.
//!
//! # On-disk format
//!
//! One JSON object per line, tagged with `"version": 1`:
//!
//! ```json
//! {"version":1,
//!  "initial":{"question":"...","image_refs":["<sha256>"],"system_prompt":"..."},
//!  "steps":[{"planning":"...",
//!            "action":{"action":"Crop","arguments":{"image":"input","x":"0"}},
//!            "observation":{"produced_by":"Crop","kind":"image","image_ref":"<sha256>"}}],
//!  "final_answer":"...",
//!  "status":"completed"}
//! ```
//!
//! Observation kinds are `image` (`image_ref`), `text` (`text`) and
//! `structured` (`value`, any JSON). Unknown top-level fields are kept and
//! written back unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::image::ImageStore;
use crate::toolbox::{directive, ActionKind, ToolInvocation};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("cannot append a step to a {0:?} trajectory")]
    AppendToCompleted(TrajectoryStatus),
    #[error("trajectory is already {0:?}")]
    AlreadyFinalized(TrajectoryStatus),
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("tokenizer failure: {0}")]
    TokenizerFailure(String),
}

/// `s_1`: the question, its images, and the system prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub question: String,
    pub image_refs: Vec<String>,
    #[serde(default)]
    pub system_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationPayload {
    Image { image_ref: String },
    Text { text: String },
    Structured { value: Value },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub produced_by: ActionKind,
    #[serde(flatten)]
    pub payload: ObservationPayload,
}

impl Observation {
    pub fn image(produced_by: ActionKind, image_ref: impl Into<String>) -> Self {
        Self {
            produced_by,
            payload: ObservationPayload::Image {
                image_ref: image_ref.into(),
            },
        }
    }

    pub fn text(produced_by: ActionKind, text: impl Into<String>) -> Self {
        Self {
            produced_by,
            payload: ObservationPayload::Text { text: text.into() },
        }
    }

    pub fn structured(produced_by: ActionKind, value: Value) -> Self {
        Self {
            produced_by,
            payload: ObservationPayload::Structured { value },
        }
    }

    pub fn image_ref(&self) -> Option<&str> {
        match &self.payload {
            ObservationPayload::Image { image_ref } => Some(image_ref),
            _ => None,
        }
    }
}

/// One `(planning, action, observation)` triple. The optional fields exist
/// so that documents read from disk can be checked; steps built in-process
/// are always complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub planning: String,
    pub action: Option<ToolInvocation>,
    pub observation: Option<Observation>,
}

impl ReasoningStep {
    pub fn new(planning: impl Into<String>, action: ToolInvocation, observation: Observation) -> Self {
        Self {
            planning: planning.into(),
            action: Some(action),
            observation: Some(observation),
        }
    }

    pub fn is_complete(&self) -> bool {
        match (&self.action, &self.observation) {
            (Some(a), Some(o)) => !self.planning.trim().is_empty() && a.action == o.produced_by,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    InProgress,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", content = "step", rename_all = "snake_case")]
pub enum Violation {
    /// 1-based index of a step with a missing or inconsistent field.
    MalformedStep(usize),
    /// A final answer is present on a trajectory that is not completed.
    PrematureAnswer,
    MissingAnswer,
    UnsupportedVersion(u32),
}

/// `s_h`: the initial state plus the `h − 1` completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub initial: InitialState,
    pub history: Vec<ReasoningStep>,
}

impl State {
    pub fn new(initial: InitialState) -> Self {
        Self {
            initial,
            history: Vec::new(),
        }
    }

    /// The 1-based index `h` of the step about to be taken.
    pub fn step_index(&self) -> usize {
        self.history.len() + 1
    }

    pub fn advanced(&self, step: ReasoningStep) -> State {
        let mut next = self.clone();
        next.history.push(step);
        next
    }

    /// Most recent image: the last image observation, else the first input image.
    pub fn latest_image(&self) -> Option<&str> {
        self.history
            .iter()
            .rev()
            .filter_map(|s| s.observation.as_ref().and_then(Observation::image_ref))
            .next()
            .or_else(|| self.initial.image_refs.first().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub version: u32,
    pub initial: InitialState,
    #[serde(default)]
    pub steps: Vec<ReasoningStep>,
    #[serde(default)]
    pub final_answer: Option<String>,
    pub status: TrajectoryStatus,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Trajectory {
    pub fn new(initial: InitialState) -> Self {
        Self {
            version: SCHEMA_VERSION,
            initial,
            steps: Vec::new(),
            final_answer: None,
            status: TrajectoryStatus::InProgress,
            extra: BTreeMap::new(),
        }
    }

    pub fn from_state(state: &State) -> Self {
        let mut t = Self::new(state.initial.clone());
        t.steps = state.history.clone();
        t
    }

    pub fn state(&self) -> State {
        State {
            initial: self.initial.clone(),
            history: self.steps.clone(),
        }
    }

    /// `H_τ`, the number of tool steps.
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Planning texts including the final answer when present.
    pub fn plannings(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.planning.as_str()).chain(self.final_answer.as_deref())
    }

    pub fn append_step(mut self, step: ReasoningStep) -> Result<Self, TrajectoryError> {
        if self.status != TrajectoryStatus::InProgress {
            return Err(TrajectoryError::AppendToCompleted(self.status));
        }
        self.steps.push(step);
        Ok(self)
    }

    pub fn finalize(mut self, answer: impl Into<String>) -> Result<Self, TrajectoryError> {
        if self.status != TrajectoryStatus::InProgress {
            return Err(TrajectoryError::AlreadyFinalized(self.status));
        }
        self.final_answer = Some(answer.into());
        self.status = TrajectoryStatus::Completed;
        Ok(self)
    }

    pub fn abort(mut self) -> Result<Self, TrajectoryError> {
        if self.status != TrajectoryStatus::InProgress {
            return Err(TrajectoryError::AlreadyFinalized(self.status));
        }
        self.status = TrajectoryStatus::Aborted;
        Ok(self)
    }

    /// Checks the counting invariant and per-step completeness.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.version != SCHEMA_VERSION {
            out.push(Violation::UnsupportedVersion(self.version));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if !step.is_complete() {
                out.push(Violation::MalformedStep(i + 1));
            }
        }
        match (self.status, &self.final_answer) {
            (TrajectoryStatus::Completed, None) => out.push(Violation::MissingAnswer),
            (TrajectoryStatus::Completed, Some(a)) if a.trim().is_empty() => out.push(Violation::MissingAnswer),
            (TrajectoryStatus::InProgress | TrajectoryStatus::Aborted, Some(_)) => out.push(Violation::PrematureAnswer),
            _ => {}
        }
        out
    }

    /// Image refs used anywhere in the trajectory, in order of appearance.
    pub fn image_refs(&self) -> Vec<&str> {
        let mut refs: Vec<&str> = self.initial.image_refs.iter().map(String::as_str).collect();
        refs.extend(
            self.steps
                .iter()
                .filter_map(|s| s.observation.as_ref().and_then(Observation::image_ref)),
        );
        refs
    }

    /// Image refs that do not resolve in `store`, plus a marker for an
    /// initial state without any image.
    pub fn missing_images(&self, store: &ImageStore) -> Vec<String> {
        let mut missing: Vec<String> = self
            .image_refs()
            .into_iter()
            .filter(|r| r.is_empty() || !store.contains(r))
            .map(str::to_string)
            .collect();
        if self.initial.image_refs.is_empty() {
            missing.push(String::new());
        }
        missing
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("trajectory serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, TrajectoryError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let traj: Trajectory = serde_path_to_error::deserialize(de).map_err(|e| TrajectoryError::SchemaViolation {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if traj.version != SCHEMA_VERSION {
            return Err(TrajectoryError::SchemaViolation {
                path: "version".into(),
                message: format!("unsupported version {}", traj.version),
            });
        }
        if traj.status == TrajectoryStatus::Completed && traj.final_answer.is_none() {
            return Err(TrajectoryError::SchemaViolation {
                path: "final_answer".into(),
                message: "required when status is completed".into(),
            });
        }
        Ok(traj)
    }
}

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> Result<usize, TrajectoryError>;
}

/// Counts whitespace-separated words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl TokenCounter for WhitespaceTokenizer {
    fn count(&self, text: &str) -> Result<usize, TrajectoryError> {
        Ok(text.split_whitespace().count())
    }
}

/// Token total over plannings (final answer included), rendered action
/// directives, and text/structured observations. Each image observation
/// adds `per_image_cost`.
pub fn token_count(traj: &Trajectory, tokenizer: &dyn TokenCounter, per_image_cost: usize) -> Result<usize, TrajectoryError> {
    let mut total = 0;
    for p in traj.plannings() {
        total += tokenizer.count(p)?;
    }
    for step in &traj.steps {
        if let Some(a) = &step.action {
            total += tokenizer.count(&directive::render(a))?;
        }
        match step.observation.as_ref().map(|o| &o.payload) {
            Some(ObservationPayload::Text { text }) => total += tokenizer.count(text)?,
            Some(ObservationPayload::Structured { value }) => total += tokenizer.count(&value.to_string())?,
            Some(ObservationPayload::Image { .. }) => total += per_image_cost,
            None => {}
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolbox::ToolInvocation;

    fn initial() -> InitialState {
        InitialState {
            question: "What does the sign say?".into(),
            image_refs: vec!["ab".repeat(32)],
            system_prompt: "You are careful.".into(),
        }
    }

    fn ocr_step(text: &str) -> ReasoningStep {
        ReasoningStep::new(
            "read the sign",
            ToolInvocation::new(ActionKind::Ocr, [("image", "input")]),
            Observation::text(ActionKind::Ocr, text),
        )
    }

    #[test]
    fn append_then_finalize_counts() {
        let t = Trajectory::new(initial())
            .append_step(ocr_step("a"))
            .unwrap()
            .append_step(ocr_step("b"))
            .unwrap()
            .append_step(ocr_step("c"))
            .unwrap();
        assert_eq!(
            t.steps[1].observation.as_ref().unwrap().payload,
            ObservationPayload::Text { text: "b".into() }
        );
        let t = t.finalize("STOP").unwrap();
        assert_eq!(t.horizon(), 3);
        assert_eq!(t.plannings().count(), 4);
        assert_eq!(t.steps.iter().filter(|s| s.action.is_some()).count(), 3);
        assert!(t.validate().is_empty());
    }

    #[test]
    fn no_tool_trajectory() {
        let t = Trajectory::new(initial()).finalize("42").unwrap();
        assert_eq!(t.horizon(), 0);
        assert_eq!(t.plannings().count(), 1);
    }

    #[test]
    fn completed_rejects_append_and_refinalize() {
        let t = Trajectory::new(initial()).finalize("x").unwrap();
        assert_eq!(
            t.clone().append_step(ocr_step("a")).unwrap_err(),
            TrajectoryError::AppendToCompleted(TrajectoryStatus::Completed)
        );
        assert_eq!(
            t.finalize("y").unwrap_err(),
            TrajectoryError::AlreadyFinalized(TrajectoryStatus::Completed)
        );
    }

    #[test]
    fn validate_flags_missing_observation() {
        let mut t = Trajectory::new(initial())
            .append_step(ocr_step("a"))
            .unwrap()
            .append_step(ocr_step("b"))
            .unwrap()
            .finalize("x")
            .unwrap();
        t.steps[1].observation = None;
        assert_eq!(t.validate(), vec![Violation::MalformedStep(2)]);
    }

    #[test]
    fn validate_flags_premature_answer() {
        let mut t = Trajectory::new(initial());
        t.final_answer = Some("early".into());
        assert_eq!(t.validate(), vec![Violation::PrematureAnswer]);
    }

    #[test]
    fn token_count_sums_segments() {
        assert_eq!(token_count(&Trajectory::new(initial()), &WhitespaceTokenizer, 0).unwrap(), 0);
        let step = ReasoningStep::new(
            "one two three four five",
            ToolInvocation::new(ActionKind::Ocr, [("image", "input")]),
            Observation::image(ActionKind::Ocr, "ff"),
        );
        let t = Trajectory::new(initial())
            .append_step(step)
            .unwrap()
            .finalize("a b c d e f g h")
            .unwrap();
        // directive renders as "```action", "OCR", "image=input", "```" -> 4 words
        assert_eq!(token_count(&t, &WhitespaceTokenizer, 0).unwrap(), 5 + 4 + 8);
        assert_eq!(token_count(&t, &WhitespaceTokenizer, 100).unwrap(), 117);
    }

    #[test]
    fn json_round_trip_and_extras() {
        let t = Trajectory::new(initial())
            .append_step(ocr_step("a"))
            .unwrap()
            .append_step(ReasoningStep::new(
                "where is it",
                ToolInvocation::new(ActionKind::Grounding, [("image", "input"), ("target", "sign")]),
                Observation::structured(ActionKind::Grounding, serde_json::json!({"boxes": [[1, 2, 3, 4]]})),
            ))
            .unwrap()
            .finalize("STOP")
            .unwrap();
        assert_eq!(Trajectory::from_json(&t.to_json()).unwrap(), t);

        let mut doc: Value = serde_json::from_slice(&t.to_json()).unwrap();
        doc["annotator"] = serde_json::json!({"name": "x"});
        let bytes = serde_json::to_vec(&doc).unwrap();
        let back = Trajectory::from_json(&bytes).unwrap();
        assert_eq!(back.extra["annotator"]["name"], "x");
        assert_eq!(serde_json::from_slice::<Value>(&back.to_json()).unwrap(), doc);
    }

    #[test]
    fn completed_without_answer_is_schema_violation() {
        let t = Trajectory::new(initial()).finalize("x").unwrap();
        let mut doc: Value = serde_json::from_slice(&t.to_json()).unwrap();
        doc.as_object_mut().unwrap().remove("final_answer");
        let err = Trajectory::from_json(&serde_json::to_vec(&doc).unwrap()).unwrap_err();
        assert!(matches!(err, TrajectoryError::SchemaViolation { ref path, .. } if path == "final_answer"));
    }

    #[test]
    fn type_errors_carry_field_path() {
        let doc = r#"{"version":1,"initial":{"question":"q","image_refs":[7]},"status":"in_progress"}"#;
        let err = Trajectory::from_json(doc.as_bytes()).unwrap_err();
        match err {
            TrajectoryError::SchemaViolation { path, .. } => assert_eq!(path, "initial.image_refs[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
