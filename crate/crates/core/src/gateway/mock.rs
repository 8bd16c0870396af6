//! Scripted, fully deterministic stand-in for any model role.
//!
//! Fixture format (JSON):
//!
//! ```json
//! {
//!   "model_id": "mock-reasoner",
//!   "scripts": [
//!     { "question_contains": "sign", "steps": ["...```action\nOCR image=last\n```"],
//!       "final_answer": "STOP", "induced": [{ "steps": [], "final_answer": "GO" }] }
//!   ],
//!   "token_probs": { "a": 0.5 },
//!   "token_logprobs": { "b": -1.2 },
//!   "default_logprob": -5.0,
//!   "judge": { "rule": "equality" }
//! }
//! ```
//!
//! Scoring is unigram over whitespace tokens: every token contributes its
//! table entry regardless of context, so scores are additive by
//! construction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecodeConfig, GatewayError, GenerateRequest, JudgeRequest, ModelBackend, Purpose, ScoreRequest};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockModelSpec {
    pub model_id: String,
    /// Every call fails with `EndpointError`.
    #[serde(default)]
    pub unreachable: bool,
    #[serde(default)]
    pub scripts: Vec<MockScript>,
    #[serde(default)]
    pub token_probs: BTreeMap<String, f64>,
    #[serde(default)]
    pub token_logprobs: BTreeMap<String, f64>,
    #[serde(default)]
    pub default_prob: Option<f64>,
    #[serde(default)]
    pub default_logprob: Option<f64>,
    #[serde(default)]
    pub judge: Option<JudgeRule>,
    /// Judge replies forced for matching questions, checked before `judge`.
    #[serde(default)]
    pub judge_overrides: Vec<JudgeOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeOverride {
    pub question_contains: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    /// Matches when the question contains this substring; empty matches all.
    #[serde(default)]
    pub question_contains: String,
    /// Reply for step `h` is `steps[h-1]`.
    #[serde(default)]
    pub steps: Vec<String>,
    /// Past the end of `steps`: repeat the last one instead of answering.
    #[serde(default)]
    pub repeat_last_step: bool,
    pub final_answer: String,
    /// Continuations used by error induction, indexed by attempt (clamped).
    #[serde(default)]
    pub induced: Vec<ScriptedContinuation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedContinuation {
    #[serde(default)]
    pub steps: Vec<String>,
    pub final_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum JudgeRule {
    /// `VERDICT: correct` iff trimmed, case-folded answer equals the label.
    Equality,
    Scripted {
        text: String,
    },
}

#[derive(Debug, Clone)]
pub struct MockModel {
    spec: MockModelSpec,
}

impl MockModel {
    pub fn new(spec: MockModelSpec) -> Self {
        Self { spec }
    }

    pub fn load(path: &Path) -> Result<MockModelSpec, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| format!("{}: {} at {}", path.display(), e.inner(), e.path()))
    }

    fn check_reachable(&self) -> Result<(), GatewayError> {
        if self.spec.unreachable {
            return Err(GatewayError::EndpointError {
                status: 404,
                body: format!("mock model `{}` is unreachable", self.spec.model_id),
            });
        }
        Ok(())
    }

    fn script_for(&self, question: &str) -> Option<&MockScript> {
        self.spec.scripts.iter().find(|s| question.contains(s.question_contains.as_str()))
    }

    fn token_logprob(&self, token: &str) -> Result<f64, GatewayError> {
        if let Some(lp) = self.spec.token_logprobs.get(token) {
            return Ok(*lp);
        }
        if let Some(p) = self.spec.token_probs.get(token) {
            return Ok(p.ln());
        }
        if let Some(lp) = self.spec.default_logprob {
            return Ok(lp);
        }
        if let Some(p) = self.spec.default_prob {
            return Ok(p.ln());
        }
        Err(GatewayError::TokenizationMismatch(format!(
            "token {token:?} is not in the table of `{}`",
            self.spec.model_id
        )))
    }

    fn has_table(&self) -> bool {
        !self.spec.token_probs.is_empty()
            || !self.spec.token_logprobs.is_empty()
            || self.spec.default_prob.is_some()
            || self.spec.default_logprob.is_some()
    }
}

fn truncate_tokens(text: &str, max_tokens: u32) -> String {
    let n = text.split_whitespace().count();
    if n <= max_tokens as usize {
        return text.to_string();
    }
    text.split_whitespace().take(max_tokens as usize).collect::<Vec<_>>().join(" ")
}

impl ModelBackend for MockModel {
    fn generate(&self, req: &GenerateRequest, cfg: &DecodeConfig, _key: &str) -> Result<String, GatewayError> {
        self.check_reachable()?;
        let script = self.script_for(&req.question).ok_or_else(|| GatewayError::EndpointError {
            status: 422,
            body: format!("mock model `{}` has no script for {:?}", self.spec.model_id, req.question),
        })?;
        let text = match req.purpose {
            Purpose::Step { index } => match script.steps.get(index.saturating_sub(1)) {
                Some(s) => s.clone(),
                None if script.repeat_last_step && !script.steps.is_empty() => script.steps.last().unwrap().clone(),
                None => script.final_answer.clone(),
            },
            Purpose::FinalAnswer => script.final_answer.clone(),
            Purpose::InducedStep { .. } | Purpose::InducedFinal => {
                let Some(cont) = script
                    .induced
                    .get((req.attempt as usize).min(script.induced.len().saturating_sub(1)))
                else {
                    return Ok(String::new());
                };
                match req.purpose {
                    Purpose::InducedStep { offset } => cont.steps.get(offset).cloned().unwrap_or_else(|| cont.final_answer.clone()),
                    _ => cont.final_answer.clone(),
                }
            }
        };
        Ok(truncate_tokens(&text, cfg.max_tokens))
    }

    fn score(&self, req: &ScoreRequest, _key: &str) -> Result<f64, GatewayError> {
        self.check_reachable()?;
        if !self.has_table() {
            return Err(GatewayError::ScoringUnsupported(self.spec.model_id.clone()));
        }
        req.continuation.split_whitespace().map(|t| self.token_logprob(t)).sum()
    }

    fn judge(&self, req: &JudgeRequest, cfg: &DecodeConfig, _key: &str) -> Result<String, GatewayError> {
        self.check_reachable()?;
        if let Some(o) = self
            .spec
            .judge_overrides
            .iter()
            .find(|o| req.question.contains(o.question_contains.as_str()))
        {
            return Ok(truncate_tokens(&o.text, cfg.max_tokens));
        }
        let text = match &self.spec.judge {
            Some(JudgeRule::Equality) => {
                let norm = |s: &str| s.trim().to_lowercase();
                if norm(&req.final_answer) == norm(&req.label) {
                    "VERDICT: correct".to_string()
                } else {
                    "VERDICT: incorrect".to_string()
                }
            }
            Some(JudgeRule::Scripted { text }) => text.clone(),
            None => {
                return Err(GatewayError::EndpointError {
                    status: 422,
                    body: format!("mock model `{}` has no judge rule", self.spec.model_id),
                })
            }
        };
        Ok(truncate_tokens(&text, cfg.max_tokens))
    }
}
