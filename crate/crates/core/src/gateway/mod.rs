//! Uniform access to the reasoner, the verifier pair, the judge and the
//! error-induction generator, whether they are remote OpenAI-compatible
//! endpoints or scripted mocks.
//!
//! Every call goes through [`Gateway`], which adds an idempotency key
//! (the request hash), bounded exponential-backoff retries, a per-handle
//! in-flight limit, an optional global request-rate limit, and an optional
//! on-disk response cache keyed by the same hash.

mod cache;
mod mock;
mod openai;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::ResponseCache;
pub use mock::{JudgeOverride, JudgeRule, MockModel, MockModelSpec, MockScript, ScriptedContinuation};
pub use openai::OpenAiBackend;

use crate::trajectory::Trajectory;
use crate::util::{sha256_hex, Semaphore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("endpoint returned status {status}: {body}")]
    EndpointError { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("model `{0}` does not expose token log-probabilities")]
    ScoringUnsupported(String),
    #[error("tokenization mismatch: {0}")]
    TokenizationMismatch(String),
    #[error("judge reply has no verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("handle `{model}` has role {actual:?}, expected {expected:?}")]
    RoleMismatch {
        model: String,
        expected: ModelRole,
        actual: ModelRole,
    },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        match self {
            // status 0: connection never established
            GatewayError::EndpointError { status, .. } => *status == 0 || *status == 429 || *status >= 500,
            GatewayError::Timeout => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Reasoner,
    VerifierReference,
    VerifierTuned,
    Judge,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

/// Why a generation is requested. Remote models only see the prompt; mocks
/// use the purpose to pick their scripted reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "purpose", rename_all = "snake_case")]
pub enum Purpose {
    /// Planning of tool step `index` (1-based).
    Step {
        index: usize,
    },
    FinalAnswer,
    /// `offset`-th step generated after an error-induction branch point.
    InducedStep {
        offset: usize,
    },
    InducedFinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub question: String,
    #[serde(flatten)]
    pub purpose: Purpose,
    #[serde(default)]
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub prompt: String,
    pub question: String,
    pub final_answer: String,
    pub label: String,
}

/// Transport-level model access. Implementations need not retry or cache.
pub trait ModelBackend: Send + Sync {
    fn generate(&self, req: &GenerateRequest, cfg: &DecodeConfig, key: &str) -> Result<String, GatewayError>;
    fn score(&self, req: &ScoreRequest, key: &str) -> Result<f64, GatewayError>;
    /// Raw judge reply; the gateway parses the verdict.
    fn judge(&self, req: &JudgeRequest, cfg: &DecodeConfig, key: &str) -> Result<String, GatewayError>;
}

#[derive(Clone)]
pub struct ModelHandle {
    pub model_id: String,
    pub role: ModelRole,
    backend: Arc<dyn ModelBackend>,
    in_flight: Arc<Semaphore>,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("model_id", &self.model_id)
            .field("role", &self.role)
            .finish()
    }
}

impl ModelHandle {
    pub fn new(model_id: impl Into<String>, role: ModelRole, backend: Arc<dyn ModelBackend>) -> Self {
        Self {
            model_id: model_id.into(),
            role,
            backend,
            in_flight: Arc::new(Semaphore::new(8)),
        }
    }

    pub fn mock(spec: MockModelSpec, role: ModelRole) -> Self {
        let id = spec.model_id.clone();
        Self::new(id, role, Arc::new(MockModel::new(spec)))
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.in_flight = Arc::new(Semaphore::new(limit));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)).min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Spaces request starts at least `min_interval` apart across all handles.
#[derive(Debug)]
struct RateLimiter {
    min_interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn wait(&self) {
        let wake = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.min_interval;
            slot
        };
        let now = Instant::now();
        if wake > now {
            std::thread::sleep(wake - now);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub verdict: Verdict,
    pub prompt_hash: String,
}

#[derive(Debug, Default)]
pub struct Gateway {
    retry: RetryPolicy,
    cache: Option<ResponseCache>,
    rate: Option<RateLimiter>,
}

impl Gateway {
    pub fn new(retry: RetryPolicy) -> Self {
        Self {
            retry,
            cache: None,
            rate: None,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        if requests_per_second > 0.0 {
            self.rate = Some(RateLimiter {
                min_interval: Duration::from_secs_f64(1.0 / requests_per_second),
                next: Mutex::new(Instant::now()),
            });
        }
        self
    }

    fn call<T, F>(&self, handle: &ModelHandle, op: &str, request: &impl Serialize, f: F) -> Result<T, GatewayError>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: Fn(&str) -> Result<T, GatewayError>,
    {
        let key = request_key(&handle.model_id, op, request);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get::<T>(&key)) {
            return Ok(hit);
        }
        let mut attempt = 0;
        let value = loop {
            let result = {
                let _permit = handle.in_flight.acquire();
                if let Some(rate) = &self.rate {
                    rate.wait();
                }
                f(&key)
            };
            match result {
                Ok(v) => break v,
                Err(e) if e.is_retryable() && attempt + 1 < self.retry.max_attempts => {
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(cache) = &self.cache {
            cache.put(&key, &value);
        }
        Ok(value)
    }

    pub fn generate(&self, handle: &ModelHandle, req: &GenerateRequest, cfg: &DecodeConfig) -> Result<String, GatewayError> {
        let text = self.call(handle, "generate", &(req, cfg), |key| handle.backend.generate(req, cfg, key))?;
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        Ok(text)
    }

    /// Sum of natural-log token probabilities of `continuation` given
    /// `context`, without length normalization.
    pub fn score_sequence(&self, handle: &ModelHandle, context: &str, continuation: &str) -> Result<f64, GatewayError> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let req = ScoreRequest {
            context: context.to_string(),
            continuation: continuation.to_string(),
        };
        self.call(handle, "score", &req, |key| handle.backend.score(&req, key))
    }

    pub fn judge(&self, handle: &ModelHandle, traj: &Trajectory, label: &str, cfg: &DecodeConfig) -> Result<JudgeOutcome, GatewayError> {
        if handle.role != ModelRole::Judge {
            return Err(GatewayError::RoleMismatch {
                model: handle.model_id.clone(),
                expected: ModelRole::Judge,
                actual: handle.role,
            });
        }
        let final_answer = traj.final_answer.clone().unwrap_or_default();
        let prompt = render_judge_prompt(&traj.initial.question, &final_answer, label);
        let req = JudgeRequest {
            prompt,
            question: traj.initial.question.clone(),
            final_answer,
            label: label.to_string(),
        };
        let prompt_hash = sha256_hex(req.prompt.as_bytes());
        let text = self.call(handle, "judge", &(&req, cfg), |key| handle.backend.judge(&req, cfg, key))?;
        let verdict = parse_verdict(&text).ok_or(GatewayError::UnparseableVerdict(text))?;
        Ok(JudgeOutcome { verdict, prompt_hash })
    }
}

pub fn request_key(model_id: &str, op: &str, request: &impl Serialize) -> String {
    let body = serde_json::to_vec(&(model_id, op, request)).expect("request serializes");
    sha256_hex(&body)
}

pub fn render_judge_prompt(question: &str, final_answer: &str, label: &str) -> String {
    format!(
        "You are grading the final answer of a visual reasoning trajectory.\n\
         Question: {question}\n\
         Reference answer: {label}\n\
         Candidate answer: {final_answer}\n\
         Reply with exactly one line: `VERDICT: correct` if the candidate answer \
         matches the reference answer, otherwise `VERDICT: incorrect`."
    )
}

/// Reads the last `VERDICT: correct|incorrect` marker in a reply.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    let lower = text.to_ascii_lowercase();
    let idx = lower.rfind("verdict:")?;
    let word: String = lower[idx + "verdict:".len()..]
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    match word.as_str() {
        "correct" => Some(Verdict::Correct),
        "incorrect" => Some(Verdict::Incorrect),
        _ => None,
    }
}
