//! Run configuration: a TOML file with defaults for every field, overlaid
//! by environment variables and command-line flags.
//!
//! ```toml
//! seed = 7
//! jobs = 4
//!
//! [verifier]
//! eta = 1.0
//! epsilon = 0.5
//!
//! [engine]
//! max_steps = 10
//!
//! [models.reasoner]
//! backend = "openai"
//! base_url = "http://localhost:8000/v1"
//! model = "some-vlm"
//!
//! [models.judge]
//! backend = "mock"
//! fixture = "fixtures/judge.json"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ActionContext, Engine, EngineConfig, VerifierPair, DEFAULT_SYSTEM_PROMPT};
use crate::gateway::{DecodeConfig, Gateway, MockModel, ModelHandle, ModelRole, OpenAiBackend, ResponseCache, RetryPolicy};
use crate::image::ImageStore;
use crate::pipeline::PreprocessConfig;
use crate::toolbox::{HttpToolService, MockToolService, MockToolTable, ToolBackend};
use crate::verifier::VerifierConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("no model configured for role `{0}`")]
    MissingModel(String),
    #[error("fixture {0}")]
    Fixture(String),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierSection {
    pub eta: f64,
    pub epsilon: f64,
    pub q_convention: f64,
}

impl Default for VerifierSection {
    fn default() -> Self {
        let v = VerifierConfig::default();
        Self {
            eta: v.eta,
            epsilon: v.epsilon,
            q_convention: v.q_convention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub max_steps: usize,
    pub action_context: ActionContext,
    pub temperature: f64,
    pub max_tokens: u32,
    pub system_prompt: String,
}

impl Default for EngineSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            max_steps: EngineConfig::default().max_steps,
            action_context: ActionContext::default(),
            temperature: d.temperature,
            max_tokens: d.max_tokens,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub cache_dir: Option<PathBuf>,
    /// 0 disables rate limiting.
    pub requests_per_second: f64,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for GatewaySection {
    fn default() -> Self {
        let r = RetryPolicy::default();
        Self {
            cache_dir: None,
            requests_per_second: 0.0,
            max_attempts: r.max_attempts,
            base_delay_ms: r.base_delay_ms,
            max_delay_ms: r.max_delay_ms,
            timeout_secs: 120,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Openai {
        base_url: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default)]
        api_key_env: Option<String>,
    },
    Mock {
        fixture: PathBuf,
    },
}

impl ModelConfig {
    pub fn describe(&self) -> String {
        match self {
            ModelConfig::Openai { base_url, model, .. } => format!("openai:{base_url}#{model}"),
            ModelConfig::Mock { fixture } => format!("mock:{}", fixture.display()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolsSection {
    pub service_url: Option<String>,
    pub mock: Option<PathBuf>,
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub token_limit: usize,
    pub per_image_cost: usize,
    pub induction_retries: u32,
    pub gated_generation: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PreprocessConfig::default();
        Self {
            token_limit: p.token_limit,
            per_image_cost: p.per_image_cost,
            induction_retries: crate::pipeline::INDUCTION_RETRIES,
            gated_generation: false,
        }
    }
}

pub const ROLE_KEYS: [&str; 5] = ["reasoner", "verifier_tuned", "verifier_reference", "judge", "generator"];

fn role_of(key: &str) -> Option<ModelRole> {
    Some(match key {
        "reasoner" => ModelRole::Reasoner,
        "verifier_tuned" => ModelRole::VerifierTuned,
        "verifier_reference" => ModelRole::VerifierReference,
        "judge" => ModelRole::Judge,
        "generator" => ModelRole::Generator,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub jobs: usize,
    pub verifier: VerifierSection,
    pub engine: EngineSection,
    pub gateway: GatewaySection,
    /// Keyed by role: reasoner, verifier_tuned, verifier_reference, judge,
    /// generator.
    pub models: BTreeMap<String, ModelConfig>,
    pub tools: ToolsSection,
    pub pipeline: PipelineSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 4,
            verifier: VerifierSection::default(),
            engine: EngineSection::default(),
            gateway: GatewaySection::default(),
            models: BTreeMap::new(),
            tools: ToolsSection::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let parse = |message: String| ConfigError::Parse {
            path: origin.to_path_buf(),
            message,
        };
        let value: toml::Value = toml::from_str(text).map_err(|e| parse(e.message().to_string()))?;
        let cfg: Config = serde_path_to_error::deserialize(value).map_err(|e| parse(format!("{}: {}", e.path(), e.inner())))?;
        Ok(cfg.resolve_relative(origin.parent().unwrap_or(Path::new(""))))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Fixture and cache paths are relative to the config file.
    fn resolve_relative(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in self.models.values_mut() {
            if let ModelConfig::Mock { fixture } = m {
                fix(fixture);
            }
        }
        if let Some(p) = &mut self.tools.mock {
            fix(p);
        }
        if let Some(p) = &mut self.gateway.cache_dir {
            fix(p);
        }
        self
    }

    /// Points every role whose `<role>.json` exists in `dir` at that
    /// fixture, and the tool service at `tools.json` if present.
    pub fn apply_mock_dir(&mut self, dir: &Path) -> Result<(), ConfigError> {
        if !dir.is_dir() {
            return Err(invalid("--mock", format!("{} is not a directory", dir.display())));
        }
        for key in ROLE_KEYS {
            let path = dir.join(format!("{key}.json"));
            if path.is_file() {
                self.models.insert(key.to_string(), ModelConfig::Mock { fixture: path });
            }
        }
        let tools = dir.join("tools.json");
        if tools.is_file() {
            self.tools.mock = Some(tools);
            self.tools.service_url = None;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = &self.verifier;
        if !(v.eta.is_finite() && v.eta > 0.0) {
            return Err(invalid("verifier.eta", format!("must be positive, got {}", v.eta)));
        }
        if !(v.epsilon.is_finite() && v.epsilon > 0.0) {
            return Err(invalid("verifier.epsilon", format!("must be positive, got {}", v.epsilon)));
        }
        if !v.q_convention.is_finite() {
            return Err(invalid("verifier.q_convention", "must be finite"));
        }
        if self.engine.max_steps == 0 {
            return Err(invalid("engine.max_steps", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(invalid("jobs", "must be at least 1"));
        }
        if self.gateway.max_attempts == 0 {
            return Err(invalid("gateway.max_attempts", "must be at least 1"));
        }
        if self.gateway.max_in_flight == 0 {
            return Err(invalid("gateway.max_in_flight", "must be at least 1"));
        }
        if !(self.gateway.requests_per_second >= 0.0) {
            return Err(invalid("gateway.requests_per_second", "must be non-negative"));
        }
        if self.pipeline.induction_retries == 0 {
            return Err(invalid("pipeline.induction_retries", "must be at least 1"));
        }
        for key in self.models.keys() {
            if role_of(key).is_none() {
                return Err(invalid(
                    &format!("models.{key}"),
                    format!("unknown role; expected one of {}", ROLE_KEYS.join(", ")),
                ));
            }
        }
        Ok(())
    }

    pub fn verifier_config(&self) -> VerifierConfig {
        VerifierConfig {
            eta: self.verifier.eta,
            epsilon: self.verifier.epsilon,
            q_convention: self.verifier.q_convention,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            verifier: self.verifier_config(),
            max_steps: self.engine.max_steps,
            reasoner_decode: self.decode(),
            action_context: self.engine.action_context,
        }
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            temperature: self.engine.temperature,
            max_tokens: self.engine.max_tokens,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            token_limit: self.pipeline.token_limit,
            per_image_cost: self.pipeline.per_image_cost,
        }
    }

    pub fn has_model(&self, key: &str) -> bool {
        self.models.contains_key(key)
    }

    pub fn model(&self, key: &str) -> Result<ModelHandle, ConfigError> {
        let role = role_of(key).ok_or_else(|| invalid(&format!("models.{key}"), "unknown role"))?;
        let handle = match self.models.get(key).ok_or_else(|| ConfigError::MissingModel(key.to_string()))? {
            ModelConfig::Mock { fixture } => ModelHandle::mock(MockModel::load(fixture).map_err(ConfigError::Fixture)?, role),
            ModelConfig::Openai {
                base_url,
                model,
                api_key_env,
            } => {
                let backend = OpenAiBackend::new(
                    base_url.clone(),
                    model.clone(),
                    api_key_env.clone(),
                    Duration::from_secs(self.gateway.timeout_secs),
                );
                ModelHandle::new(model.clone(), role, Arc::new(backend))
            }
        };
        Ok(handle.with_in_flight_limit(self.gateway.max_in_flight))
    }

    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        let g = &self.gateway;
        let mut gw = Gateway::new(RetryPolicy {
            max_attempts: g.max_attempts,
            base_delay_ms: g.base_delay_ms,
            max_delay_ms: g.max_delay_ms,
        })
        .with_rate_limit(g.requests_per_second);
        if let Some(dir) = &g.cache_dir {
            let cache = ResponseCache::open(dir).map_err(|source| ConfigError::Io { path: dir.clone(), source })?;
            gw = gw.with_cache(cache);
        }
        Ok(gw)
    }

    pub fn tools(&self) -> Result<ToolBackend, ConfigError> {
        let limit = self.tools.max_in_flight.unwrap_or(self.jobs).max(1);
        if let Some(path) = &self.tools.mock {
            let table = MockToolTable::load(path).map_err(|e| ConfigError::Fixture(format!("{}: {e}", path.display())))?;
            return Ok(ToolBackend::with_service(Arc::new(MockToolService::new(table)), limit));
        }
        if let Some(url) = &self.tools.service_url {
            let svc = HttpToolService::new(url.clone(), Duration::from_secs(self.gateway.timeout_secs));
            return Ok(ToolBackend::with_service(Arc::new(svc), limit));
        }
        Ok(ToolBackend::native_only())
    }

    /// Builds the engine; the verifier pair is attached when both verifier
    /// roles are configured or `require_verifier` is set.
    pub fn engine(&self, store: Arc<ImageStore>, require_verifier: bool) -> Result<Engine, ConfigError> {
        self.validate()?;
        let verifier = if require_verifier || (self.has_model("verifier_tuned") && self.has_model("verifier_reference")) {
            let pair = VerifierPair::new(self.model("verifier_tuned")?, self.model("verifier_reference")?)
                .map_err(|e| invalid("models", e.to_string()))?;
            Some(pair)
        } else {
            None
        };
        Ok(Engine {
            gateway: Arc::new(self.gateway()?),
            reasoner: self.model("reasoner")?,
            verifier,
            store,
            tools: Arc::new(self.tools()?),
            cfg: self.engine_config(),
        })
    }

    /// `role → endpoint` description for run manifests.
    pub fn endpoint_map(&self) -> BTreeMap<String, String> {
        let mut m: BTreeMap<String, String> = self.models.iter().map(|(k, v)| (k.clone(), v.describe())).collect();
        if let Some(p) = &self.tools.mock {
            m.insert("tools".into(), format!("mock:{}", p.display()));
        } else if let Some(u) = &self.tools.service_url {
            m.insert("tools".into(), u.clone());
        }
        m
    }
}
