//! OpenAI-compatible HTTP backend.
//!
//! Generation uses `POST {base}/chat/completions`. Scoring uses the legacy
//! `POST {base}/completions` endpoint with `echo: true, max_tokens: 0,
//! logprobs: 1`, summing the log-probabilities of the tokens whose
//! `text_offset` lies at or past the end of the context.

use std::time::Duration;

use serde_json::{json, Value};

use super::{DecodeConfig, GatewayError, GenerateRequest, JudgeRequest, ModelBackend, ScoreRequest};

#[derive(Debug)]
pub struct OpenAiBackend {
    base_url: String,
    model: String,
    api_key_env: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key_env: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key_env,
            agent,
        }
    }

    fn post(&self, path: &str, body: &Value, key: &str) -> Result<Value, GatewayError> {
        let mut req = self.agent.post(format!("{}/{path}", self.base_url)).header("Idempotency-Key", key);
        if let Some(var) = &self.api_key_env {
            if let Ok(token) = std::env::var(var) {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
        }
        let bytes = serde_json::to_vec(body).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        let mut resp = req
            .header("Content-Type", "application/json")
            .send(&bytes[..])
            .map_err(map_transport)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(GatewayError::EndpointError { status, body });
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| GatewayError::Malformed(e.to_string()))
    }

    fn chat(&self, prompt: &str, cfg: &DecodeConfig, key: &str) -> Result<String, GatewayError> {
        if cfg.max_tokens == 0 {
            return Err(GatewayError::EmptyCompletion);
        }
        let body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
            "logprobs": true,
        });
        let v = self.post("chat/completions", &body, key)?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Malformed("missing choices[0].message.content".into()))?;
        Ok(text.to_string())
    }
}

fn map_transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::StatusCode(status) => GatewayError::EndpointError {
            status,
            body: String::new(),
        },
        other => GatewayError::EndpointError {
            status: 0,
            body: other.to_string(),
        },
    }
}

/// Sums echoed token log-probabilities belonging to the continuation.
pub(crate) fn sum_continuation_logprobs(response: &Value, context: &str, model: &str) -> Result<f64, GatewayError> {
    let lp = response
        .pointer("/choices/0/logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| GatewayError::ScoringUnsupported(model.to_string()))?;
    let arr = |k: &str| {
        lp.get(k)
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::ScoringUnsupported(model.to_string()))
    };
    let (tokens, logprobs, offsets) = (arr("tokens")?, arr("token_logprobs")?, arr("text_offset")?);
    if tokens.len() != logprobs.len() || tokens.len() != offsets.len() {
        return Err(GatewayError::Malformed("logprob arrays differ in length".into()));
    }
    let boundary = context.chars().count() as u64;
    let mut sum = 0.0;
    for ((tok, lp), off) in tokens.iter().zip(logprobs).zip(offsets) {
        let off = off.as_u64().ok_or_else(|| GatewayError::Malformed("bad text_offset".into()))?;
        let tok_len = tok.as_str().map(|t| t.chars().count() as u64).unwrap_or(0);
        if off >= boundary {
            sum += lp.as_f64().ok_or_else(|| GatewayError::ScoringUnsupported(model.to_string()))?;
        } else if off + tok_len > boundary {
            return Err(GatewayError::TokenizationMismatch(format!(
                "token {tok} at offset {off} straddles the context boundary {boundary}"
            )));
        }
    }
    Ok(sum)
}

impl ModelBackend for OpenAiBackend {
    fn generate(&self, req: &GenerateRequest, cfg: &DecodeConfig, key: &str) -> Result<String, GatewayError> {
        self.chat(&req.prompt, cfg, key)
    }

    fn score(&self, req: &ScoreRequest, key: &str) -> Result<f64, GatewayError> {
        let body = json!({
            "model": self.model,
            "prompt": format!("{}{}", req.context, req.continuation),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0.0,
        });
        let v = self.post("completions", &body, key)?;
        sum_continuation_logprobs(&v, &req.context, &self.model)
    }

    fn judge(&self, req: &JudgeRequest, cfg: &DecodeConfig, key: &str) -> Result<String, GatewayError> {
        self.chat(&req.prompt, cfg, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GenerateRequest, ModelHandle, ModelRole, Purpose, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Serves canned responses for a fixed number of connections and
    /// records the request heads and bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                head.push_str(&String::from_utf8_lossy(&buf));
                seen.push(head);
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (format!("http://{addr}"), handle)
    }

    fn req() -> GenerateRequest {
        GenerateRequest {
            prompt: "describe".into(),
            question: "q".into(),
            purpose: Purpose::Step { index: 1 },
            attempt: 0,
        }
    }

    #[test]
    fn chat_completion_with_retry_and_idempotency_key() {
        let ok = json!({"choices":[{"message":{"content":"zoom in"}}]}).to_string();
        let (url, server) = serve(vec![(503, "{}".into()), (200, ok)]);
        let backend = OpenAiBackend::new(url, "m", None, Duration::from_secs(5));
        let h = ModelHandle::new("m", ModelRole::Reasoner, Arc::new(backend));
        let gw = Gateway::new(RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1,
            max_delay_ms: 1,
        });
        assert_eq!(gw.generate(&h, &req(), &DecodeConfig::default()).unwrap(), "zoom in");
        let seen = server.join().unwrap();
        assert_eq!(seen.len(), 2);
        let key = |s: &str| {
            s.lines()
                .find(|l| l.to_ascii_lowercase().starts_with("idempotency-key:"))
                .map(|l| l.to_string())
        };
        assert!(key(&seen[0]).is_some());
        assert_eq!(key(&seen[0]), key(&seen[1]));
        assert!(seen[1].contains("\"logprobs\":true"));
    }

    #[test]
    fn unreachable_endpoint_is_endpoint_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let backend = OpenAiBackend::new(url, "m", None, Duration::from_secs(2));
        let h = ModelHandle::new("m", ModelRole::Reasoner, Arc::new(backend));
        let gw = Gateway::new(RetryPolicy {
            max_attempts: 1,
            base_delay_ms: 1,
            max_delay_ms: 1,
        });
        assert!(matches!(
            gw.generate(&h, &req(), &DecodeConfig::default()),
            Err(GatewayError::EndpointError { .. })
        ));
    }

    #[test]
    fn echo_scoring_sums_only_continuation() {
        let resp = json!({"choices":[{"logprobs":{
            "tokens": ["ctx", " x", " a", " b"],
            "token_logprobs": [null, -0.1, -0.5, -0.25],
            "text_offset": [0, 3, 5, 7]
        }}]});
        let (url, server) = serve(vec![(200, resp.to_string())]);
        let backend = OpenAiBackend::new(url, "m", None, Duration::from_secs(5));
        let h = ModelHandle::new("m", ModelRole::VerifierTuned, Arc::new(backend));
        let s = Gateway::default().score_sequence(&h, "ctx x", " a b").unwrap();
        assert!((s + 0.75).abs() < 1e-12);
        let seen = server.join().unwrap();
        assert!(seen[0].contains("\"echo\":true"));
        assert!(seen[0].contains("\"max_tokens\":0"));
    }

    #[test]
    fn echo_scoring_errors() {
        let no_lp = json!({"choices":[{"text":"", "logprobs": null}]});
        assert!(matches!(
            sum_continuation_logprobs(&no_lp, "c", "m"),
            Err(GatewayError::ScoringUnsupported(_))
        ));
        let straddle = json!({"choices":[{"logprobs":{
            "tokens": ["ab", "cd"], "token_logprobs": [null, -1.0], "text_offset": [0, 2]
        }}]});
        assert!(matches!(
            sum_continuation_logprobs(&straddle, "abc", "m"),
            Err(GatewayError::TokenizationMismatch(_))
        ));
        assert_eq!(sum_continuation_logprobs(&straddle, "ab", "m").unwrap(), -1.0);
    }
}
