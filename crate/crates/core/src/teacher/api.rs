//! Blocking client for OpenAI-format `POST {base_url}/chat/completions`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{annotate_with, Annotation, InferenceConfig, Secret, TeacherClient, TeacherRequest};
use crate::error::{Error, Result};
use crate::records::InstructionRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub attempts: u32,
    /// Delay before the first retry; doubles on every further retry.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatOutcome {
    pub text: String,
    pub retries: u32,
}

pub struct ApiClient {
    http: reqwest::blocking::Client,
    endpoint: String,
    api_key: Secret,
    model: String,
    stream: bool,
    max_new_tokens: usize,
    temperature: Option<f64>,
    retry: RetryPolicy,
    config_hash: String,
}

enum Failure {
    Fatal(Error),
    Retryable(Error),
}

impl ApiClient {
    pub fn new(cfg: &InferenceConfig) -> Result<Self> {
        let base = cfg
            .base_url
            .as_deref()
            .ok_or_else(|| Error::config("inference", "base_url", "required for API inference"))?;
        let api_key = cfg
            .api_key
            .clone()
            .ok_or_else(|| Error::config("inference", "api_key", "required for API inference"))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        Ok(Self {
            http,
            endpoint: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key,
            model: cfg.model.clone().unwrap_or_else(|| "default".to_string()),
            stream: cfg.stream,
            max_new_tokens: cfg.max_new_tokens,
            temperature: cfg.temperature,
            retry: cfg.retry.clone(),
            config_hash: cfg.content_hash(),
        })
    }

    fn request_body(&self, system: &str, user: &str) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "max_tokens": self.max_new_tokens,
            "stream": self.stream,
        });
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        body
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, Failure> {
        let response = self
            .http
            .post(&self.endpoint)
            .bearer_auth(self.api_key.expose())
            .json(body)
            .send()
            .map_err(|e| Failure::Retryable(Error::Http(e.without_url().to_string())))?;
        let status = response.status().as_u16();
        if status == 401 || status == 403 {
            return Err(Failure::Fatal(Error::Auth { status }));
        }
        let text = response
            .text()
            .map_err(|e| Failure::Retryable(Error::Http(e.without_url().to_string())))?;
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(Error::Http(format!("HTTP {status}"))));
        }
        if status >= 400 {
            return Err(Failure::Fatal(Error::Http(format!("HTTP {status}: {}", truncate(&text, 200)))));
        }
        let parsed = if self.stream {
            parse_sse_stream(&text)
        } else {
            parse_chat_response(&text)
        };
        parsed.map_err(Failure::Fatal)
    }

    /// Send one chat completion, retrying transport errors, 429 and 5xx with
    /// exponential backoff.
    pub fn chat(&self, system: &str, user: &str) -> Result<ChatOutcome> {
        let body = self.request_body(system, user);
        let attempts = self.retry.attempts.max(1);
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => {
                    if retries > 0 {
                        log::info!("teacher request succeeded after {retries} retries");
                    }
                    return Ok(ChatOutcome { text, retries });
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) => {
                    if retries + 1 >= attempts {
                        log::warn!("teacher request failed after {attempts} attempts: {e}");
                        return Err(e);
                    }
                    let delay = self.retry.base_delay_ms.saturating_mul(1 << retries.min(16));
                    log::warn!(
                        "teacher request failed (attempt {}/{attempts}): {e}; retrying in {delay} ms",
                        retries + 1
                    );
                    std::thread::sleep(Duration::from_millis(delay));
                    retries += 1;
                }
            }
        }
    }
}

impl TeacherClient for ApiClient {
    fn complete(&self, request: &TeacherRequest<'_>) -> Result<String> {
        self.chat(request.system, request.user).map(|o| o.text)
    }

    fn config_hash(&self) -> String {
        self.config_hash.clone()
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Extract `choices[0].message.content` from a non-streamed body.
pub fn parse_chat_response(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))
}

/// Concatenate `choices[0].delta.content` across a server-sent-event body,
/// stopping at `data: [DONE]`.
pub fn parse_sse_stream(body: &str) -> Result<String> {
    let mut out = String::new();
    let mut saw_event = false;
    for line in body.lines() {
        let line = line.trim_end_matches('\r');
        let Some(payload) = line.strip_prefix("data:") else {
            continue;
        };
        let payload = payload.trim();
        if payload == "[DONE]" {
            saw_event = true;
            break;
        }
        let v: Value = serde_json::from_str(payload).map_err(|e| Error::MalformedResponse(format!("bad stream chunk: {e}")))?;
        if !v.is_object() {
            return Err(Error::MalformedResponse("stream chunk is not an object".into()));
        }
        saw_event = true;
        if let Some(s) = v.pointer("/choices/0/delta/content").and_then(Value::as_str) {
            out.push_str(s);
        }
    }
    if !saw_event {
        return Err(Error::MalformedResponse("no data events in stream".into()));
    }
    Ok(out)
}

/// Label instructions through an OpenAI-compatible endpoint.
pub fn annotate_api(instructions: &[InstructionRecord], cfg: &InferenceConfig) -> Result<Vec<Annotation>> {
    if instructions.is_empty() {
        return Ok(Vec::new());
    }
    let client = ApiClient::new(cfg)?;
    annotate_with(instructions, &client, &cfg.system_prompt, cfg.concurrency)
}
