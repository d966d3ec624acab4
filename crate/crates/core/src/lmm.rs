//! Client for chat-completion style multimodal model servers.
//!
//! [`LmmClient`] validates requests and retries transient failures; the
//! actual exchange is done by a [`Transport`]. Two transports ship here:
//! [`HttpTransport`] speaks JSON over HTTP, [`StubTransport`] answers from a
//! script keyed by request fingerprint and records every request.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{placeholder_ordinals, RenderedPrompt, Stage};

/// Environment variable consulted for the bearer token when none is configured.
pub const DEFAULT_AUTH_ENV: &str = "COE_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmmError {
    #[error("request timed out")]
    Timeout,
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("server returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response has no completion text")]
    MissingText,
    #[error("image {reference:?} rejected: {reason}")]
    ImageRejected { reference: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl LmmError {
    /// Whether a retry may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            LmmError::Timeout | LmmError::Unreachable(_) => true,
            LmmError::Status { status, .. } => matches!(status, 408 | 429 | 500..=599),
            _ => false,
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub min_new_tokens: u32,
    pub max_new_tokens: u32,
    #[serde(with = "duration_secs", rename = "request_timeout_secs")]
    pub request_timeout: Duration,
    pub max_retries: u32,
}

impl GenerationParams {
    const TIMEOUT: Duration = Duration::from_secs(120);
    const RETRIES: u32 = 3;

    /// MMICL extraction stage: 50 to 80 new tokens at temperature 0.2.
    pub fn mmicl_eie() -> Self {
        GenerationParams {
            temperature: 0.2,
            min_new_tokens: 50,
            max_new_tokens: 80,
            request_timeout: Self::TIMEOUT,
            max_retries: Self::RETRIES,
        }
    }

    /// MMICL final stage: 1 to 50 new tokens at temperature 0.2.
    pub fn mmicl_final() -> Self {
        GenerationParams {
            min_new_tokens: 1,
            max_new_tokens: 50,
            ..Self::mmicl_eie()
        }
    }

    /// LLaVA-1.5, both stages: temperature 0.2, up to 1024 new tokens.
    pub fn llava() -> Self {
        GenerationParams {
            min_new_tokens: 0,
            max_new_tokens: 1024,
            ..Self::mmicl_eie()
        }
    }

    pub const PRESETS: [&'static str; 3] = ["mmicl-eie", "mmicl-final", "llava-1.5"];

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mmicl-eie" => Some(Self::mmicl_eie()),
            "mmicl-final" => Some(Self::mmicl_final()),
            "llava-1.5" | "llava" => Some(Self::llava()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), LmmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LmmError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(LmmError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if self.min_new_tokens > self.max_new_tokens {
            return Err(LmmError::InvalidRequest(format!(
                "min_new_tokens {} exceeds max_new_tokens {}",
                self.min_new_tokens, self.max_new_tokens
            )));
        }
        Ok(())
    }
}

/// Where an image comes from. References are file paths, `http(s)://` URLs
/// or `data:` URIs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImagePayload {
    Reference(String),
    Bytes { mime: String, data: Vec<u8> },
}

impl ImagePayload {
    /// Resolves the payload to a URL usable in an `image_url` part.
    pub fn to_url(&self) -> Result<String, LmmError> {
        let engine = base64::engine::general_purpose::STANDARD;
        match self {
            ImagePayload::Bytes { mime, data } => Ok(format!("data:{mime};base64,{}", engine.encode(data))),
            ImagePayload::Reference(r)
                if r.starts_with("http://") || r.starts_with("https://") || r.starts_with("data:") =>
            {
                Ok(r.clone())
            }
            ImagePayload::Reference(r) => {
                let rejected = |reason: String| LmmError::ImageRejected {
                    reference: r.clone(),
                    reason,
                };
                let mime = mime_for(Path::new(r)).ok_or_else(|| rejected("unsupported image type".into()))?;
                let data = fs::read(r).map_err(|e| rejected(e.to_string()))?;
                if data.is_empty() {
                    return Err(rejected("file is empty".into()));
                }
                Ok(format!("data:{mime};base64,{}", engine.encode(data)))
            }
        }
    }
}

fn mime_for(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    Some(match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmRequest {
    pub prompt: RenderedPrompt,
    pub images: Vec<ImagePayload>,
    pub params: GenerationParams,
    pub stage: Stage,
}

impl LmmRequest {
    /// Builds a request whose images are the prompt's slot references.
    pub fn from_prompt(prompt: RenderedPrompt, params: GenerationParams) -> Self {
        let images = prompt
            .slots
            .iter()
            .map(|s| ImagePayload::Reference(s.image_ref.clone()))
            .collect();
        LmmRequest {
            stage: prompt.stage,
            prompt,
            images,
            params,
        }
    }

    pub fn validate(&self) -> Result<(), LmmError> {
        if self.prompt.text.is_empty() {
            return Err(LmmError::InvalidRequest("prompt text is empty".into()));
        }
        if self.stage != self.prompt.stage {
            return Err(LmmError::InvalidRequest("request stage differs from prompt stage".into()));
        }
        let placeholders = placeholder_ordinals(&self.prompt.text).len();
        if self.images.len() != self.prompt.slots.len() || placeholders != self.prompt.slots.len() {
            return Err(LmmError::InvalidRequest(format!(
                "{} images for {} slots ({} placeholders in text)",
                self.images.len(),
                self.prompt.slots.len(),
                placeholders
            )));
        }
        self.params.validate()
    }

    /// Stable key of (stage, prompt text) used by the stub backend.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.stage, &self.prompt.text)
    }
}

pub fn fingerprint(stage: Stage, prompt_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_str().as_bytes());
    h.update(b"\n");
    h.update(prompt_text.as_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub logprob: f64,
}

/// Completion text as returned by one transport exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportReply {
    pub text: String,
    pub token_scores: Option<Vec<TokenScore>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmResponse {
    pub text: String,
    pub token_scores: Option<Vec<TokenScore>>,
    #[serde(with = "duration_secs", rename = "latency_secs")]
    pub latency: Duration,
    pub backend_id: String,
    pub attempts: u32,
}

/// One request/response exchange with a backend, without retries.
pub trait Transport: Send + Sync {
    fn send(&self, request: &LmmRequest) -> Result<TransportReply, LmmError>;
    fn backend_id(&self) -> String;
}

/// Exponential backoff with jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_secs(1),
            factor: 2.0,
            cap: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based): the capped exponential
    /// delay scaled by a uniform factor in [0.5, 1].
    pub fn delay(&self, retry: u32) -> Duration {
        let raw = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let capped = raw.min(self.cap.as_secs_f64());
        let jitter: f64 = rand::rng().random_range(0.5..=1.0);
        Duration::from_secs_f64(capped * jitter)
    }
}

/// Request validation plus retry around a [`Transport`]. Cheap to clone and
/// safe to share across threads.
#[derive(Clone)]
pub struct LmmClient {
    transport: Arc<dyn Transport>,
    backoff: Backoff,
}

impl fmt::Debug for LmmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LmmClient")
            .field("backend", &self.transport.backend_id())
            .field("backoff", &self.backoff)
            .finish()
    }
}

impl LmmClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        LmmClient {
            transport,
            backoff: Backoff::default(),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn backend_id(&self) -> String {
        self.transport.backend_id()
    }

    pub fn generate(&self, request: &LmmRequest) -> Result<LmmResponse, LmmError> {
        request.validate()?;
        let start = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.transport.send(request) {
                Ok(reply) => {
                    if reply.text.trim().is_empty() {
                        return Err(LmmError::MissingText);
                    }
                    return Ok(LmmResponse {
                        text: reply.text,
                        token_scores: reply.token_scores,
                        latency: start.elapsed(),
                        backend_id: self.transport.backend_id(),
                        attempts,
                    });
                }
                Err(e) if e.is_transient() && attempts <= request.params.max_retries => {
                    let delay = self.backoff.delay(attempts - 1);
                    log::warn!(
                        "{} request attempt {attempts} failed ({e}); retrying in {:.2}s",
                        request.stage.as_str(),
                        delay.as_secs_f64()
                    );
                    std::thread::sleep(delay);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
    #[serde(default = "default_eie_preset")]
    pub eie_preset: String,
    #[serde(default = "default_final_preset")]
    pub final_preset: String,
}

fn default_auth_env() -> String {
    DEFAULT_AUTH_ENV.to_string()
}

fn default_eie_preset() -> String {
    "mmicl-eie".into()
}

fn default_final_preset() -> String {
    "mmicl-final".into()
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            auth_env: default_auth_env(),
            eie_preset: default_eie_preset(),
            final_preset: default_final_preset(),
        }
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    pub fn stage_params(&self) -> Result<(GenerationParams, GenerationParams), LmmError> {
        let get = |name: &str| {
            GenerationParams::preset(name).ok_or_else(|| {
                LmmError::InvalidRequest(format!(
                    "unknown parameter preset {name:?}; available: {}",
                    GenerationParams::PRESETS.join(", ")
                ))
            })
        };
        Ok((get(&self.eie_preset)?, get(&self.final_preset)?))
    }
}

/// Encodes the chat-completion request body. The prompt text is split at
/// each `<imageN>` placeholder and the matching image is inserted there as
/// an `image_url` part.
pub fn encode_request_body(model: &str, request: &LmmRequest) -> Result<Value, LmmError> {
    request.validate()?;
    let mut content = Vec::new();
    let mut last = 0;
    let text = &request.prompt.text;
    for slot in &request.prompt.slots {
        // slots are validated dense, so each placeholder occurs exactly once
        let at = text[last..]
            .find(&slot.placeholder)
            .map(|i| i + last)
            .ok_or_else(|| LmmError::InvalidRequest(format!("{} not found in order", slot.placeholder)))?;
        if at > last {
            content.push(json!({"type": "text", "text": &text[last..at]}));
        }
        let ordinal: usize = slot.placeholder[6..slot.placeholder.len() - 1].parse().unwrap_or(0);
        let url = request.images[ordinal].to_url()?;
        content.push(json!({"type": "image_url", "image_url": {"url": url}}));
        last = at + slot.placeholder.len();
    }
    if last < text.len() {
        content.push(json!({"type": "text", "text": &text[last..]}));
    }
    let p = &request.params;
    let mut body = json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "temperature": p.temperature,
        "max_tokens": p.max_new_tokens,
        "logprobs": true,
    });
    if p.min_new_tokens > 0 {
        body["min_tokens"] = json!(p.min_new_tokens);
    }
    Ok(body)
}

/// Extracts the first choice's text and token log-probabilities.
pub fn decode_response_body(body: &Value) -> Result<TransportReply, LmmError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or(LmmError::MissingText)?;
    let content = choice.get("message").and_then(|m| m.get("content"));
    let text = match content {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<String>(),
        _ => choice
            .get("text")
            .and_then(Value::as_str)
            .ok_or(LmmError::MissingText)?
            .to_string(),
    };
    if text.is_empty() {
        return Err(LmmError::MissingText);
    }
    let token_scores = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|t| {
                    Some(TokenScore {
                        token: t.get("token")?.as_str()?.to_string(),
                        logprob: t.get("logprob")?.as_f64()?,
                    })
                })
                .collect::<Vec<_>>()
        })
        .filter(|v| !v.is_empty());
    Ok(TransportReply { text, token_scores })
}

/// Blocking HTTP transport for OpenAI-compatible chat-completion servers.
pub struct HttpTransport {
    endpoint: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// Reads the bearer token from the endpoint's `auth_env` variable, if set.
    pub fn new(endpoint: EndpointConfig) -> Self {
        let token = std::env::var(&endpoint.auth_env).ok().filter(|t| !t.is_empty());
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpTransport {
            endpoint,
            token,
            agent,
        }
    }
}

fn map_ureq_error(e: ureq::Error) -> LmmError {
    use std::io::ErrorKind;
    match e {
        ureq::Error::Timeout(_) => LmmError::Timeout,
        ureq::Error::HostNotFound | ureq::Error::ConnectionFailed => LmmError::Unreachable(e.to_string()),
        ureq::Error::Io(io) => match io.kind() {
            ErrorKind::TimedOut | ErrorKind::WouldBlock => LmmError::Timeout,
            ErrorKind::ConnectionRefused
            | ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::NotConnected
            | ErrorKind::AddrNotAvailable
            | ErrorKind::UnexpectedEof => LmmError::Unreachable(io.to_string()),
            _ => LmmError::Transport(io.to_string()),
        },
        other => LmmError::Transport(other.to_string()),
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &LmmRequest) -> Result<TransportReply, LmmError> {
        let body = encode_request_body(&self.endpoint.model, request)?;
        let mut req = self
            .agent
            .post(&self.endpoint.completions_url())
            .config()
            .timeout_global(Some(request.params.request_timeout))
            .build()
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let payload = serde_json::to_vec(&body).map_err(|e| LmmError::InvalidRequest(e.to_string()))?;
        let mut resp = req.send(&payload[..]).map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq_error)?;
        if !(200..300).contains(&status) {
            let mut body = text;
            body.truncate(500);
            return Err(LmmError::Status { status, body });
        }
        let json: Value = serde_json::from_str(&text).map_err(|_| LmmError::MissingText)?;
        decode_response_body(&json)
    }

    fn backend_id(&self) -> String {
        format!("http:{}@{}", self.endpoint.model, self.endpoint.base_url)
    }
}

/// Script for the stub backend: fingerprint to response text, plus a default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StubScript {
    #[serde(default)]
    pub default: String,
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
}

impl StubScript {
    pub fn with_default(default: impl Into<String>) -> Self {
        StubScript {
            default: default.into(),
            responses: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, fingerprint: impl Into<String>, response: impl Into<String>) {
        self.responses.insert(fingerprint.into(), response.into());
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, LmmError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| LmmError::InvalidRequest(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text).map_err(|e| LmmError::InvalidRequest(format!("bad stub script: {e}")))
    }
}

/// Deterministic scripted backend. Records every request it receives.
#[derive(Debug, Default)]
pub struct StubTransport {
    script: StubScript,
    recorded: Mutex<Vec<LmmRequest>>,
}

impl StubTransport {
    pub fn new(script: StubScript) -> Self {
        StubTransport {
            script,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn recorded(&self) -> Vec<LmmRequest> {
        self.recorded.lock().unwrap().clone()
    }

    pub fn call_count(&self, stage: Stage) -> usize {
        self.recorded.lock().unwrap().iter().filter(|r| r.stage == stage).count()
    }

    pub fn clear(&self) {
        self.recorded.lock().unwrap().clear();
    }
}

impl Transport for StubTransport {
    fn send(&self, request: &LmmRequest) -> Result<TransportReply, LmmError> {
        self.recorded.lock().unwrap().push(request.clone());
        let text = self
            .script
            .responses
            .get(&request.fingerprint())
            .unwrap_or(&self.script.default)
            .clone();
        Ok(TransportReply {
            text,
            token_scores: None,
        })
    }

    fn backend_id(&self) -> String {
        "stub".into()
    }
}
