//! Clients for the three external neural services: the captioner, the
//! text-to-image generator, and the feature encoder.
//!
//! Each service speaks JSON over HTTP POST (`/caption`, `/generate`,
//! `/encode`) with the request and response bodies typed below, so any model
//! server can be wrapped. Deterministic in-process stubs implement the same
//! traits and back every test.
//!
//! # Stub determinism
//!
//! The stubs are pure functions of (request, stub seed):
//!
//! * captions are `"stub caption for <ref>"` plus two words picked from a
//!   fixed list by a [`SplitMix64`] stream seeded from the FNV-1a hash of
//!   the image reference;
//! * generated image references are `"gen:"` plus the hex FNV-1a hash of
//!   the prompt bytes followed by the 8 little-endian seed bytes;
//! * embeddings seed a [`SplitMix64`] stream from the FNV-1a hash of the
//!   item bytes followed by the little-endian `max_tokens`, XORed with the
//!   stub seed, then draw 16 approximate standard normals (sum of twelve
//!   uniforms minus six) and unit-normalize. Only IEEE-754 add/mul/divide
//!   are involved, so vectors are identical on every platform.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_stream, fnv1a64, fnv1a64_continue, SplitMix64};

/// Captioning instruction sent by default.
pub const DEFAULT_CAPTION_INSTRUCTION: &str = "Generate a concise and accurate description for the following image. Please ensure to include key elements and any details.";

/// Embedding width served by the stub encoder.
pub const STUB_DIM: usize = 16;

/// Maximum text token budget accepted by encoders.
pub const MAX_TOKENS_LIMIT: u32 = 77;

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{context}: timed out after {attempts} attempt(s)")]
    Timeout { context: String, attempts: u32 },
    #[error("{context}: bad response: {reason}")]
    BadResponse { context: String, reason: String },
    #[error("{context}: retries exhausted after {attempts} attempt(s): {reason}")]
    Exhausted {
        context: String,
        attempts: u32,
        reason: String,
    },
    #[error("encoder returned dim 0")]
    DimZero,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Connection settings for one service endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub endpoint: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_s: 30.0,
            max_retries: 2,
            backoff_s: 0.5,
            bearer_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image_ref: String,
    pub instruction: String,
}

impl CaptionRequest {
    pub fn new(image_ref: impl Into<String>) -> Self {
        Self {
            image_ref: image_ref.into(),
            instruction: DEFAULT_CAPTION_INSTRUCTION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeKind {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub kind: EncodeKind,
    pub items: Vec<String>,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

pub trait Captioner: Send + Sync {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse>;
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse>;
}

pub trait Encoder: Send + Sync {
    fn encode(&self, req: &EncodeRequest) -> Result<EncodeResponse>;
}

fn validate_encode_request(req: &EncodeRequest) -> Result<()> {
    if req.items.is_empty() {
        return Err(ClientError::InvalidRequest("no items to encode".into()));
    }
    if req.kind == EncodeKind::Text && !(1..=MAX_TOKENS_LIMIT).contains(&req.max_tokens) {
        return Err(ClientError::InvalidRequest(format!(
            "max_tokens must be in 1..={MAX_TOKENS_LIMIT}, got {}",
            req.max_tokens
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// HTTP clients
// ---------------------------------------------------------------------------

/// JSON-over-HTTP client for one service endpoint.
#[derive(Debug, Clone)]
pub struct HttpClient {
    cfg: ClientConfig,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(cfg: ClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    /// POST `req` to `<endpoint>/<path>`, retrying transient failures
    /// (timeouts, transport errors, 5xx) up to `max_retries` times with a
    /// fixed backoff. Other non-200 statuses and malformed bodies fail
    /// immediately as `BadResponse`.
    fn post_json<Req: Serialize, Resp: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        req: &Req,
        context: &str,
    ) -> Result<Resp> {
        let url = format!("{}/{}", self.cfg.endpoint.trim_end_matches('/'), path);
        let attempts_allowed = self.cfg.max_retries + 1;
        let mut last_transient = String::new();
        let mut timed_out = false;
        for attempt in 1..=attempts_allowed {
            if attempt > 1 && self.cfg.backoff_s > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(self.cfg.backoff_s));
            }
            let mut builder = self.agent.post(&url);
            if let Some(token) = &self.cfg.bearer_token {
                builder = builder.header("authorization", format!("Bearer {token}"));
            }
            match builder.send_json(req) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if status == 200 {
                        return response.body_mut().read_json::<Resp>().map_err(|e| {
                            ClientError::BadResponse {
                                context: context.to_string(),
                                reason: format!("malformed body: {e}"),
                            }
                        });
                    }
                    if status >= 500 {
                        timed_out = false;
                        last_transient = format!("http status {status}");
                        continue;
                    }
                    return Err(ClientError::BadResponse {
                        context: context.to_string(),
                        reason: format!("http status {status}"),
                    });
                }
                Err(ureq::Error::Timeout(_)) => {
                    timed_out = true;
                    last_transient = "timeout".into();
                    continue;
                }
                Err(ureq::Error::Io(e)) => {
                    timed_out = false;
                    last_transient = format!("io: {e}");
                    continue;
                }
                Err(e) => {
                    return Err(ClientError::BadResponse {
                        context: context.to_string(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        if timed_out {
            Err(ClientError::Timeout {
                context: context.to_string(),
                attempts: attempts_allowed,
            })
        } else {
            Err(ClientError::Exhausted {
                context: context.to_string(),
                attempts: attempts_allowed,
                reason: last_transient,
            })
        }
    }
}

impl Captioner for HttpClient {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse> {
        let context = format!("caption {}", req.image_ref);
        let resp: CaptionResponse = self.post_json("caption", req, &context)?;
        if resp.caption.is_empty() {
            return Err(ClientError::BadResponse {
                context,
                reason: "empty caption".into(),
            });
        }
        Ok(resp)
    }
}

impl Generator for HttpClient {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        let context = format!("generate seed {}", req.seed);
        self.post_json("generate", req, &context)
    }
}

impl Encoder for HttpClient {
    fn encode(&self, req: &EncodeRequest) -> Result<EncodeResponse> {
        validate_encode_request(req)?;
        let context = format!("encode {} item(s)", req.items.len());
        let resp: EncodeResponse = self.post_json("encode", req, &context)?;
        check_encode_response(&resp, req.items.len(), &context)?;
        Ok(resp)
    }
}

fn check_encode_response(resp: &EncodeResponse, items: usize, context: &str) -> Result<()> {
    if resp.dim == 0 {
        return Err(ClientError::DimZero);
    }
    if resp.rows.len() != items {
        return Err(ClientError::BadResponse {
            context: context.to_string(),
            reason: format!("{} rows for {} items", resp.rows.len(), items),
        });
    }
    if let Some(bad) = resp.rows.iter().find(|r| r.len() != resp.dim) {
        return Err(ClientError::BadResponse {
            context: context.to_string(),
            reason: format!("row of length {} with dim {}", bad.len(), resp.dim),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stubs
// ---------------------------------------------------------------------------

/// Deterministic in-process stand-in for all three services.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubClients {
    pub seed: u64,
}

impl StubClients {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

const STUB_WORDS: [&str; 8] = [
    "token-a", "token-b", "token-c", "token-d", "token-e", "token-f", "token-g", "token-h",
];

impl Captioner for StubClients {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse> {
        let mut rng = derive_stream(self.seed, fnv1a64(req.image_ref.as_bytes()));
        let w1 = STUB_WORDS[rng.next_index(STUB_WORDS.len())];
        let w2 = STUB_WORDS[rng.next_index(STUB_WORDS.len())];
        Ok(CaptionResponse {
            caption: format!("stub caption for {} {} {}", req.image_ref, w1, w2),
        })
    }
}

impl Generator for StubClients {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        let h = fnv1a64_continue(fnv1a64(req.prompt.as_bytes()), &req.seed.to_le_bytes());
        Ok(GenerateResponse {
            image_ref: format!("gen:{h:016x}"),
        })
    }
}

impl Encoder for StubClients {
    fn encode(&self, req: &EncodeRequest) -> Result<EncodeResponse> {
        validate_encode_request(req)?;
        let rows = req
            .items
            .iter()
            .map(|item| stub_embedding(item, req.max_tokens, self.seed))
            .collect();
        Ok(EncodeResponse {
            dim: STUB_DIM,
            rows,
        })
    }
}

fn stub_embedding(item: &str, max_tokens: u32, stub_seed: u64) -> Vec<f64> {
    let h = fnv1a64_continue(
        fnv1a64(item.as_bytes()),
        &u64::from(max_tokens).to_le_bytes(),
    );
    let mut rng = SplitMix64::new(h ^ stub_seed);
    let mut v: Vec<f64> = (0..STUB_DIM).map(|_| rng.next_normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v[0] = 1.0;
        return v;
    }
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// The three service handles a pipeline run needs.
pub struct Clients {
    pub captioner: Box<dyn Captioner>,
    pub generator: Box<dyn Generator>,
    pub encoder: Box<dyn Encoder>,
}

impl Clients {
    /// All three services stubbed with the same stub seed.
    pub fn stub(seed: u64) -> Self {
        Self {
            captioner: Box::new(StubClients::new(seed)),
            generator: Box::new(StubClients::new(seed)),
            encoder: Box::new(StubClients::new(seed)),
        }
    }

    pub fn http(captioner: ClientConfig, generator: ClientConfig, encoder: ClientConfig) -> Self {
        Self {
            captioner: Box::new(HttpClient::new(captioner)),
            generator: Box::new(HttpClient::new(generator)),
            encoder: Box::new(HttpClient::new(encoder)),
        }
    }
}
