//! Multimodal completion client for OpenAI-compatible chat endpoints.
//!
//! Two endpoints are configured: the curator, which serves the face,
//! activity and text stages, and the judge, which verifies alignment. They
//! must serve different models. Requests go through a global rate limiter,
//! retry transient failures with exponential backoff, and can be served
//! from a digest-keyed on-disk cache.

mod cache;
mod clock;
pub mod mock;
mod transport;

use std::io::Cursor;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::json_digest;
use crate::video_prep::FrameSequence;

pub use cache::ResponseCache;
pub use clock::{Clock, ManualClock, RateLimiter, SystemClock};
pub use transport::{HttpReply, HttpTransport, Transport, TransportError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("gateway unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_ref: Option<String>,
    #[serde(default = "default_max_frames")]
    pub max_frames_per_request: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_max_frames() -> usize {
    32
}

fn default_timeout() -> f64 {
    120.0
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key_ref: None,
            max_frames_per_request: default_max_frames(),
            timeout_s: default_timeout(),
        }
    }

    fn check(&self, role: Role) -> Result<(), GatewayError> {
        let bad = |what: &str| Err(GatewayError::Config(format!("{role} endpoint: {what}")));
        if self.model_id.trim().is_empty() {
            return bad("model_id is empty");
        }
        if reqwest::Url::parse(&self.base_url).is_err() {
            return bad(&format!("base_url {:?} is not a URL", self.base_url));
        }
        if !self.timeout_s.is_finite() || self.timeout_s <= 0.0 {
            return bad("timeout_s must be positive");
        }
        if self.max_frames_per_request == 0 {
            return bad("max_frames_per_request must be at least 1");
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub curator: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
    #[serde(default = "default_rps")]
    pub rate_limit_rps: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

fn default_rps() -> f64 {
    2.0
}

fn default_retries() -> u32 {
    4
}

fn default_backoff() -> u64 {
    500
}

impl GatewayConfig {
    pub fn new(curator: EndpointConfig, judge: EndpointConfig) -> Self {
        GatewayConfig {
            curator: Some(curator),
            judge: Some(judge),
            rate_limit_rps: default_rps(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
            cache_dir: None,
        }
    }
}

/// Checks that both endpoints are fully specified and serve different
/// models. A judge sharing the curator's model would grade its own output,
/// which is exactly the self-preference the separate judge exists to avoid.
pub fn validate_model_separation(cfg: &GatewayConfig) -> Result<(), GatewayError> {
    let curator = cfg
        .curator
        .as_ref()
        .ok_or_else(|| GatewayError::Config("curator endpoint is missing".into()))?;
    let judge = cfg
        .judge
        .as_ref()
        .ok_or_else(|| GatewayError::Config("judge endpoint is missing".into()))?;
    curator.check(Role::Curator)?;
    judge.check(Role::Judge)?;
    if curator.model_id.trim() == judge.model_id.trim() {
        return Err(GatewayError::Config(format!(
            "curator and judge both use model {:?}; the judge must be a different model \
             than the curator (model-separation rule against self-preference bias)",
            curator.model_id
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Curator,
    Judge,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Curator => "curator",
            Role::Judge => "judge",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelRequest<'a> {
    pub role: Role,
    pub prompt_text: String,
    pub frames: &'a FrameSequence,
    pub decode: DecodeParams,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub model_id: String,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub from_cache: bool,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Cache key over everything that determines a reply.
pub fn cache_key(model_id: &str, req: &ModelRequest<'_>) -> String {
    json_digest(&json!({
        "model_id": model_id,
        "prompt_text": req.prompt_text,
        "frames": req.frames.frame_digests(),
        "temperature": req.decode.temperature,
        "max_tokens": req.decode.max_tokens,
    }))
}

/// Builds the chat-completions body: one user message holding the frames as
/// PNG data URIs in sequence order, followed by the prompt text.
pub fn request_body(model_id: &str, req: &ModelRequest<'_>) -> Result<String, GatewayError> {
    let mut content = Vec::with_capacity(req.frames.len() + 1);
    for frame in req.frames.frames() {
        let mut png = Vec::new();
        frame
            .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| GatewayError::InvalidRequest(format!("PNG encoding failed: {e}")))?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{b64}")},
        }));
    }
    content.push(json!({"type": "text", "text": req.prompt_text}));
    Ok(json!({
        "model": model_id,
        "messages": [{"role": "user", "content": content}],
        "temperature": req.decode.temperature,
        "max_tokens": req.decode.max_tokens,
        "stream": false,
    })
    .to_string())
}

fn parse_reply(body: &str, requested_model: &str) -> Result<ModelResponse, GatewayError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(format!("unexpected response body: {e}")))?;
    let text = wire
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| GatewayError::Protocol("response has no choices[0].message.content".into()))?;
    Ok(ModelResponse {
        text,
        model_id: wire.model.unwrap_or_else(|| requested_model.to_string()),
        usage: wire
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default(),
        from_cache: false,
    })
}

pub struct Gateway {
    curator: EndpointConfig,
    judge: EndpointConfig,
    max_retries: u32,
    backoff_base: Duration,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
    cache: ResponseCache,
    rng: Mutex<rand::rngs::StdRng>,
    network_calls: AtomicU64,
}

impl Gateway {
    /// Validates `cfg` (including model separation) before anything can be
    /// sent.
    pub fn new(cfg: &GatewayConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        validate_model_separation(cfg)?;
        Ok(Gateway {
            curator: cfg.curator.clone().expect("validated"),
            judge: cfg.judge.clone().expect("validated"),
            max_retries: cfg.max_retries,
            backoff_base: Duration::from_millis(cfg.backoff_base_ms),
            transport,
            clock: Arc::new(SystemClock::new()),
            limiter: RateLimiter::new(cfg.rate_limit_rps),
            cache: ResponseCache::new(cfg.cache_dir.clone()),
            rng: Mutex::new(rand::rngs::StdRng::from_entropy()),
            network_calls: AtomicU64::new(0),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_seed(self, seed: u64) -> Self {
        *self.rng.lock().unwrap() = rand::rngs::StdRng::seed_from_u64(seed);
        self
    }

    pub fn endpoint(&self, role: Role) -> &EndpointConfig {
        match role {
            Role::Curator => &self.curator,
            Role::Judge => &self.judge,
        }
    }

    /// Transport invocations so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    /// Delay before retry number `attempt + 1`: the schedule
    /// `base · 2^attempt` plus a uniform jitter of up to the same amount, so
    /// observed delays never undercut the schedule.
    fn backoff(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        let schedule = self.backoff_base.saturating_mul(1u32 << attempt.min(16));
        let jitter_ms = schedule.as_millis() as u64;
        let jitter = if jitter_ms == 0 {
            Duration::ZERO
        } else {
            Duration::from_millis(self.rng.lock().unwrap().gen_range(0..=jitter_ms))
        };
        (schedule + jitter).max(retry_after.unwrap_or_default())
    }

    pub fn complete_multimodal(&self, req: &ModelRequest<'_>) -> Result<ModelResponse, GatewayError> {
        let endpoint = self.endpoint(req.role);
        if req.prompt_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompt_text is empty".into()));
        }
        if req.frames.len() > endpoint.max_frames_per_request {
            return Err(GatewayError::InvalidRequest(format!(
                "{} frames exceed the {} endpoint limit of {}",
                req.frames.len(),
                req.role,
                endpoint.max_frames_per_request
            )));
        }
        let body = request_body(&endpoint.model_id, req)?;
        let url = endpoint.completions_url();
        let key = endpoint.api_key_ref.as_deref().and_then(|var| std::env::var(var).ok());
        let timeout = Duration::from_secs_f64(endpoint.timeout_s);

        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            self.limiter.acquire(self.clock.as_ref());
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let mut retry_after = None;
            match self.transport.post_json(&url, key.as_deref(), &body, timeout) {
                Ok(reply) if reply.is_success() => return parse_reply(&reply.body, &endpoint.model_id),
                Ok(reply) if reply.is_retryable() => {
                    last = format!("HTTP {}: {}", reply.status, reply.body);
                    retry_after = reply.retry_after;
                }
                Ok(reply) => {
                    return Err(GatewayError::Request {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.max_retries {
                let delay = self.backoff(attempt, retry_after);
                tracing::debug!(role = %req.role, attempt, ?delay, %last, "retrying");
                self.clock.sleep(delay);
            }
        }
        Err(GatewayError::Unavailable {
            attempts: self.max_retries + 1,
            last,
        })
    }

    /// Like [`Gateway::complete_multimodal`], but answers repeated requests
    /// from the cache without touching the network.
    pub fn cached_complete(&self, req: &ModelRequest<'_>) -> Result<ModelResponse, GatewayError> {
        let key = cache_key(&self.endpoint(req.role).model_id, req);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let resp = self.complete_multimodal(req)?;
        self.cache.put(&key, &resp);
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::mock::MockTransport;
    use super::*;
    use crate::video_prep::{plan_frame_samples, FrameSequence};
    use image::{Rgb, RgbImage};
    use proptest::prelude::*;

    fn config() -> GatewayConfig {
        let mut cfg = GatewayConfig::new(
            EndpointConfig::new("http://curator.test/v1", "qwen2.5-vl-7b"),
            EndpointConfig::new("http://judge.test/v1", "phi-4-multimodal-instruct"),
        );
        cfg.rate_limit_rps = 0.0;
        cfg.backoff_base_ms = 100;
        cfg.max_retries = 3;
        cfg
    }

    fn frames(n: usize, shade: u8) -> FrameSequence {
        let plan = plan_frame_samples(n as f64, 1.0, 32).unwrap();
        FrameSequence::new(vec![RgbImage::from_pixel(224, 224, Rgb([shade; 3])); n], plan, "media").unwrap()
    }

    fn request(role: Role, frames: &FrameSequence) -> ModelRequest<'_> {
        ModelRequest {
            role,
            prompt_text: "Is a face visible?".into(),
            frames,
            decode: DecodeParams::default(),
        }
    }

    fn chat(text: &str) -> HttpReply {
        HttpReply::ok(
            json!({"model": "served", "choices": [{"message": {"content": text}}],
                   "usage": {"prompt_tokens": 10, "completion_tokens": 3}})
            .to_string(),
        )
    }

    fn gateway(cfg: &GatewayConfig, t: Arc<MockTransport>) -> (Gateway, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new());
        let gw = Gateway::new(cfg, t).unwrap().with_clock(clock.clone()).with_seed(7);
        (gw, clock)
    }

    #[test]
    fn separation_rule() {
        assert!(validate_model_separation(&config()).is_ok());
        let mut same = config();
        same.judge.as_mut().unwrap().model_id = "qwen2.5-vl-7b".into();
        let err = validate_model_separation(&same).unwrap_err().to_string();
        assert!(err.contains("model-separation"), "{err}");
        let mut missing = config();
        missing.judge = None;
        assert!(matches!(
            validate_model_separation(&missing),
            Err(GatewayError::Config(_))
        ));
        let mut bad_url = config();
        bad_url.curator.as_mut().unwrap().base_url = "not a url".into();
        assert!(validate_model_separation(&bad_url).is_err());
    }

    #[test]
    fn stub_reply_is_returned_verbatim() {
        let t = Arc::new(MockTransport::new(|_, _| chat(" {\"face_visible\": true} ")));
        let (gw, _) = gateway(&config(), t.clone());
        let f = frames(2, 9);
        let resp = gw.complete_multimodal(&request(Role::Curator, &f)).unwrap();
        assert_eq!(resp.text, " {\"face_visible\": true} ");
        assert!(!resp.from_cache);
        assert_eq!(resp.usage.completion_tokens, 3);
        let sent = t.requests();
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].0, "http://curator.test/v1/chat/completions");
        let body: serde_json::Value = serde_json::from_str(&sent[0].1).unwrap();
        assert_eq!(body["model"], "qwen2.5-vl-7b");
        assert_eq!(body["temperature"], 0.0);
        let parts = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts[0]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(parts[2]["text"], "Is a face visible?");
    }

    #[test]
    fn retries_429_with_backoff_schedule() {
        let t = Arc::new(MockTransport::scripted(vec![
            HttpReply::status(429, "slow down"),
            HttpReply::status(429, "slow down"),
            chat("ok"),
        ]));
        let (gw, clock) = gateway(&config(), t.clone());
        let f = frames(1, 0);
        let resp = gw.complete_multimodal(&request(Role::Curator, &f)).unwrap();
        assert_eq!(resp.text, "ok");
        assert_eq!(gw.network_calls(), 3);
        let sleeps = clock.sleeps();
        assert_eq!(sleeps.len(), 2);
        assert!(sleeps[0] >= Duration::from_millis(100) && sleeps[0] <= Duration::from_millis(200));
        assert!(sleeps[1] >= Duration::from_millis(200) && sleeps[1] <= Duration::from_millis(400));
    }

    #[test]
    fn retry_after_header_extends_delay() {
        let mut slow = HttpReply::status(503, "busy");
        slow.retry_after = Some(Duration::from_secs(5));
        let t = Arc::new(MockTransport::scripted(vec![slow, chat("ok")]));
        let (gw, clock) = gateway(&config(), t);
        let f = frames(1, 0);
        gw.complete_multimodal(&request(Role::Curator, &f)).unwrap();
        assert_eq!(clock.sleeps(), vec![Duration::from_secs(5)]);
    }

    #[test]
    fn malformed_body_is_protocol_error_without_retry() {
        let t = Arc::new(MockTransport::new(|_, _| HttpReply::ok("<html>oops</html>")));
        let (gw, _) = gateway(&config(), t);
        let f = frames(1, 0);
        let err = gw.complete_multimodal(&request(Role::Curator, &f)).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(_)), "{err}");
        assert_eq!(gw.network_calls(), 1);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Arc::new(MockTransport::new(|_, _| HttpReply::status(400, "bad")));
        let (gw, _) = gateway(&config(), t);
        let f = frames(1, 0);
        let err = gw.complete_multimodal(&request(Role::Judge, &f)).unwrap_err();
        assert!(matches!(err, GatewayError::Request { status: 400, .. }));
        assert_eq!(gw.network_calls(), 1);
    }

    #[test]
    fn exhausted_retries_are_unavailable() {
        let t = Arc::new(MockTransport::new(|_, _| HttpReply::status(500, "down")));
        let (gw, clock) = gateway(&config(), t);
        let f = frames(1, 0);
        let err = gw.complete_multimodal(&request(Role::Curator, &f)).unwrap_err();
        assert!(matches!(err, GatewayError::Unavailable { attempts: 4, .. }));
        assert_eq!(clock.sleeps().len(), 3);
    }

    #[test]
    fn too_many_frames_rejected_locally() {
        let mut cfg = config();
        cfg.curator.as_mut().unwrap().max_frames_per_request = 2;
        let t = Arc::new(MockTransport::new(|_, _| chat("x")));
        let (gw, _) = gateway(&cfg, t);
        let f = frames(3, 0);
        assert!(matches!(
            gw.complete_multimodal(&request(Role::Curator, &f)),
            Err(GatewayError::InvalidRequest(_))
        ));
        assert_eq!(gw.network_calls(), 0);
    }

    #[test]
    fn cache_hits_skip_network() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config();
        cfg.cache_dir = Some(dir.path().to_path_buf());
        let t = Arc::new(MockTransport::new(|url, _| chat(url)));
        let (gw, _) = gateway(&cfg, t);
        let f = frames(2, 1);
        let first = gw.cached_complete(&request(Role::Curator, &f)).unwrap();
        let second = gw.cached_complete(&request(Role::Curator, &f)).unwrap();
        assert_eq!(gw.network_calls(), 1);
        assert!(!first.from_cache && second.from_cache);
        assert_eq!(first.text, second.text);

        let changed = frames(2, 2);
        gw.cached_complete(&request(Role::Curator, &changed)).unwrap();
        assert_eq!(gw.network_calls(), 2);

        let judged = gw.cached_complete(&request(Role::Judge, &f)).unwrap();
        assert_eq!(gw.network_calls(), 3);
        assert_eq!(judged.text, "http://judge.test/v1/chat/completions");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
    }

    #[test]
    fn unwritable_cache_degrades_to_uncached() {
        let file = tempfile::NamedTempFile::new().unwrap();
        let mut cfg = config();
        cfg.cache_dir = Some(file.path().join("sub"));
        let t = Arc::new(MockTransport::new(|_, _| chat("x")));
        let (gw, _) = gateway(&cfg, t);
        let f = frames(1, 0);
        gw.cached_complete(&request(Role::Curator, &f)).unwrap();
        gw.cached_complete(&request(Role::Curator, &f)).unwrap();
        assert_eq!(gw.network_calls(), 2);
    }

    #[test]
    fn rate_limit_holds_over_every_window() {
        let mut cfg = config();
        cfg.rate_limit_rps = 5.0;
        let clock = Arc::new(ManualClock::new());
        let times = Arc::new(Mutex::new(Vec::new()));
        let (c, ts) = (clock.clone(), times.clone());
        let t = Arc::new(MockTransport::new(move |_, _| {
            ts.lock().unwrap().push(c.now());
            chat("x")
        }));
        let gw = Gateway::new(&cfg, t).unwrap().with_clock(clock.clone());
        let f = frames(1, 0);
        for _ in 0..23 {
            gw.complete_multimodal(&request(Role::Curator, &f)).unwrap();
        }
        let times = times.lock().unwrap();
        for (i, start) in times.iter().enumerate() {
            let in_window = times[i..]
                .iter()
                .take_while(|t| **t < *start + Duration::from_secs(1))
                .count();
            assert!(in_window as f64 <= cfg.rate_limit_rps + 1.0);
        }
    }

    proptest! {
        #[test]
        fn equal_model_ids_never_validate(model in "[a-z0-9.-]{1,20}", url_a in "[a-z]{1,8}", url_b in "[a-z]{1,8}") {
            let cfg = GatewayConfig::new(
                EndpointConfig::new(format!("http://{url_a}.test"), model.clone()),
                EndpointConfig::new(format!("http://{url_b}.test"), model),
            );
            prop_assert!(validate_model_separation(&cfg).is_err());
            prop_assert!(Gateway::new(&cfg, Arc::new(MockTransport::new(|_, _| panic!("no request may be sent")))).is_err());
        }
    }
}
