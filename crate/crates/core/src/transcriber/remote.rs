//! HTTP client for a remote multimodal model, plus the cache-backed
//! transcribers built on it.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::cache::{now_millis, Cache, RunRecord};
use super::{GenerationParams, Job, TranscribeError, Transcriber, PROMPT_V1};
use crate::augment::apply_augmentation;
use crate::model::{DocumentImage, FieldName, FieldSet};

fn default_key_env() -> String {
    "TTA_API_KEY".to_string()
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    5
}
fn default_base_backoff() -> u64 {
    500
}
fn default_max_backoff() -> u64 {
    30_000
}
fn default_rps() -> f64 {
    5.0
}

/// Endpoint settings, read from the run configuration. The credential
/// itself only ever comes from the environment variable named here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_base_backoff")]
    pub base_backoff_ms: u64,
    #[serde(default = "default_max_backoff")]
    pub max_backoff_ms: u64,
    /// Shared across all worker threads; `0` disables limiting.
    #[serde(default = "default_rps")]
    pub requests_per_second: f64,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            base_backoff_ms: default_base_backoff(),
            max_backoff_ms: default_max_backoff(),
            requests_per_second: default_rps(),
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .base_backoff_ms
            .saturating_mul(1u64 << attempt.min(30))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

/// Spaces requests at least `1 / rate` seconds apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        let interval = if per_second > 0.0 {
            Duration::from_secs_f64(1.0 / per_second)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    prompt: &'a str,
    image: String,
    temperature: f64,
    top_p: f64,
}

pub struct RemoteClient {
    config: EndpointConfig,
    agent: ureq::Agent,
    api_key: String,
    limiter: RateLimiter,
    prompt: String,
}

impl RemoteClient {
    /// Builds a client, reading the credential from the configured
    /// environment variable.
    pub fn from_env(config: EndpointConfig) -> Result<Self, TranscribeError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| TranscribeError::MissingCredential(config.api_key_env.clone()))?;
        Ok(Self::with_key(config, api_key))
    }

    pub fn with_key(config: EndpointConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let limiter = RateLimiter::new(config.requests_per_second);
        Self {
            config,
            agent,
            api_key,
            limiter,
            prompt: PROMPT_V1.to_string(),
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn post_once(&self, body: &RequestBody<'_>) -> Result<(u16, String), String> {
        self.limiter.acquire();
        let mut resp = self
            .agent
            .post(&self.config.url)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, text))
    }

    /// Sends one image; returns the parsed fields and the raw reply body.
    pub fn transcribe(
        &self,
        img: &DocumentImage,
        params: &GenerationParams,
    ) -> Result<(FieldSet, String), TranscribeError> {
        let body = RequestBody {
            model: &params.model_name,
            prompt: &self.prompt,
            image: base64::engine::general_purpose::STANDARD.encode(img.to_png()?),
            temperature: params.temperature,
            top_p: params.top_p,
        };
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff(attempt - 1));
            }
            match self.post_once(&body) {
                Ok((200..=299, text)) => {
                    return parse_reply(&text)
                        .map(|fields| (fields, text.clone()))
                        .map_err(|reason| TranscribeError::Unparseable { reason, raw: text });
                }
                Ok((status, text)) if status == 429 || status >= 500 => {
                    log::debug!("HTTP {status} on attempt {}; retrying", attempt + 1);
                    last_error = format!("HTTP {status}: {text}");
                }
                Ok((status, text)) => return Err(TranscribeError::Status { status, body: text }),
                Err(err) => {
                    log::debug!("transport error on attempt {}: {err}", attempt + 1);
                    last_error = err;
                }
            }
        }
        Err(TranscribeError::Network {
            attempts: self.config.max_retries + 1,
            message: last_error,
        })
    }
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

fn find_fields(value: &Value) -> Option<&serde_json::Map<String, Value>> {
    match value {
        Value::Object(map) if FieldName::ALL.iter().any(|f| map.contains_key(f.as_str())) => Some(map),
        Value::Object(map) => map.values().find_map(find_fields),
        Value::Array(items) => items.iter().find_map(find_fields),
        _ => None,
    }
}

fn find_in_strings(value: &Value) -> Option<Value> {
    match value {
        Value::String(s) => serde_json::from_str::<Value>(strip_fences(s))
            .ok()
            .filter(|v| find_fields(v).is_some()),
        Value::Object(map) => map.values().find_map(find_in_strings),
        Value::Array(items) => items.iter().find_map(find_in_strings),
        _ => None,
    }
}

/// Extracts the six-field object from a model reply.
///
/// The object may be the body itself, nested anywhere inside it, or
/// embedded as (optionally fenced) JSON text in a string value. Missing and
/// `null` fields are absent.
pub fn parse_reply(raw: &str) -> Result<FieldSet, String> {
    let body: Value = serde_json::from_str(strip_fences(raw)).map_err(|e| format!("reply is not JSON: {e}"))?;
    let embedded;
    let map = match find_fields(&body) {
        Some(map) => map,
        None => {
            embedded = find_in_strings(&body).ok_or("no object with name-field keys in reply")?;
            find_fields(&embedded).expect("filtered above")
        }
    };
    let mut fields = FieldSet::new();
    for field in FieldName::ALL {
        match map.get(field.as_str()) {
            None | Some(Value::Null) => {}
            Some(Value::String(s)) => fields.set(field, Some(s.clone())),
            Some(other) => return Err(format!("{field} has non-string value {other}")),
        }
    }
    Ok(fields)
}

/// Live transcriber: serves from the cache, otherwise augments the page,
/// queries the endpoint and persists the reply before returning it.
pub struct RemoteTranscriber {
    pub client: RemoteClient,
    pub cache: Arc<Cache>,
}

impl Transcriber for RemoteTranscriber {
    fn transcribe(&self, job: &Job<'_>) -> Result<FieldSet, TranscribeError> {
        let key = job.cache_key();
        if let Some(hit) = self.cache.lookup(&key) {
            return Ok(hit.fields);
        }
        let page = DocumentImage::load(job.record_id, job.image_path)?;
        let augmented = apply_augmentation(&page, job.spec)?;
        let (fields, raw) = self.client.transcribe(&augmented, job.params)?;
        self.cache.put(RunRecord {
            record_id: key.record_id,
            spec_hash: key.spec_hash,
            params: key.params,
            fields: fields.clone(),
            timestamp: now_millis(),
            raw,
        })?;
        Ok(fields)
    }

    fn is_remote(&self) -> bool {
        true
    }
}

/// Cache-only transcriber; a miss is an error.
pub struct OfflineTranscriber {
    pub cache: Arc<Cache>,
}

impl Transcriber for OfflineTranscriber {
    fn transcribe(&self, job: &Job<'_>) -> Result<FieldSet, TranscribeError> {
        let key = job.cache_key();
        self.cache
            .lookup(&key)
            .map(|r| r.fields)
            .ok_or_else(|| TranscribeError::NotCached(key.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_reply() {
        let fs = parse_reply(r#"{"SelfGivenName": "Nydia", "SelfSurname": null, "FatherGivenName": "Carl"}"#).unwrap();
        assert_eq!(fs.get(FieldName::SelfGivenName), Some("Nydia"));
        assert_eq!(fs.get(FieldName::SelfSurname), None);
        assert_eq!(fs.get(FieldName::FatherSurname), None);
        assert_eq!(fs.get(FieldName::FatherGivenName), Some("Carl"));
    }

    #[test]
    fn parses_nested_and_embedded_replies() {
        let nested = r#"{"result": {"fields": {"SelfSurname": "Kline"}}}"#;
        assert_eq!(parse_reply(nested).unwrap().get(FieldName::SelfSurname), Some("Kline"));
        let embedded = r#"{"candidates": [{"text": "```json\n{\"MotherSurname\": \"Yoder\"}\n```"}]}"#;
        assert_eq!(
            parse_reply(embedded).unwrap().get(FieldName::MotherSurname),
            Some("Yoder")
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_reply("not json").is_err());
        assert!(parse_reply(r#"{"answer": "no names here"}"#).is_err());
        assert!(parse_reply(r#"{"SelfSurname": 4}"#).is_err());
    }

    #[test]
    fn backoff_doubles_up_to_cap() {
        let cfg = EndpointConfig {
            base_backoff_ms: 100,
            max_backoff_ms: 1000,
            ..EndpointConfig::new("http://x", "m")
        };
        let ms: Vec<u128> = (0..6).map(|a| cfg.backoff(a).as_millis()).collect();
        assert_eq!(ms, vec![100, 200, 400, 800, 1000, 1000]);
    }

    #[test]
    fn missing_credential() {
        let cfg = EndpointConfig {
            api_key_env: "TTA_TEST_SURELY_UNSET_KEY".into(),
            ..EndpointConfig::new("http://x", "m")
        };
        assert!(matches!(
            RemoteClient::from_env(cfg),
            Err(TranscribeError::MissingCredential(_))
        ));
    }

    #[test]
    fn limiter_spaces_requests() {
        let limiter = RateLimiter::new(50.0);
        let start = Instant::now();
        for _ in 0..5 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(75));
    }
}
