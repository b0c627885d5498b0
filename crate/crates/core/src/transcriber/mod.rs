//! The black-box transcriber interface and its implementations.
//!
//! [`Transcriber`] hides whether field sets come from a remote multimodal
//! model ([`RemoteTranscriber`], [`OfflineTranscriber`]) or from the
//! correlated noisy-channel simulator ([`SimulatedTranscriber`]).

mod cache;
mod remote;
mod simulate;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugmentError, AugmentationSpec};
use crate::model::{FieldSet, ImageError};

pub use cache::{now_millis, Cache, CacheError, CacheKey, RunRecord};
pub use remote::{parse_reply, EndpointConfig, OfflineTranscriber, RateLimiter, RemoteClient, RemoteTranscriber};
pub use simulate::{simulate_transcribe, Copula, NoiseModel, NoiseModelError, SimulatedTranscriber};

/// The prompt shipped with the crate.
pub const PROMPT_V1: &str = include_str!("extract_v1.txt");
pub const DEFAULT_TOP_P: f64 = 0.95;

/// Identifies a prompt text: a name plus a hash of its content.
pub fn prompt_ref(name: &str, text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    format!("{name}@{}", hex::encode(&digest[..4]))
}

pub fn default_prompt_ref() -> String {
    prompt_ref("extract-v1", PROMPT_V1)
}

/// Sampling settings for one model query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub model_name: String,
    pub prompt_id: String,
    /// Distinguishes repeated queries with otherwise identical settings.
    pub sample_index: u32,
}

impl GenerationParams {
    pub fn new(model_name: impl Into<String>, temperature: f64) -> Self {
        Self {
            temperature,
            top_p: DEFAULT_TOP_P,
            model_name: model_name.into(),
            prompt_id: default_prompt_ref(),
            sample_index: 0,
        }
    }

    pub fn with_sample(mut self, sample_index: u32) -> Self {
        self.sample_index = sample_index;
        self
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("params serialize").to_string()
    }
}

#[derive(Debug, Error)]
pub enum TranscribeError {
    #[error("request failed after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not parse model reply: {reason}")]
    Unparseable { reason: String, raw: String },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("no cached transcription for {0}")]
    NotCached(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Noise(#[from] NoiseModelError),
}

/// Everything a transcriber may need to answer one query.
#[derive(Debug, Clone, Copy)]
pub struct Job<'a> {
    pub record_id: &'a str,
    pub image_path: &'a Path,
    /// Ground truth; only the simulator reads it.
    pub truth: &'a FieldSet,
    pub spec: &'a AugmentationSpec,
    pub params: &'a GenerationParams,
}

impl Job<'_> {
    pub fn cache_key(&self) -> CacheKey {
        CacheKey::new(self.record_id, self.spec.hash(), self.params.clone())
    }
}

/// Maps an (augmented) document to its six name fields.
pub trait Transcriber: Sync {
    fn transcribe(&self, job: &Job<'_>) -> Result<FieldSet, TranscribeError>;

    /// Whether a call may touch the network.
    fn is_remote(&self) -> bool {
        false
    }
}
