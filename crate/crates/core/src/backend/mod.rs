//! Text generation backends.
//!
//! Every backend implements [`LanguageModel`]: given a rendered prompt and
//! sampling parameters it returns exactly `n` completions ordered by sample
//! index, each carrying token counts.

mod http;
mod replay;
mod template;

pub use http::{HttpBackend, HttpConfig};
pub use replay::{ReplayBackend, ReplayScript};
pub use template::{format_facts, vars, Prompt, RenderError, TemplateId, TemplateSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub n: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            n: 1,
            temperature: 1.0,
            top_p: 0.9,
            max_tokens: 512,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn with_n(&self, n: u32) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.n == 0 {
            return Err(BackendError::InvalidParams("n must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidParams(
                "temperature must be >= 0".into(),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidParams(
                "top_p must lie in (0, 1]".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidParams(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Seed of one sample within a call.
    pub fn sample_seed(&self, sample_index: u32) -> u64 {
        derive_seed!(self.seed.unwrap_or(0), sample_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend_id: String,
    pub sample_index: u32,
    /// Set when the backend returned no text for this sample.
    pub empty: bool,
}

impl Completion {
    pub fn new(
        text: String,
        prompt_tokens: u64,
        completion_tokens: u64,
        backend_id: &str,
        sample_index: u32,
    ) -> Self {
        let empty = text.trim().is_empty();
        if empty {
            log::warn!("{backend_id}: sample {sample_index} returned empty text");
        }
        Self {
            text,
            prompt_tokens,
            completion_tokens,
            backend_id: backend_id.to_string(),
            sample_index,
            empty,
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("replay script has no response for {template} prompt: {prompt}")]
    ScriptExhausted {
        template: TemplateId,
        prompt: String,
    },
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported prompt: {0}")]
    Unsupported(String),
    #[error("missing credentials: {0}")]
    Credentials(String),
}

/// Whitespace-delimited token count used by the offline backends.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

pub trait LanguageModel: Send + Sync {
    fn id(&self) -> &str;

    fn generate(
        &self,
        prompt: &Prompt,
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, BackendError>;

    /// Token counting rule used for `completion_tokens`.
    fn count_tokens(&self, text: &str) -> u64 {
        whitespace_tokens(text)
    }

    /// True when every generated sentence is already an atomic claim, so the
    /// splitter prompt can be skipped.
    fn sentences_are_atomic(&self) -> bool {
        false
    }

    /// Short description for run manifests.
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "id": self.id() })
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(
        &self,
        prompt: &Prompt,
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, BackendError> {
        (**self).generate(prompt, params)
    }
    fn count_tokens(&self, text: &str) -> u64 {
        (**self).count_tokens(text)
    }
    fn sentences_are_atomic(&self) -> bool {
        (**self).sentences_are_atomic()
    }
    fn describe(&self) -> serde_json::Value {
        (**self).describe()
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(
        &self,
        prompt: &Prompt,
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, BackendError> {
        (**self).generate(prompt, params)
    }
    fn count_tokens(&self, text: &str) -> u64 {
        (**self).count_tokens(text)
    }
    fn sentences_are_atomic(&self) -> bool {
        (**self).sentences_are_atomic()
    }
    fn describe(&self) -> serde_json::Value {
        (**self).describe()
    }
}
