//! Model completion behind one interface: a live chat-completion client, a
//! deterministic simulator, and transcript replay, plus a persistent
//! response cache that sits in front of any of them.

mod cache;
mod http;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cache::{CacheStats, ReplayBackend, ResponseCache};
pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use sim::{
    generate_synthetic, simulate_completion, MockBackend, NoiseKind, ProfileFamily, QuestionProfile,
    SimConfig, Simulated,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Divide,
    Conquer,
    Verify,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Divide => "divide",
            Phase::Conquer => "conquer",
            Phase::Verify => "verify",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "divide" => Ok(Phase::Divide),
            "conquer" => Ok(Phase::Conquer),
            "verify" => Ok(Phase::Verify),
            _ => Err(Error::invalid(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub sample_index: u32,
    pub question_id: String,
    pub phase: Phase,
}

impl CompletionRequest {
    pub fn new(
        question_id: impl Into<String>,
        phase: Phase,
        sample_index: u32,
        prompt: impl Into<String>,
        temperature: f64,
        max_output_tokens: u32,
    ) -> Result<Self> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(Error::invalid(format!("temperature {temperature} outside [0, 2]")));
        }
        if max_output_tokens == 0 {
            return Err(Error::invalid("max_output_tokens must be positive"));
        }
        Ok(CompletionRequest {
            prompt: prompt.into(),
            temperature,
            max_output_tokens,
            sample_index,
            question_id: question_id.into(),
            phase,
        })
    }

    /// Stable identity of this request within a run:
    /// `question_id/phase/sample_index/digest`, where the digest covers the
    /// prompt and the sampling parameters.
    pub fn key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prompt.as_bytes());
        h.update([0u8]);
        h.update(self.temperature.to_bits().to_le_bytes());
        h.update(self.max_output_tokens.to_le_bytes());
        let digest = h.finalize();
        format!(
            "{}/{}/{}/{}",
            self.question_id,
            self.phase,
            self.sample_index,
            hex::encode(&digest[..12])
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub backend_tag: String,
}

/// Anything that can turn a prompt into a completion.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion> {
        (**self).complete(req)
    }
}
