//! Streaming chat-completion client for latency benchmarking.
//!
//! Every content-bearing stream event is stamped with a process-wide
//! monotonic clock relative to a run epoch, so traces from concurrent
//! requests share one time base.

mod endpoint;
mod load;
mod profile;
pub mod sse;

use thiserror::Error;

pub use endpoint::{EndpointConfig, StreamClient, TokenCountMode, DEFAULT_PATH, DEFAULT_TIMEOUT, PROMPT_TOKENS_HEADER};
pub use load::{run_load, LoadOptions};
pub use profile::{profile_prefill, ProfileFailure, ProfileOutcome};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("environment variable {0} holding the auth token is not set")]
    MissingAuth(String),
    #[error("http client: {0}")]
    Http(#[from] reqwest::Error),
    #[error("prefill profiling produced no samples ({} failed requests; first: {})", .0.len(), .0.first().map_or("n/a", |f| f.reason.as_str()))]
    ProfileFailed(Vec<ProfileFailure>),
}
