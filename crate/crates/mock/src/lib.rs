//! Deterministic streaming chat-completion endpoint for end-to-end tests.
//!
//! The mock emits placeholder tokens on a schedule derived from a
//! [`MockProfile`]: a quadratic prefill delay, a fixed decode cadence with
//! optional seeded jitter, periodic stalls, multi-token bursts and a
//! load-dependent slowdown past a configured knee.

mod profile;
mod server;

use std::net::SocketAddr;

use thiserror::Error;

pub use profile::{
    emission_schedule, BurstSpec, Emission, EmissionPlan, MockProfile, PlanStep, PrefillCoefficients, StallSpec,
};
pub use server::{serve, LoggedEmission, MockServer, PROMPT_TOKENS_HEADER, REQUEST_ID_HEADER};

#[derive(Debug, Error)]
pub enum MockError {
    #[error("invalid mock profile: {0}")]
    Profile(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
