use std::time::Instant;

use fluidbench_core::workload::synthesize_prompt;
use fluidbench_core::ProfileSample;

use crate::endpoint::{Prompt, StreamClient};
use crate::ClientError;

/// A profiling request that produced no sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileFailure {
    pub prompt_tokens: u32,
    pub repeat: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ProfileOutcome {
    pub samples: Vec<ProfileSample>,
    pub failures: Vec<ProfileFailure>,
}

/// Measure time to first token for each length, `repeats` times, strictly
/// one request at a time and asking for a single output token.
pub async fn profile_prefill(
    client: &StreamClient,
    lengths: &[u32],
    repeats: u32,
) -> Result<ProfileOutcome, ClientError> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(ClientError::Config(
            "profile lengths must be non-empty and positive".into(),
        ));
    }
    if repeats == 0 {
        return Err(ClientError::Config("repeats must be at least 1".into()));
    }
    let mut out = ProfileOutcome::default();
    let epoch = Instant::now();
    for &length in lengths {
        let text = synthesize_prompt(length);
        for repeat in 0..repeats {
            let id = format!("profile-{length}-{repeat}");
            let trace = client
                .dispatch(
                    epoch,
                    Prompt {
                        request_id: &id,
                        text: &text,
                        prompt_tokens: length,
                        max_tokens: 1,
                    },
                )
                .await;
            match trace.first_event() {
                Some(first) if trace.is_completed() => out.samples.push(ProfileSample {
                    prompt_token_count: length,
                    observed_ttft: first.timestamp - trace.dispatch_time,
                }),
                _ => out.failures.push(ProfileFailure {
                    prompt_tokens: length,
                    repeat,
                    reason: format!("request ended {:?}", trace.status),
                }),
            }
        }
    }
    if out.samples.is_empty() {
        return Err(ClientError::ProfileFailed(out.failures));
    }
    if !out.failures.is_empty() {
        tracing::warn!(failed = out.failures.len(), "some profiling requests failed");
    }
    Ok(out)
}
