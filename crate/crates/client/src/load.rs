use std::sync::Arc;
use std::time::{Duration, Instant};

use fluidbench_core::workload::synthesize_prompt;
use fluidbench_core::{ArrivalSchedule, RequestStatus, RunMetadata, RunRecord, WorkloadRequest};

use crate::endpoint::{Prompt, StreamClient};
use crate::ClientError;

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Seed the workload was generated from, recorded in the run metadata.
    pub workload_seed: u64,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Open-loop load: request `i` is dispatched at `schedule.offsets[i]` after
/// the run epoch no matter how many earlier requests are still streaming.
/// Individual failures are recorded in the traces; the run itself only fails
/// on configuration errors.
pub async fn run_load(
    client: &StreamClient,
    requests: &[WorkloadRequest],
    schedule: &ArrivalSchedule,
    options: &LoadOptions,
) -> Result<RunRecord, ClientError> {
    if requests.len() != schedule.len() {
        return Err(ClientError::Config(format!(
            "workload has {} requests but the schedule has {} arrivals",
            requests.len(),
            schedule.len()
        )));
    }
    if schedule.offsets.iter().any(|o| !(o.is_finite() && *o >= 0.0)) {
        return Err(ClientError::Config(
            "schedule offsets must be finite and non-negative".into(),
        ));
    }

    let epoch = Instant::now();
    let start_wall_clock = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true);
    let client = Arc::new(client.clone());
    let mut handles = Vec::with_capacity(requests.len());
    for (i, (req, &offset)) in requests.iter().zip(&schedule.offsets).enumerate() {
        tokio::time::sleep_until((epoch + Duration::from_secs_f64(offset)).into()).await;
        let client = client.clone();
        let req = *req;
        handles.push(tokio::spawn(async move {
            let id = format!("req-{i:05}");
            let text = synthesize_prompt(req.prompt_tokens);
            let prompt = Prompt {
                request_id: &id,
                text: &text,
                prompt_tokens: req.prompt_tokens,
                max_tokens: req.max_output_tokens,
            };
            client.dispatch(epoch, prompt).await
        }));
    }

    let mut traces = Vec::with_capacity(handles.len());
    for h in handles {
        traces.push(
            h.await
                .map_err(|e| ClientError::Config(format!("request worker panicked: {e}")))?,
        );
    }

    let lateness: Vec<f64> = traces
        .iter()
        .zip(&schedule.offsets)
        .map(|(t, o)| t.dispatch_time - o)
        .collect();
    let achieved_qps = match (traces.first(), traces.last()) {
        (Some(a), Some(b)) if traces.len() > 1 && b.dispatch_time > a.dispatch_time => {
            Some((traces.len() - 1) as f64 / (b.dispatch_time - a.dispatch_time))
        }
        _ => None,
    };
    let failed = traces.iter().filter(|t| t.status != RequestStatus::Completed).count();
    if failed > 0 {
        tracing::warn!(failed, total = traces.len(), "requests did not complete");
    }

    let run = RunRecord {
        metadata: RunMetadata {
            endpoint: client.url().to_owned(),
            model: client.config().model.clone(),
            workload_seed: options.workload_seed,
            target_qps: schedule.target_qps,
            start_wall_clock,
            harness_version: env!("CARGO_PKG_VERSION").to_owned(),
            achieved_qps,
            dispatch_lateness_median_s: median(lateness),
        },
        traces,
    };
    Ok(run)
}
