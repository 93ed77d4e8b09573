//! Timestamped request traces and the line-delimited run file format.
//!
//! All timestamps are seconds relative to a per-run epoch taken from a
//! monotonic clock when the run starts. The wall-clock start time is kept once
//! in [`RunMetadata`].

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("run file has no metadata header line")]
    MissingHeader,
    #[error("request {request_id}: {reason}")]
    Validation { request_id: String, reason: String },
    #[error("request id {0} appears more than once")]
    DuplicateId(String),
    #[error("request {request_id} is {status}, only completed traces have an inter-token series")]
    NotCompleted { request_id: String, status: RequestStatus },
    #[error("request {0} has no token events")]
    Empty(String),
}

/// One observed emission instant. A single event may carry several tokens
/// when the server delivers a burst.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, u32)", into = "(f64, u32)")]
pub struct TokenEvent {
    pub timestamp: f64,
    pub token_count: u32,
}

impl TokenEvent {
    pub fn new(timestamp: f64, token_count: u32) -> Self {
        Self { timestamp, token_count }
    }
}

impl From<(f64, u32)> for TokenEvent {
    fn from((timestamp, token_count): (f64, u32)) -> Self {
        Self::new(timestamp, token_count)
    }
}

impl From<TokenEvent> for (f64, u32) {
    fn from(e: TokenEvent) -> Self {
        (e.timestamp, e.token_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    Errored,
    TimedOut,
}

impl fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestStatus::Completed => "completed",
            RequestStatus::Errored => "errored",
            RequestStatus::TimedOut => "timed_out",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub request_id: String,
    pub dispatch_time: f64,
    pub prompt_token_count: u32,
    pub events: Vec<TokenEvent>,
    pub status: RequestStatus,
}

impl RequestTrace {
    pub fn is_completed(&self) -> bool {
        self.status == RequestStatus::Completed
    }

    /// Number of output tokens delivered across all events.
    pub fn total_tokens(&self) -> u64 {
        self.events.iter().map(|e| u64::from(e.token_count)).sum()
    }

    pub fn first_event(&self) -> Option<&TokenEvent> {
        self.events.first()
    }

    pub fn last_event(&self) -> Option<&TokenEvent> {
        self.events.last()
    }

    /// Checks the per-trace invariants.
    pub fn validate(&self) -> Result<(), TraceError> {
        let fail = |reason: String| {
            Err(TraceError::Validation {
                request_id: self.request_id.clone(),
                reason,
            })
        };
        if !self.dispatch_time.is_finite() || self.dispatch_time < 0.0 {
            return fail(format!(
                "dispatch_time {} is not a non-negative number",
                self.dispatch_time
            ));
        }
        if self.prompt_token_count == 0 {
            return fail("prompt_token_count must be at least 1".into());
        }
        if self.status == RequestStatus::Completed && self.events.is_empty() {
            return fail("completed trace has no token events".into());
        }
        let mut prev = self.dispatch_time;
        for (i, e) in self.events.iter().enumerate() {
            if e.token_count == 0 {
                return fail(format!("event {i} has token_count 0"));
            }
            if !e.timestamp.is_finite() || e.timestamp < 0.0 {
                return fail(format!(
                    "event {i} timestamp {} is not a non-negative number",
                    e.timestamp
                ));
            }
            if e.timestamp < self.dispatch_time {
                return fail(format!(
                    "event {i} at {} precedes dispatch_time {}",
                    e.timestamp, self.dispatch_time
                ));
            }
            if e.timestamp < prev {
                return fail(format!(
                    "event {i} at {} is earlier than the previous event",
                    e.timestamp
                ));
            }
            prev = e.timestamp;
        }
        Ok(())
    }

    /// Checks the preconditions shared by every per-request metric.
    pub fn require_completed(&self) -> Result<(), TraceError> {
        if self.status != RequestStatus::Completed {
            return Err(TraceError::NotCompleted {
                request_id: self.request_id.clone(),
                status: self.status,
            });
        }
        if self.events.is_empty() {
            return Err(TraceError::Empty(self.request_id.clone()));
        }
        Ok(())
    }
}

/// Per-token gap series of a completed trace.
///
/// Element 0 is the first-token latency measured from dispatch. Each later
/// event contributes its gap from the previous event on its first token and
/// exactly zero for every additional token it carries, so the series length
/// equals the total token count.
pub fn inter_token_times(trace: &RequestTrace) -> Result<Vec<f64>, TraceError> {
    trace.require_completed()?;
    let mut out = Vec::with_capacity(trace.total_tokens() as usize);
    let mut prev = trace.dispatch_time;
    for e in &trace.events {
        out.push(e.timestamp - prev);
        out.extend(std::iter::repeat_n(0.0, e.token_count as usize - 1));
        prev = e.timestamp;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub endpoint: String,
    pub model: String,
    pub workload_seed: u64,
    pub target_qps: f64,
    /// RFC 3339 wall-clock time at which the run epoch was captured.
    pub start_wall_clock: String,
    pub harness_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_qps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispatch_lateness_median_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub metadata: RunMetadata,
    pub traces: Vec<RequestTrace>,
}

impl RunRecord {
    pub fn new(metadata: RunMetadata) -> Self {
        Self {
            metadata,
            traces: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let mut seen = HashSet::with_capacity(self.traces.len());
        for t in &self.traces {
            if !seen.insert(t.request_id.as_str()) {
                return Err(TraceError::DuplicateId(t.request_id.clone()));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn completed(&self) -> impl Iterator<Item = &RequestTrace> {
        self.traces.iter().filter(|t| t.is_completed())
    }

    pub fn count_by_status(&self, status: RequestStatus) -> usize {
        self.traces.iter().filter(|t| t.status == status).count()
    }

    /// Returns a copy with the first `warmup` traces by dispatch order removed.
    pub fn without_warmup(&self, warmup: usize) -> RunRecord {
        let mut order: Vec<&RequestTrace> = self.traces.iter().collect();
        order.sort_by(|a, b| a.dispatch_time.total_cmp(&b.dispatch_time));
        RunRecord {
            metadata: self.metadata.clone(),
            traces: order.into_iter().skip(warmup).cloned().collect(),
        }
    }
}

/// Writes a validated run as line-delimited JSON: the metadata object on the
/// first line followed by one trace object per line.
pub fn write_run<W: Write>(run: &RunRecord, mut out: W) -> Result<(), TraceError> {
    run.validate()?;
    serde_json::to_writer(&mut out, &run.metadata).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for t in &run.traces {
        serde_json::to_writer(&mut out, t).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and validates a run written by [`write_run`]. Blank lines are skipped.
pub fn read_run<R: BufRead>(input: R) -> Result<RunRecord, TraceError> {
    let mut metadata = None;
    let mut traces = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        if metadata.is_none() {
            metadata = Some(
                serde_json::from_str::<RunMetadata>(&line)
                    .map_err(|source| TraceError::Parse { line: lineno, source })?,
            );
        } else {
            traces.push(
                serde_json::from_str::<RequestTrace>(&line)
                    .map_err(|source| TraceError::Parse { line: lineno, source })?,
            );
        }
    }
    let run = RunRecord {
        metadata: metadata.ok_or(TraceError::MissingHeader)?,
        traces,
    };
    run.validate()?;
    Ok(run)
}

pub fn save_run(run: &RunRecord, path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_run(run, BufWriter::new(File::create(path)?))
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RunRecord, TraceError> {
    read_run(BufReader::new(File::open(path)?))
}
