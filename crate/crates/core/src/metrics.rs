//! Per-request latency metrics and the deadline-based fluidity index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prefill::PrefillCurve;
use crate::trace::{RequestTrace, TraceError};

/// Absolute tolerance (seconds) on the "token met its deadline" comparison.
pub const MET_TOLERANCE_S: f64 = 1e-9;
/// Relative nudge applied to the miss quotient before flooring.
pub const FLOOR_REL_EPS: f64 = 1e-9;

pub const DEFAULT_SCHEDULING_SLACK_S: f64 = 0.050;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("decode deadline must be positive, got {0}")]
    DecodeDeadline(f64),
    #[error("scheduling slack must be non-negative, got {0}")]
    SchedulingSlack(f64),
    #[error("prefill deadline must be non-negative, got {0}")]
    PrefillDeadline(f64),
    #[error("inter-token series is empty")]
    EmptySeries,
    #[error("inter-token series entry {index} is {value}, expected a non-negative number")]
    BadGap { index: usize, value: f64 },
    #[error("no values to summarize")]
    EmptyInput,
    #[error("percentile {0} is outside [0, 100]")]
    Percentile(f64),
}

/// Where the first-token deadline comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillDeadline {
    /// Predicted isolated prefill time for the request's prompt length.
    Curve(PrefillCurve),
    /// The same prefill allowance for every prompt length, in seconds.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadlineConfig {
    /// Target time between tokens during decode, in seconds.
    pub decode_deadline: f64,
    /// Extra allowance added to the first-token deadline only.
    pub scheduling_slack: f64,
    pub prefill: PrefillDeadline,
}

impl DeadlineConfig {
    pub fn new(decode_deadline: f64, scheduling_slack: f64, prefill: PrefillDeadline) -> Result<Self, MetricsError> {
        let cfg = Self {
            decode_deadline,
            scheduling_slack,
            prefill,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.decode_deadline > 0.0 && self.decode_deadline.is_finite()) {
            return Err(MetricsError::DecodeDeadline(self.decode_deadline));
        }
        if !(self.scheduling_slack >= 0.0 && self.scheduling_slack.is_finite()) {
            return Err(MetricsError::SchedulingSlack(self.scheduling_slack));
        }
        if let PrefillDeadline::Fixed(v) = self.prefill {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MetricsError::PrefillDeadline(v));
            }
        }
        Ok(())
    }

    pub fn with_decode_deadline(&self, decode_deadline: f64) -> Self {
        Self {
            decode_deadline,
            ..self.clone()
        }
    }

    /// First-token deadline for a prompt of `prompt_tokens` tokens, including
    /// the scheduling slack.
    pub fn prefill_deadline(&self, prompt_tokens: u32) -> f64 {
        let base = match &self.prefill {
            PrefillDeadline::Curve(c) => c.predict(prompt_tokens),
            PrefillDeadline::Fixed(v) => *v,
        };
        base + self.scheduling_slack
    }

    pub fn curve(&self) -> Option<&PrefillCurve> {
        match &self.prefill {
            PrefillDeadline::Curve(c) => Some(c),
            PrefillDeadline::Fixed(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidityResult {
    pub total_deadlines: u64,
    pub missed_deadlines: u64,
    pub index: f64,
}

impl FluidityResult {
    fn from_counts(total: u64, missed: u64) -> Self {
        debug_assert!(missed <= total);
        let index = if total == 0 {
            1.0
        } else {
            (total - missed) as f64 / total as f64
        };
        Self {
            total_deadlines: total,
            missed_deadlines: missed,
            index,
        }
    }

    /// Fraction of deadlines missed; the complement of the index.
    pub fn miss_rate(&self) -> f64 {
        1.0 - self.index
    }

    /// Score for a request that never completed.
    pub fn failed() -> Self {
        Self {
            total_deadlines: 0,
            missed_deadlines: 0,
            index: 0.0,
        }
    }
}

pub fn ttft(trace: &RequestTrace) -> Result<f64, MetricsError> {
    trace.require_completed()?;
    Ok(trace.events[0].timestamp - trace.dispatch_time)
}

/// Decode span divided by decode tokens (all tokens after the first).
/// `None` when the request produced a single token.
pub fn tpot(trace: &RequestTrace) -> Result<Option<f64>, MetricsError> {
    trace.require_completed()?;
    let tokens = trace.total_tokens();
    if tokens < 2 {
        return Ok(None);
    }
    let first = trace.events[0].timestamp;
    let last = trace.events[trace.events.len() - 1].timestamp;
    Ok(Some((last - first) / (tokens - 1) as f64))
}

/// End-to-end latency divided by decode tokens. `None` for single-token output.
pub fn normalized_latency(trace: &RequestTrace) -> Result<Option<f64>, MetricsError> {
    trace.require_completed()?;
    let tokens = trace.total_tokens();
    if tokens < 2 {
        return Ok(None);
    }
    let last = trace.events[trace.events.len() - 1].timestamp;
    Ok(Some((last - trace.dispatch_time) / (tokens - 1) as f64))
}

/// Black-box scheduling delay: observed TTFT minus the isolated prefill time
/// predicted for this prompt length, clamped at zero.
pub fn scheduling_delay_estimate(trace: &RequestTrace, curve: &PrefillCurve) -> Result<f64, MetricsError> {
    let observed = ttft(trace)?;
    Ok((observed - curve.predict(trace.prompt_token_count)).max(0.0))
}

fn check_series(gaps: &[f64], decode_deadline: f64) -> Result<(), MetricsError> {
    if !(decode_deadline > 0.0 && decode_deadline.is_finite()) {
        return Err(MetricsError::DecodeDeadline(decode_deadline));
    }
    if gaps.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    if let Some((index, &value)) = gaps.iter().enumerate().find(|(_, g)| !(**g >= 0.0 && g.is_finite())) {
        return Err(MetricsError::BadGap { index, value });
    }
    Ok(())
}

/// Number of deadlines a late token consumed, given how far past its
/// slack-adjusted deadline it arrived.
fn misses_for(late_by: f64, decode_deadline: f64) -> u64 {
    let q = late_by / decode_deadline;
    (q + FLOOR_REL_EPS * q.max(1.0)).floor() as u64 + 1
}

/// Incremental fluidity scoring, one inter-token gap at a time.
///
/// Early tokens bank slack for later ones; a late token is charged one miss
/// per decode deadline it overran and resets the slack to zero.
#[derive(Debug, Clone)]
pub struct FluidityScorer {
    prefill_deadline: f64,
    decode_deadline: f64,
    slack: f64,
    seen: usize,
    total: u64,
    missed: u64,
}

impl FluidityScorer {
    /// `prefill_deadline` applies to the first gap and must already include
    /// any scheduling slack.
    pub fn new(prefill_deadline: f64, decode_deadline: f64) -> Result<Self, MetricsError> {
        if !(decode_deadline > 0.0 && decode_deadline.is_finite()) {
            return Err(MetricsError::DecodeDeadline(decode_deadline));
        }
        Ok(Self {
            prefill_deadline,
            decode_deadline,
            slack: 0.0,
            seen: 0,
            total: 0,
            missed: 0,
        })
    }

    /// Scores the next gap and returns how many deadlines it missed.
    pub fn observe(&mut self, t: f64) -> u64 {
        let deadline = if self.seen == 0 {
            self.prefill_deadline
        } else {
            self.decode_deadline
        };
        self.seen += 1;
        if t <= deadline + self.slack + MET_TOLERANCE_S {
            self.slack = (self.slack + deadline - t).max(0.0);
            self.total += 1;
            0
        } else {
            let misses = misses_for(t - self.slack - deadline, self.decode_deadline);
            self.missed += misses;
            self.total += misses;
            self.slack = 0.0;
            misses
        }
    }

    pub fn slack(&self) -> f64 {
        self.slack
    }

    pub fn result(&self) -> FluidityResult {
        FluidityResult::from_counts(self.total, self.missed)
    }
}

/// Fluidity index for an inter-token series under explicit deadlines.
pub fn fluidity_with_deadlines(
    gaps: &[f64],
    prefill_deadline: f64,
    decode_deadline: f64,
) -> Result<FluidityResult, MetricsError> {
    check_series(gaps, decode_deadline)?;
    let mut scorer = FluidityScorer::new(prefill_deadline, decode_deadline)?;
    for &t in gaps {
        scorer.observe(t);
    }
    Ok(scorer.result())
}

pub fn fluidity_index(
    gaps: &[f64],
    config: &DeadlineConfig,
    prompt_tokens: u32,
) -> Result<FluidityResult, MetricsError> {
    config.validate()?;
    fluidity_with_deadlines(gaps, config.prefill_deadline(prompt_tokens), config.decode_deadline)
}

/// Reference scorer working on the absolute deadline timeline.
///
/// Token `i` is due at `D_p + i * D_d` until a token misses; a miss at token
/// `s` re-anchors every later deadline to `t_s + (i - s) * D_d`. Each deadline
/// instant that passes before a late token shows up counts as one miss.
pub fn deadline_timeline_oracle(
    gaps: &[f64],
    config: &DeadlineConfig,
    prompt_tokens: u32,
) -> Result<FluidityResult, MetricsError> {
    config.validate()?;
    let d_d = config.decode_deadline;
    check_series(gaps, d_d)?;
    let mut total = 0u64;
    let mut missed = 0u64;
    let mut arrival = 0.0f64;
    // Deadline of the previous token in the current schedule.
    let mut anchor = 0.0f64;
    for (i, &gap) in gaps.iter().enumerate() {
        arrival += gap;
        let due = if i == 0 {
            config.prefill_deadline(prompt_tokens)
        } else {
            anchor + d_d
        };
        if arrival <= due + MET_TOLERANCE_S {
            total += 1;
            anchor = due.max(arrival);
            continue;
        }
        let late_by = arrival - due;
        let reach = late_by * (1.0 + FLOOR_REL_EPS);
        // The deadline at `due` is gone; so is every later instant on the old
        // schedule up to the arrival.
        let mut elapsed = 1u64;
        while elapsed as f64 * d_d <= reach {
            elapsed += 1;
        }
        total += elapsed;
        missed += elapsed;
        anchor = arrival;
    }
    Ok(FluidityResult::from_counts(total, missed))
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(MetricsError::Percentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64) / 100.0 - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Empirical CDF: sorted values paired with `i / n`.
pub fn cdf_points(values: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n))
        .collect())
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
