//! SLO-constrained searches over fluidity: the smallest decode deadline a
//! recorded run can sustain, and the highest load an endpoint can sustain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, DeadlineConfig, FluidityResult, MetricsError};
use crate::trace::{self, RequestTrace, RunRecord};

pub const DEFAULT_FLUIDITY_THRESHOLD: f64 = 0.9;
pub const DEFAULT_REQUEST_FRACTION: f64 = 0.99;
pub const DEFAULT_RESOLUTION_S: f64 = 0.001;
pub const MAX_DECODE_DEADLINE_S: f64 = 10.0;
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 0.1;
pub const DEFAULT_WARMUP: usize = 20;
pub const DEFAULT_PROBE_REQUESTS: usize = 200;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("run has no requests")]
    EmptyRun,
    #[error("invalid SLO: {0}")]
    Slo(String),
    #[error("search resolution must be in (0, {MAX_DECODE_DEADLINE_S}] seconds, got {0}")]
    Resolution(f64),
    #[error("capacity search needs a decode deadline in the SLO")]
    MissingDecodeDeadline,
    #[error("invalid QPS bounds [{0}, {1}]")]
    Bounds(f64, f64),
    #[error("relative tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloSpec {
    /// Minimum fluidity index a request needs to count as satisfied.
    pub fluidity_threshold: f64,
    /// Fraction of requests that must be satisfied.
    pub request_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_deadline: Option<f64>,
}

impl Default for SloSpec {
    fn default() -> Self {
        Self {
            fluidity_threshold: DEFAULT_FLUIDITY_THRESHOLD,
            request_fraction: DEFAULT_REQUEST_FRACTION,
            decode_deadline: None,
        }
    }
}

impl SloSpec {
    pub fn validate(&self) -> Result<(), SolverError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.fluidity_threshold) {
            return Err(SolverError::Slo(format!(
                "fluidity threshold {} is outside (0, 1]",
                self.fluidity_threshold
            )));
        }
        if !unit(self.request_fraction) {
            return Err(SolverError::Slo(format!(
                "request fraction {} is outside (0, 1]",
                self.request_fraction
            )));
        }
        if let Some(d) = self.decode_deadline {
            if !(d > 0.0 && d.is_finite()) {
                return Err(SolverError::Slo(format!("decode deadline {d} must be positive")));
            }
        }
        Ok(())
    }
}

/// Inter-token series of every request, computed once so repeated scoring
/// under different deadlines does not re-derive them.
pub struct PreparedRun {
    // None for requests that did not complete.
    series: Vec<Option<(Vec<f64>, u32)>>,
}

impl PreparedRun {
    pub fn new(traces: &[RequestTrace]) -> Self {
        let series = traces
            .iter()
            .map(|t| {
                trace::inter_token_times(t)
                    .ok()
                    .map(|gaps| (gaps, t.prompt_token_count))
            })
            .collect();
        Self { series }
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Per-request fluidity; requests that did not complete score zero.
    pub fn fluidity(&self, config: &DeadlineConfig) -> Result<Vec<FluidityResult>, MetricsError> {
        config.validate()?;
        self.series
            .iter()
            .map(|s| match s {
                Some((gaps, prompt)) => {
                    metrics::fluidity_with_deadlines(gaps, config.prefill_deadline(*prompt), config.decode_deadline)
                }
                None => Ok(FluidityResult::failed()),
            })
            .collect()
    }

    pub fn satisfied_fraction(&self, config: &DeadlineConfig, slo: &SloSpec) -> Result<f64, SolverError> {
        if self.is_empty() {
            return Err(SolverError::EmptyRun);
        }
        slo.validate()?;
        let ok = self
            .fluidity(config)?
            .iter()
            .filter(|r| r.index >= slo.fluidity_threshold)
            .count();
        Ok(ok as f64 / self.len() as f64)
    }

    fn meets(&self, config: &DeadlineConfig, slo: &SloSpec) -> Result<bool, SolverError> {
        Ok(self.satisfied_fraction(config, slo)? >= slo.request_fraction)
    }
}

/// Fraction of requests whose fluidity index reaches the SLO threshold.
/// Errored and timed-out requests count as index 0.
pub fn slo_satisfied_fraction(run: &RunRecord, config: &DeadlineConfig, slo: &SloSpec) -> Result<f64, SolverError> {
    PreparedRun::new(&run.traces).satisfied_fraction(config, slo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadlineSolution {
    /// Smallest feasible decode deadline on the grid, or the search ceiling
    /// when `saturated`.
    pub deadline_s: f64,
    pub grid_steps: u64,
    pub saturated: bool,
}

fn grid_len(resolution: f64) -> Result<u64, SolverError> {
    if !(resolution > 0.0 && resolution <= MAX_DECODE_DEADLINE_S) {
        return Err(SolverError::Resolution(resolution));
    }
    Ok((MAX_DECODE_DEADLINE_S / resolution).round().max(1.0) as u64)
}

/// Binary search for the smallest decode deadline `k * resolution` under
/// which the run meets the SLO. Fluidity never decreases as the deadline
/// grows, so the predicate is monotone over the grid.
pub fn min_feasible_deadline(
    run: &RunRecord,
    template: &DeadlineConfig,
    slo: &SloSpec,
    resolution: f64,
) -> Result<DeadlineSolution, SolverError> {
    min_feasible_deadline_prepared(&PreparedRun::new(&run.traces), template, slo, resolution)
}

pub fn min_feasible_deadline_prepared(
    prepared: &PreparedRun,
    template: &DeadlineConfig,
    slo: &SloSpec,
    resolution: f64,
) -> Result<DeadlineSolution, SolverError> {
    if prepared.is_empty() {
        return Err(SolverError::EmptyRun);
    }
    slo.validate()?;
    let steps = grid_len(resolution)?;
    let at = |k: u64| template.with_decode_deadline(k as f64 * resolution);

    if !prepared.meets(&at(steps), slo)? {
        return Ok(DeadlineSolution {
            deadline_s: steps as f64 * resolution,
            grid_steps: steps,
            saturated: true,
        });
    }
    // Invariant: predicate(hi) holds; predicate(k) fails for every k < lo.
    let (mut lo, mut hi) = (1u64, steps);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if prepared.meets(&at(mid), slo)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(DeadlineSolution {
        deadline_s: hi as f64 * resolution,
        grid_steps: hi,
        saturated: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidRate {
    /// Tokens per second; zero when the deadline search saturated.
    pub tokens_per_s: f64,
    pub deadline: DeadlineSolution,
}

pub fn fluid_rate(
    run: &RunRecord,
    template: &DeadlineConfig,
    slo: &SloSpec,
    resolution: f64,
) -> Result<FluidRate, SolverError> {
    let deadline = min_feasible_deadline(run, template, slo, resolution)?;
    Ok(fluid_rate_from(deadline))
}

pub fn fluid_rate_from(deadline: DeadlineSolution) -> FluidRate {
    FluidRate {
        tokens_per_s: if deadline.saturated {
            0.0
        } else {
            1.0 / deadline.deadline_s
        },
        deadline,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityProbe {
    pub qps: f64,
    pub satisfied_fraction: f64,
    pub passed: bool,
    pub p99_tbt_s: Option<f64>,
    pub mean_tpot_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityStatus {
    /// Capacity lies between the returned load and the smallest failing probe.
    Bracketed,
    /// Even the upper bound met the SLO.
    Unsaturated,
    /// The lower bound itself failed; `capacity_qps` is zero.
    BelowLowerBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub capacity_qps: f64,
    pub status: CapacityStatus,
    pub slo: SloSpec,
    pub trajectory: Vec<CapacityProbe>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityOptions {
    pub relative_tolerance: f64,
    /// Requests per probe dropped from scoring, earliest dispatches first.
    pub warmup: usize,
}

impl Default for CapacityOptions {
    fn default() -> Self {
        Self {
            relative_tolerance: DEFAULT_RELATIVE_TOLERANCE,
            warmup: DEFAULT_WARMUP,
        }
    }
}

#[derive(Debug, Error)]
pub enum CapacityError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("run at {qps} QPS failed: {source}")]
    Runner {
        qps: f64,
        #[source]
        source: E,
        trajectory: Vec<CapacityProbe>,
    },
}

/// Scores one probe run against the SLO after dropping warmup requests.
pub fn score_probe(
    qps: f64,
    run: &RunRecord,
    config: &DeadlineConfig,
    slo: &SloSpec,
    warmup: usize,
) -> Result<CapacityProbe, SolverError> {
    let steady = run.without_warmup(warmup);
    let satisfied_fraction = slo_satisfied_fraction(&steady, config, slo)?;
    let mut tbt = Vec::new();
    let mut tpots = Vec::new();
    for t in steady.completed() {
        let gaps = trace::inter_token_times(t).map_err(MetricsError::from)?;
        tbt.extend_from_slice(&gaps[1..]);
        if let Some(v) = metrics::tpot(t)? {
            tpots.push(v);
        }
    }
    Ok(CapacityProbe {
        qps,
        satisfied_fraction,
        passed: satisfied_fraction >= slo.request_fraction,
        p99_tbt_s: metrics::percentile(&tbt, 99.0).ok(),
        mean_tpot_s: metrics::mean(&tpots),
    })
}

/// Bracketed search for the highest load meeting the SLO.
///
/// `runner` executes one complete run at the given QPS. Probes never overlap.
/// The upper bound is probed first; the bracket is then halved geometrically
/// until `hi / lo <= 1 + relative_tolerance`. The lower bound is only probed
/// if no midpoint passed.
pub fn capacity_search<F, E>(
    mut runner: F,
    config: &DeadlineConfig,
    slo: &SloSpec,
    qps_bounds: (f64, f64),
    options: CapacityOptions,
) -> Result<CapacityResult, CapacityError<E>>
where
    F: FnMut(f64) -> Result<RunRecord, E>,
    E: std::error::Error + 'static,
{
    slo.validate()?;
    let decode_deadline = slo.decode_deadline.ok_or(SolverError::MissingDecodeDeadline)?;
    let config = config.with_decode_deadline(decode_deadline);
    config.validate().map_err(SolverError::from)?;
    let (mut lo, mut hi) = qps_bounds;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(SolverError::Bounds(lo, hi).into());
    }
    if !(options.relative_tolerance > 0.0) {
        return Err(SolverError::Tolerance(options.relative_tolerance).into());
    }

    let mut trajectory: Vec<CapacityProbe> = Vec::new();
    let mut probe = |qps: f64, trajectory: &mut Vec<CapacityProbe>| -> Result<bool, CapacityError<E>> {
        let run = match runner(qps) {
            Ok(run) => run,
            Err(source) => {
                return Err(CapacityError::Runner {
                    qps,
                    source,
                    trajectory: trajectory.clone(),
                })
            }
        };
        let p = score_probe(qps, &run, &config, slo, options.warmup)?;
        let passed = p.passed;
        trajectory.push(p);
        Ok(passed)
    };

    let finish = |capacity_qps, status, trajectory| CapacityResult {
        capacity_qps,
        status,
        slo: slo.clone(),
        trajectory,
    };

    if probe(hi, &mut trajectory)? {
        return Ok(finish(hi, CapacityStatus::Unsaturated, trajectory));
    }
    let mut lo_verified = false;
    while hi / lo > 1.0 + options.relative_tolerance {
        let mid = (lo * hi).sqrt();
        if probe(mid, &mut trajectory)? {
            lo = mid;
            lo_verified = true;
        } else {
            hi = mid;
        }
    }
    if !lo_verified && !probe(lo, &mut trajectory)? {
        return Ok(finish(0.0, CapacityStatus::BelowLowerBound, trajectory));
    }
    Ok(finish(lo, CapacityStatus::Bracketed, trajectory))
}
