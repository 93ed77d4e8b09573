//! Report assembly: summary statistics, per-request rows, CDF series and the
//! fluidity-vs-deadline sweep, written as JSON plus flat CSV tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, DeadlineConfig, MetricsError};
use crate::solver::{self, DeadlineSolution, PreparedRun, SloSpec, SolverError};
use crate::trace::{self, RequestStatus, RunMetadata, RunRecord};

pub const SUMMARY_FILE: &str = "summary.json";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const CDF_TBT_FILE: &str = "cdf_tbt.csv";
pub const CDF_TTFT_FILE: &str = "cdf_ttft.csv";
pub const CDF_MISS_RATE_FILE: &str = "cdf_miss_rate.csv";
pub const SWEEP_FILE: &str = "deadline_sweep.csv";

pub const REQUEST_COLUMNS: [&str; 8] = [
    "request_id",
    "prompt_tokens",
    "ttft_s",
    "tpot_s",
    "norm_latency_s",
    "sched_delay_est_s",
    "fluidity_index",
    "miss_rate",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid deadline sweep: {0}")]
    Sweep(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub deadline: DeadlineConfig,
    pub slo: SloSpec,
    pub resolution: f64,
    /// Decode deadlines (seconds) at which the satisfied fraction is sampled.
    pub sweep: Vec<f64>,
}

/// `count` evenly spaced deadlines `start, start + step, ...`.
pub fn deadline_grid(start: f64, step: f64, count: usize) -> Result<Vec<f64>, ReportError> {
    if !(start > 0.0 && step > 0.0 && count > 0) {
        return Err(ReportError::Sweep(format!(
            "start {start} and step {step} must be positive, count {count} at least 1"
        )));
    }
    Ok((0..count).map(|i| start + step * i as f64).collect())
}

/// 5 ms to 200 ms in 5 ms steps.
pub fn default_sweep() -> Vec<f64> {
    (1..=40).map(|k| k as f64 * 0.005).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub p99: f64,
}

impl Stats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean: metrics::mean(values)?,
            median: metrics::percentile_sorted(&sorted, 50.0),
            p99: metrics::percentile_sorted(&sorted, 99.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    /// Inverse of mean TPOT.
    pub tpot_rate: Option<f64>,
    /// Inverse of p99 TBT. Absent when p99 TBT is zero.
    pub tail_tbt_rate: Option<f64>,
    /// Inverse of the smallest SLO-feasible decode deadline.
    pub fluid_rate: f64,
    pub fluid_deadline: DeadlineSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub completed: usize,
    pub errored: usize,
    pub timed_out: usize,
    pub ttft_s: Option<Stats>,
    pub tbt_s: Option<Stats>,
    pub tpot_s: Option<Stats>,
    pub norm_latency_s: Option<Stats>,
    pub mean_fluidity: Option<f64>,
    /// Fraction of requests meeting the SLO at the configured decode deadline.
    pub satisfied_fraction: Option<f64>,
    pub rates: Option<Rates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub request_id: String,
    pub prompt_tokens: u32,
    pub ttft_s: Option<f64>,
    pub tpot_s: Option<f64>,
    pub norm_latency_s: Option<f64>,
    pub sched_delay_est_s: Option<f64>,
    pub fluidity_index: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub decode_deadline_s: f64,
    pub satisfied_fraction: f64,
    pub mean_fluidity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub metadata: RunMetadata,
    pub deadline: DeadlineConfig,
    pub slo: SloSpec,
    pub summary: Summary,
    pub sweep: Vec<SweepPoint>,
    #[serde(skip)]
    pub rows: Vec<MetricRow>,
    #[serde(skip)]
    pub cdf_tbt: Vec<(f64, f64)>,
    #[serde(skip)]
    pub cdf_ttft: Vec<(f64, f64)>,
    #[serde(skip)]
    pub cdf_miss_rate: Vec<(f64, f64)>,
}

fn cdf_or_empty(values: &[f64]) -> Vec<(f64, f64)> {
    metrics::cdf_points(values).unwrap_or_default()
}

pub fn build_report(run: &RunRecord, options: &ReportOptions) -> Result<ReportBundle, ReportError> {
    options.deadline.validate()?;
    options.slo.validate()?;
    let prepared = PreparedRun::new(&run.traces);
    let fluidity = prepared.fluidity(&options.deadline)?;

    let mut rows = Vec::with_capacity(run.traces.len());
    let (mut ttfts, mut tpots, mut norms, mut tbt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (t, fl) in run.traces.iter().zip(&fluidity) {
        let mut row = MetricRow {
            request_id: t.request_id.clone(),
            prompt_tokens: t.prompt_token_count,
            ttft_s: None,
            tpot_s: None,
            norm_latency_s: None,
            sched_delay_est_s: None,
            fluidity_index: fl.index,
            miss_rate: fl.miss_rate(),
        };
        if t.is_completed() {
            let ttft = metrics::ttft(t)?;
            row.ttft_s = Some(ttft);
            row.tpot_s = metrics::tpot(t)?;
            row.norm_latency_s = metrics::normalized_latency(t)?;
            if let Some(curve) = options.deadline.curve() {
                row.sched_delay_est_s = Some(metrics::scheduling_delay_estimate(t, curve)?);
            }
            ttfts.push(ttft);
            tpots.extend(row.tpot_s);
            norms.extend(row.norm_latency_s);
            tbt.extend_from_slice(&trace::inter_token_times(t).map_err(MetricsError::from)?[1..]);
        }
        rows.push(row);
    }

    let miss_rates: Vec<f64> = rows.iter().map(|r| r.miss_rate).collect();
    let indices: Vec<f64> = rows.iter().map(|r| r.fluidity_index).collect();
    let tpot_stats = Stats::of(&tpots);
    let tbt_stats = Stats::of(&tbt);

    let (satisfied_fraction, rates) = if prepared.is_empty() {
        (None, None)
    } else {
        let fraction = prepared.satisfied_fraction(&options.deadline, &options.slo)?;
        let sol =
            solver::min_feasible_deadline_prepared(&prepared, &options.deadline, &options.slo, options.resolution)?;
        let fluid = solver::fluid_rate_from(sol);
        let rates = Rates {
            tpot_rate: tpot_stats.filter(|s| s.mean > 0.0).map(|s| 1.0 / s.mean),
            tail_tbt_rate: tbt_stats.filter(|s| s.p99 > 0.0).map(|s| 1.0 / s.p99),
            fluid_rate: fluid.tokens_per_s,
            fluid_deadline: fluid.deadline,
        };
        (Some(fraction), Some(rates))
    };

    let mut sweep = Vec::with_capacity(options.sweep.len());
    if !prepared.is_empty() {
        for &d in &options.sweep {
            let cfg = options.deadline.with_decode_deadline(d);
            let results = prepared.fluidity(&cfg)?;
            let mean_fluidity = results.iter().map(|r| r.index).sum::<f64>() / results.len() as f64;
            sweep.push(SweepPoint {
                decode_deadline_s: d,
                satisfied_fraction: prepared.satisfied_fraction(&cfg, &options.slo)?,
                mean_fluidity,
            });
        }
    }

    let summary = Summary {
        requests: run.traces.len(),
        completed: run.count_by_status(RequestStatus::Completed),
        errored: run.count_by_status(RequestStatus::Errored),
        timed_out: run.count_by_status(RequestStatus::TimedOut),
        ttft_s: Stats::of(&ttfts),
        tbt_s: tbt_stats,
        tpot_s: tpot_stats,
        norm_latency_s: Stats::of(&norms),
        mean_fluidity: metrics::mean(&indices),
        satisfied_fraction,
        rates,
    };

    Ok(ReportBundle {
        metadata: run.metadata.clone(),
        deadline: options.deadline.clone(),
        slo: options.slo.clone(),
        summary,
        sweep,
        rows,
        cdf_tbt: cdf_or_empty(&tbt),
        cdf_ttft: cdf_or_empty(&ttfts),
        cdf_miss_rate: cdf_or_empty(&miss_rates),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl ReportBundle {
    pub fn summary_json(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn requests_csv(&self) -> String {
        let mut out = REQUEST_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                csv_field(&r.request_id),
                r.prompt_tokens,
                opt(r.ttft_s),
                opt(r.tpot_s),
                opt(r.norm_latency_s),
                opt(r.sched_delay_est_s),
                r.fluidity_index,
                r.miss_rate
            );
        }
        out
    }

    fn cdf_csv(points: &[(f64, f64)], value_column: &str) -> String {
        let mut out = format!("{value_column},cumulative_fraction\n");
        for (v, f) in points {
            let _ = writeln!(out, "{v},{f}");
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("decode_deadline_s,satisfied_fraction,mean_fluidity\n");
        for p in &self.sweep {
            let _ = writeln!(
                out,
                "{},{},{}",
                p.decode_deadline_s, p.satisfied_fraction, p.mean_fluidity
            );
        }
        out
    }

    /// All report files as (file name, contents), in a fixed order.
    pub fn files(&self) -> Result<Vec<(&'static str, String)>, ReportError> {
        Ok(vec![
            (SUMMARY_FILE, self.summary_json()?),
            (REQUESTS_FILE, self.requests_csv()),
            (CDF_TBT_FILE, Self::cdf_csv(&self.cdf_tbt, "tbt_s")),
            (CDF_TTFT_FILE, Self::cdf_csv(&self.cdf_ttft, "ttft_s")),
            (CDF_MISS_RATE_FILE, Self::cdf_csv(&self.cdf_miss_rate, "miss_rate")),
            (SWEEP_FILE, self.sweep_csv()),
        ])
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), ReportError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, contents) in self.files()? {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PrefillDeadline;
    use crate::prefill::PrefillCurve;
    use crate::trace::{RequestTrace, TokenEvent};

    fn meta() -> RunMetadata {
        RunMetadata {
            endpoint: "mock".into(),
            model: "m".into(),
            workload_seed: 1,
            target_qps: 1.0,
            start_wall_clock: "2026-01-01T00:00:00Z".into(),
            harness_version: "0.1.0".into(),
            achieved_qps: None,
            dispatch_lateness_median_s: None,
        }
    }

    fn run() -> RunRecord {
        let mut traces = Vec::new();
        for i in 0..5 {
            let d = i as f64;
            traces.push(RequestTrace {
                request_id: format!("req-{i}"),
                dispatch_time: d,
                prompt_token_count: 100 * (i + 1),
                events: (0..20).map(|k| TokenEvent::new(d + 0.2 + 0.02 * k as f64, 1)).collect(),
                status: RequestStatus::Completed,
            });
        }
        traces.push(RequestTrace {
            request_id: "req-burst".into(),
            dispatch_time: 0.5,
            prompt_token_count: 64,
            events: vec![TokenEvent::new(0.7, 1), TokenEvent::new(0.76, 3)],
            status: RequestStatus::Completed,
        });
        traces.push(RequestTrace {
            request_id: "req-err".into(),
            dispatch_time: 1.5,
            prompt_token_count: 64,
            events: vec![TokenEvent::new(1.7, 1)],
            status: RequestStatus::Errored,
        });
        RunRecord {
            metadata: meta(),
            traces,
        }
    }

    fn options(prefill: PrefillDeadline) -> ReportOptions {
        ReportOptions {
            deadline: DeadlineConfig::new(0.025, 0.05, prefill).unwrap(),
            slo: SloSpec::default(),
            resolution: 0.001,
            sweep: default_sweep(),
        }
    }

    #[test]
    fn rates_are_inverses() {
        let report = build_report(&run(), &options(PrefillDeadline::Fixed(0.2))).unwrap();
        let s = &report.summary;
        let rates = s.rates.as_ref().unwrap();
        assert_eq!(rates.tpot_rate.unwrap(), 1.0 / s.tpot_s.unwrap().mean);
        assert_eq!(rates.tail_tbt_rate.unwrap(), 1.0 / s.tbt_s.unwrap().p99);
        if !rates.fluid_deadline.saturated {
            assert_eq!(rates.fluid_rate, 1.0 / rates.fluid_deadline.deadline_s);
        }
    }

    #[test]
    fn cdf_shapes() {
        let report = build_report(&run(), &options(PrefillDeadline::Fixed(0.2))).unwrap();
        for (cdf, n) in [
            (&report.cdf_ttft, 6),
            (&report.cdf_miss_rate, 7),
            (&report.cdf_tbt, 5 * 19 + 3),
        ] {
            assert_eq!(cdf.len(), n);
            assert_eq!(cdf.last().unwrap().1, 1.0);
            assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
        }
    }

    #[test]
    fn errored_rows_have_empty_latencies() {
        let report = build_report(&run(), &options(PrefillDeadline::Fixed(0.2))).unwrap();
        let csv = report.requests_csv();
        assert!(csv.starts_with(
            "request_id,prompt_tokens,ttft_s,tpot_s,norm_latency_s,sched_delay_est_s,fluidity_index,miss_rate\n"
        ));
        assert!(csv.contains("req-err,64,,,,,0,1\n"), "{csv}");
        assert_eq!(csv.lines().count(), 8);
    }

    #[test]
    fn curve_enables_scheduling_delay_column() {
        let report = build_report(&run(), &options(PrefillDeadline::Curve(PrefillCurve::constant(0.15)))).unwrap();
        let row = &report.rows[0];
        assert!((row.sched_delay_est_s.unwrap() - 0.05).abs() < 1e-9);
    }

    #[test]
    fn sweep_is_monotone() {
        let report = build_report(&run(), &options(PrefillDeadline::Fixed(0.2))).unwrap();
        assert_eq!(report.sweep.len(), 40);
        assert!(report
            .sweep
            .windows(2)
            .all(|w| w[0].satisfied_fraction <= w[1].satisfied_fraction && w[0].mean_fluidity <= w[1].mean_fluidity));
    }

    #[test]
    fn empty_run_produces_empty_series() {
        let report = build_report(&RunRecord::new(meta()), &options(PrefillDeadline::Fixed(0.2))).unwrap();
        assert_eq!(report.summary.requests, 0);
        assert!(report.summary.rates.is_none());
        assert!(report.cdf_ttft.is_empty());
        assert!(report.sweep.is_empty());
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let a = build_report(&run(), &options(PrefillDeadline::Fixed(0.2))).unwrap();
        let b = build_report(&run(), &options(PrefillDeadline::Fixed(0.2))).unwrap();
        assert_eq!(a.files().unwrap(), b.files().unwrap());
    }

    #[test]
    fn csv_quotes_awkward_ids() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("x\"y"), "\"x\"\"y\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn grid_validation() {
        assert_eq!(deadline_grid(0.01, 0.01, 3).unwrap().len(), 3);
        assert!(deadline_grid(0.0, 0.01, 3).is_err());
    }
}
