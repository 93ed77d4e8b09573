use std::net::IpAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fluidbench_client::{EndpointConfig, TokenCountMode};
use fluidbench_core::metrics::{DeadlineConfig, PrefillDeadline, DEFAULT_SCHEDULING_SLACK_S};
use fluidbench_core::report::{deadline_grid, ReportOptions};
use fluidbench_core::solver::{
    DEFAULT_FLUIDITY_THRESHOLD, DEFAULT_PROBE_REQUESTS, DEFAULT_RELATIVE_TOLERANCE, DEFAULT_REQUEST_FRACTION,
    DEFAULT_WARMUP,
};
use fluidbench_core::workload::{PromptLengthSource, WorkloadSpec, DEFAULT_MAX_OUTPUT_TOKENS};
use fluidbench_core::{PrefillCurve, SloSpec};

#[derive(Debug, Parser)]
#[command(
    name = "fluidbench",
    version,
    about = "Benchmark streaming token-generation endpoints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure isolated prefill latency across prompt lengths and fit a curve.
    ProfilePrefill(ProfileArgs),
    /// Run one open-loop load test and write the run file and report.
    Run(RunArgs),
    /// Re-analyze a stored run file.
    Analyze(AnalyzeArgs),
    /// Search for the highest request rate that still meets the SLO.
    Capacity(CapacityArgs),
    /// Serve a deterministic mock endpoint until interrupted.
    MockServe(MockArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeadlineTier {
    /// 25 ms between tokens (interactive chat).
    Strict,
    /// 50 ms between tokens.
    Medium,
    /// 100 ms between tokens.
    Relaxed,
}

impl DeadlineTier {
    pub fn seconds(self) -> f64 {
        match self {
            Self::Strict => 0.025,
            Self::Medium => 0.050,
            Self::Relaxed => 0.100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenMode {
    /// Every stream event is one token.
    PerChunk,
    /// ceil(characters / 4) tokens per stream event.
    Chars,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arrivals {
    /// Exponential inter-arrival times (open-loop Poisson process).
    Poisson,
    /// Evenly spaced arrivals at exactly the target rate.
    Uniform,
}

#[derive(Debug, Clone, Args)]
pub struct EndpointArgs {
    /// Base URL of the endpoint, e.g. http://127.0.0.1:8000
    #[arg(long)]
    pub endpoint: String,
    /// Request path appended to the base URL.
    #[arg(long, default_value = fluidbench_client::DEFAULT_PATH)]
    pub path: String,
    /// Model name sent in each request.
    #[arg(long, default_value = "default")]
    pub model: String,
    /// Environment variable holding the bearer token. Required for
    /// non-loopback endpoints; optional for local ones.
    #[arg(long, default_value = "FLUIDBENCH_API_KEY")]
    pub auth_env: String,
    /// Extra request header as NAME:VALUE (repeatable).
    #[arg(long = "header", value_name = "NAME:VALUE")]
    pub headers: Vec<String>,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 300.0)]
    pub timeout_s: f64,
    /// How stream events are converted into token counts.
    #[arg(long, value_enum, default_value_t = TokenMode::PerChunk)]
    pub token_mode: TokenMode,
    /// Do not send the declared prompt length header.
    #[arg(long)]
    pub no_prompt_header: bool,
}

fn is_loopback(base_url: &str) -> bool {
    let host = base_url
        .split_once("://")
        .map_or(base_url, |(_, rest)| rest)
        .split('/')
        .next()
        .unwrap_or("");
    let host = if let Some(rest) = host.strip_prefix('[') {
        rest.split(']').next().unwrap_or("")
    } else {
        host.rsplit_once(':').map_or(host, |(h, _)| h)
    };
    host.eq_ignore_ascii_case("localhost") || host.parse::<IpAddr>().is_ok_and(|ip| ip.is_loopback())
}

impl EndpointArgs {
    pub fn config(&self) -> Result<EndpointConfig> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            bail!("--timeout-s must be positive");
        }
        let mut cfg = EndpointConfig::new(self.endpoint.clone(), self.model.clone());
        cfg.path = self.path.clone();
        cfg.timeout = Duration::from_secs_f64(self.timeout_s);
        cfg.token_mode = match self.token_mode {
            TokenMode::PerChunk => TokenCountMode::PerChunk,
            TokenMode::Chars => TokenCountMode::CharsHeuristic,
        };
        cfg.declare_prompt_tokens = !self.no_prompt_header;
        for h in &self.headers {
            let (k, v) = h
                .split_once(':')
                .with_context(|| format!("header {h:?} must look like NAME:VALUE"))?;
            cfg.extra_headers.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        cfg = match cfg.clone().with_auth_env(&self.auth_env) {
            Ok(with_auth) => with_auth,
            Err(_) if is_loopback(&self.endpoint) => cfg,
            Err(e) => return Err(e.into()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DeadlineArgs {
    /// Decode deadline tier.
    #[arg(long, value_enum, default_value_t = DeadlineTier::Strict)]
    pub deadline: DeadlineTier,
    /// Explicit decode deadline in milliseconds; overrides --deadline.
    #[arg(long)]
    pub decode_deadline_ms: Option<f64>,
    /// Scheduling slack added to the first-token deadline, in milliseconds.
    #[arg(long, default_value_t = DEFAULT_SCHEDULING_SLACK_S * 1000.0)]
    pub scheduling_slack_ms: f64,
    /// Fitted prefill curve file providing the first-token deadline.
    #[arg(long, conflicts_with = "prefill_deadline_ms")]
    pub prefill_curve: Option<PathBuf>,
    /// Fixed first-token deadline in milliseconds, for every prompt length.
    #[arg(long)]
    pub prefill_deadline_ms: Option<f64>,
}

impl DeadlineArgs {
    pub fn decode_deadline_s(&self) -> f64 {
        self.decode_deadline_ms
            .map_or(self.deadline.seconds(), |ms| ms / 1000.0)
    }

    pub fn config(&self) -> Result<DeadlineConfig> {
        let prefill = match (&self.prefill_curve, self.prefill_deadline_ms) {
            (Some(path), _) => PrefillDeadline::Curve(
                PrefillCurve::load(path).with_context(|| format!("loading prefill curve {}", path.display()))?,
            ),
            (None, Some(ms)) => PrefillDeadline::Fixed(ms / 1000.0),
            (None, None) => bail!("a first-token deadline is needed: pass --prefill-curve or --prefill-deadline-ms"),
        };
        Ok(DeadlineConfig::new(
            self.decode_deadline_s(),
            self.scheduling_slack_ms / 1000.0,
            prefill,
        )?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SloArgs {
    /// Minimum fluidity index for a request to count as satisfied.
    #[arg(long, default_value_t = DEFAULT_FLUIDITY_THRESHOLD)]
    pub fluidity_threshold: f64,
    /// Fraction of requests that must be satisfied.
    #[arg(long, default_value_t = DEFAULT_REQUEST_FRACTION)]
    pub request_fraction: f64,
}

impl SloArgs {
    pub fn slo(&self, decode_deadline: Option<f64>) -> Result<SloSpec> {
        let slo = SloSpec {
            fluidity_threshold: self.fluidity_threshold,
            request_fraction: self.request_fraction,
            decode_deadline,
        };
        slo.validate()?;
        Ok(slo)
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalysisArgs {
    /// Decode-deadline grid step for the fluid-rate search, in milliseconds.
    #[arg(long, default_value_t = 1.0)]
    pub resolution_ms: f64,
    /// First decode deadline of the fluidity sweep, in milliseconds.
    #[arg(long, default_value_t = 5.0)]
    pub sweep_start_ms: f64,
    /// Step of the fluidity sweep, in milliseconds.
    #[arg(long, default_value_t = 5.0)]
    pub sweep_step_ms: f64,
    /// Number of points in the fluidity sweep.
    #[arg(long, default_value_t = 40)]
    pub sweep_count: usize,
}

impl AnalysisArgs {
    pub fn options(&self, deadline: &DeadlineArgs, slo: &SloArgs) -> Result<ReportOptions> {
        let deadline_cfg = deadline.config()?;
        Ok(ReportOptions {
            slo: slo.slo(None)?,
            resolution: self.resolution_ms / 1000.0,
            sweep: deadline_grid(
                self.sweep_start_ms / 1000.0,
                self.sweep_step_ms / 1000.0,
                self.sweep_count,
            )?,
            deadline: deadline_cfg,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct WorkloadArgs {
    /// Workload spec file (JSON); overrides the inline workload flags.
    #[arg(long)]
    pub workload: Option<PathBuf>,
    /// Number of requests.
    #[arg(long, default_value_t = 100)]
    pub requests: usize,
    /// Smallest prompt length in tokens.
    #[arg(long, default_value_t = 256)]
    pub prompt_min: u32,
    /// Largest prompt length in tokens.
    #[arg(long, default_value_t = 8192)]
    pub prompt_max: u32,
    /// Output token cap per request.
    #[arg(long, default_value_t = DEFAULT_MAX_OUTPUT_TOKENS)]
    pub max_tokens: u32,
    /// Seed for prompt lengths and arrival times.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Arrival process.
    #[arg(long, value_enum, default_value_t = Arrivals::Poisson)]
    pub arrivals: Arrivals,
}

impl WorkloadArgs {
    pub fn spec(&self) -> Result<WorkloadSpec> {
        let spec = match &self.workload {
            Some(path) => WorkloadSpec::load(path).with_context(|| format!("loading workload {}", path.display()))?,
            None => WorkloadSpec {
                count: self.requests,
                prompt_lengths: PromptLengthSource::Uniform {
                    lo: self.prompt_min,
                    hi: self.prompt_max,
                },
                max_output_tokens: self.max_tokens,
                seed: self.seed,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Comma-separated prompt lengths; defaults to 10 log-spaced lengths
    /// from 256 to 8192.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<u32>,
    /// Requests per prompt length.
    #[arg(long, default_value_t = fluidbench_core::prefill::DEFAULT_PROFILE_REPEATS,
          value_parser = clap::value_parser!(u32).range(1..))]
    pub repeats: u32,
    /// Where to write the fitted curve.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Target request rate.
    #[arg(long)]
    pub qps: f64,
    #[command(flatten)]
    pub deadline: DeadlineArgs,
    #[command(flatten)]
    pub slo: SloArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Where to write the run file.
    #[arg(long)]
    pub out_run: PathBuf,
    /// Directory for the report files.
    #[arg(long)]
    pub report_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run file to analyze.
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub deadline: DeadlineArgs,
    #[command(flatten)]
    pub slo: SloArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Directory for the report files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[command(flatten)]
    pub deadline: DeadlineArgs,
    #[command(flatten)]
    pub slo: SloArgs,
    /// Lower request-rate bound (expected to meet the SLO).
    #[arg(long)]
    pub qps_lo: f64,
    /// Upper request-rate bound.
    #[arg(long)]
    pub qps_hi: f64,
    /// Stop when hi / lo <= 1 + tolerance.
    #[arg(long, default_value_t = DEFAULT_RELATIVE_TOLERANCE)]
    pub tolerance: f64,
    /// Earliest-dispatched requests per probe excluded from scoring.
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
    /// Requests per probe; overrides the workload's request count.
    #[arg(long, default_value_t = DEFAULT_PROBE_REQUESTS)]
    pub probe_requests: usize,
    /// Where to write the capacity result (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional directory to keep each probe's run file.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MockArgs {
    /// Mock profile file (JSON). Flags below override its fields.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Port to bind.
    #[arg(long, default_value_t = 8000)]
    pub port: u16,
    /// Decode cadence in milliseconds.
    #[arg(long)]
    pub cadence_ms: Option<f64>,
    /// Half-width of uniform cadence jitter in milliseconds.
    #[arg(long)]
    pub jitter_ms: Option<f64>,
    /// Prefill coefficients a,b,c (seconds = a*P^2 + b*P + c).
    #[arg(long, value_delimiter = ',', num_args = 3, value_names = ["A", "B", "C"])]
    pub prefill: Option<Vec<f64>>,
    /// Emit this many tokens per stream event.
    #[arg(long)]
    pub burst: Option<u32>,
    /// Stall after every k-th token...
    #[arg(long, requires = "stall_ms")]
    pub stall_every: Option<u32>,
    /// ...for this many milliseconds.
    #[arg(long, requires = "stall_every")]
    pub stall_ms: Option<f64>,
    /// Request rate beyond which decode slows down.
    #[arg(long)]
    pub knee_qps: Option<f64>,
    /// Jitter seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the ground-truth emission log here on shutdown.
    #[arg(long)]
    pub log: Option<PathBuf>,
}
