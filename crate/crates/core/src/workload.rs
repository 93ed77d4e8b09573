//! Request workloads and open-loop arrival schedules.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 256;
pub const CHARS_PER_TOKEN: usize = 4;

// Stream ids keep the length draws and the arrival draws independent even
// when both come from the same workload seed.
const LENGTH_STREAM: u64 = 0;
const ARRIVAL_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("prompt length file {path}: {reason}")]
    LengthFile { path: PathBuf, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("workload file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLengthSource {
    /// Integer lengths drawn uniformly from `[lo, hi]`.
    Uniform { lo: u32, hi: u32 },
    /// Lengths taken in order, cycling when the list is shorter than the count.
    Fixed(Vec<u32>),
    /// Newline-delimited integers read from a file, cycled like `Fixed`.
    TraceFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub count: usize,
    pub prompt_lengths: PromptLengthSource,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_output() -> u32 {
    DEFAULT_MAX_OUTPUT_TOKENS
}

impl WorkloadSpec {
    pub fn uniform(count: usize, lo: u32, hi: u32, seed: u64) -> Self {
        Self {
            count,
            prompt_lengths: PromptLengthSource::Uniform { lo, hi },
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.count == 0 {
            return Err(WorkloadError::Invalid("count must be at least 1".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(WorkloadError::Invalid("max_output_tokens must be at least 1".into()));
        }
        match &self.prompt_lengths {
            PromptLengthSource::Uniform { lo, hi } if *lo == 0 || hi < lo => Err(WorkloadError::Invalid(format!(
                "uniform range [{lo}, {hi}] needs 1 <= lo <= hi"
            ))),
            PromptLengthSource::Fixed(v) if v.is_empty() || v.contains(&0) => Err(WorkloadError::Invalid(
                "fixed length list must be non-empty with positive entries".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorkloadError> {
        let spec: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadRequest {
    pub prompt_tokens: u32,
    pub max_output_tokens: u32,
}

pub fn read_length_file(path: &Path) -> Result<Vec<u32>, WorkloadError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<u32>() {
            Ok(v) if v > 0 => out.push(v),
            _ => {
                return Err(WorkloadError::LengthFile {
                    path: path.to_owned(),
                    reason: format!("line {} is not a positive integer: {line:?}", i + 1),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(WorkloadError::LengthFile {
            path: path.to_owned(),
            reason: "no prompt lengths".into(),
        });
    }
    Ok(out)
}

/// Deterministic request list for a workload spec.
pub fn generate_requests(spec: &WorkloadSpec) -> Result<Vec<WorkloadRequest>, WorkloadError> {
    spec.validate()?;
    let lengths: Vec<u32> = match &spec.prompt_lengths {
        PromptLengthSource::Uniform { lo, hi } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(LENGTH_STREAM);
            (0..spec.count).map(|_| rng.random_range(*lo..=*hi)).collect()
        }
        PromptLengthSource::Fixed(list) => list.iter().copied().cycle().take(spec.count).collect(),
        PromptLengthSource::TraceFile(path) => read_length_file(path)?.into_iter().cycle().take(spec.count).collect(),
    };
    Ok(lengths
        .into_iter()
        .map(|prompt_tokens| WorkloadRequest {
            prompt_tokens,
            max_output_tokens: spec.max_output_tokens,
        })
        .collect())
}

/// Filler prompt of roughly `tokens` tokens at four characters per token.
pub fn synthesize_prompt(tokens: u32) -> String {
    const WORDS: [&str; 8] = ["the ", "owl ", "saw ", "one ", "red ", "fox ", "run ", "far "];
    let mut s = String::with_capacity(tokens as usize * CHARS_PER_TOKEN);
    for i in 0..tokens as usize {
        s.push_str(WORDS[i % WORDS.len()]);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSchedule {
    /// Dispatch offsets in seconds from run start, non-decreasing.
    pub offsets: Vec<f64>,
    pub target_qps: f64,
}

impl ArrivalSchedule {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

fn check_qps(qps: f64) -> Result<(), WorkloadError> {
    if qps > 0.0 && qps.is_finite() {
        Ok(())
    } else {
        Err(WorkloadError::Invalid(format!("qps must be positive, got {qps}")))
    }
}

/// Open-loop Poisson arrivals: cumulative sums of exponential inter-arrival
/// times with mean `1 / qps`.
pub fn poisson_schedule(qps: f64, count: usize, seed: u64) -> Result<ArrivalSchedule, WorkloadError> {
    check_qps(qps)?;
    let exp = Exp::new(qps).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ARRIVAL_STREAM);
    let mut t = 0.0;
    let offsets = (0..count)
        .map(|_| {
            t += rng.sample(exp);
            t
        })
        .collect();
    Ok(ArrivalSchedule {
        offsets,
        target_qps: qps,
    })
}

/// Evenly spaced arrivals, mainly for debugging; the first request goes at 0.
pub fn fixed_interval_schedule(qps: f64, count: usize) -> Result<ArrivalSchedule, WorkloadError> {
    check_qps(qps)?;
    Ok(ArrivalSchedule {
        offsets: (0..count).map(|i| i as f64 / qps).collect(),
        target_qps: qps,
    })
}
