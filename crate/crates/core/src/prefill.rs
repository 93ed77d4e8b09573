//! Quadratic model of isolated prefill latency as a function of prompt length.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PROFILE_MIN_TOKENS: u32 = 256;
pub const DEFAULT_PROFILE_MAX_TOKENS: u32 = 8192;
pub const DEFAULT_PROFILE_POINTS: usize = 10;
pub const DEFAULT_PROFILE_REPEATS: u32 = 3;

#[derive(Debug, Error)]
pub enum PrefillError {
    #[error("need at least 3 distinct prompt lengths for a quadratic fit, got {0}")]
    Underdetermined(usize),
    #[error("design matrix is degenerate")]
    Degenerate,
    #[error("sample {index} has invalid ttft {ttft} or prompt length {prompt}")]
    InvalidSample { index: usize, prompt: u32, ttft: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("curve file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub prompt_token_count: u32,
    /// First-token latency measured with nothing else in flight, seconds.
    pub observed_ttft: f64,
}

/// `predicted(P) = a*P^2 + b*P + c` seconds, floored at the smallest profiled
/// latency so extrapolation below the profiled range cannot go negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Root-mean-square residual of the fit against per-length medians.
    pub rmse: f64,
    pub samples: usize,
    pub profiled_range: (u32, u32),
    pub min_observed_s: f64,
}

impl PrefillCurve {
    pub fn from_coefficients(a: f64, b: f64, c: f64) -> Self {
        Self {
            a,
            b,
            c,
            rmse: 0.0,
            samples: 0,
            profiled_range: (1, 1),
            min_observed_s: 0.0,
        }
    }

    pub fn constant(seconds: f64) -> Self {
        Self::from_coefficients(0.0, 0.0, seconds)
    }

    pub fn raw(&self, prompt_tokens: u32) -> f64 {
        let p = f64::from(prompt_tokens);
        self.a * p * p + self.b * p + self.c
    }

    pub fn predict(&self, prompt_tokens: u32) -> f64 {
        self.raw(prompt_tokens).max(self.min_observed_s)
    }

    /// True when the fitted quadratic does not decrease anywhere inside the
    /// profiled range.
    pub fn is_monotone(&self) -> bool {
        let slope = |p: u32| 2.0 * self.a * f64::from(p) + self.b;
        slope(self.profiled_range.0) >= 0.0 && slope(self.profiled_range.1) >= 0.0
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PrefillError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PrefillError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// `points` log-spaced integers from `lo` to `hi` inclusive, deduplicated.
pub fn log_spaced_lengths(lo: u32, hi: u32, points: usize) -> Vec<u32> {
    if points <= 1 || lo >= hi {
        return vec![lo];
    }
    let ratio = f64::from(hi) / f64::from(lo);
    let mut out: Vec<u32> = (0..points)
        .map(|i| (f64::from(lo) * ratio.powf(i as f64 / (points - 1) as f64)).round() as u32)
        .collect();
    out.dedup();
    out
}

pub fn default_profile_lengths() -> Vec<u32> {
    log_spaced_lengths(
        DEFAULT_PROFILE_MIN_TOKENS,
        DEFAULT_PROFILE_MAX_TOKENS,
        DEFAULT_PROFILE_POINTS,
    )
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-length medians, ordered by prompt length.
pub fn medians_by_length(samples: &[ProfileSample]) -> BTreeMap<u32, f64> {
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.prompt_token_count).or_default().push(s.observed_ttft);
    }
    groups.into_iter().map(|(p, mut v)| (p, median(&mut v))).collect()
}

/// Least-squares quadratic through the per-length median latencies.
pub fn fit_quadratic(samples: &[ProfileSample]) -> Result<PrefillCurve, PrefillError> {
    for (index, s) in samples.iter().enumerate() {
        if s.prompt_token_count == 0 || !(s.observed_ttft > 0.0 && s.observed_ttft.is_finite()) {
            return Err(PrefillError::InvalidSample {
                index,
                prompt: s.prompt_token_count,
                ttft: s.observed_ttft,
            });
        }
    }
    let medians = medians_by_length(samples);
    if medians.len() < 3 {
        return Err(PrefillError::Underdetermined(medians.len()));
    }

    // Columns are scaled to x = P / P_max so P^2 does not swamp the constant.
    let scale = f64::from(*medians.keys().next_back().unwrap());
    let n = medians.len();
    let design = DMatrix::from_fn(n, 3, |row, col| {
        let x = f64::from(*medians.keys().nth(row).unwrap()) / scale;
        match col {
            0 => x * x,
            1 => x,
            _ => 1.0,
        }
    });
    let target = DVector::from_iterator(n, medians.values().copied());

    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > smax * 1e-12) {
        return Err(PrefillError::Degenerate);
    }
    let coef = svd.solve(&target, 0.0).map_err(|_| PrefillError::Degenerate)?;
    let (a, b, c) = (coef[0] / (scale * scale), coef[1] / scale, coef[2]);

    let residual = &design * &coef - &target;
    let rmse = (residual.norm_squared() / n as f64).sqrt();
    let min_observed_s = medians.values().copied().fold(f64::INFINITY, f64::min);

    Ok(PrefillCurve {
        a,
        b,
        c,
        rmse,
        samples: samples.len(),
        profiled_range: (*medians.keys().next().unwrap(), *medians.keys().next_back().unwrap()),
        min_observed_s,
    })
}
