use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::MockError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl PrefillCoefficients {
    pub fn seconds(&self, prompt_tokens: u32) -> f64 {
        let p = f64::from(prompt_tokens);
        (self.a * p * p + self.b * p + self.c).max(0.0)
    }
}

/// Extra pause inserted after every `every`-th token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StallSpec {
    pub every: u32,
    pub extra_s: f64,
}

/// Deliver decode tokens in groups of `tokens` per stream event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    pub tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockProfile {
    pub prefill: PrefillCoefficients,
    pub decode_cadence_s: f64,
    pub jitter_s: f64,
    pub stall: Option<StallSpec>,
    pub burst: Option<BurstSpec>,
    /// Load (QPS) beyond which decode slows down in proportion to the excess
    /// number of in-flight requests.
    pub knee_qps: Option<f64>,
    /// Drop the connection after this many tokens, without `[DONE]`.
    pub abort_after_tokens: Option<u32>,
    pub seed: u64,
}

impl Default for MockProfile {
    fn default() -> Self {
        Self {
            prefill: PrefillCoefficients {
                a: 0.0,
                b: 0.0,
                c: 0.05,
            },
            decode_cadence_s: 0.02,
            jitter_s: 0.0,
            stall: None,
            burst: None,
            knee_qps: None,
            abort_after_tokens: None,
            seed: 0,
        }
    }
}

impl MockProfile {
    pub fn validate(&self) -> Result<(), MockError> {
        let bad = |m: String| Err(MockError::Profile(m));
        if !(self.decode_cadence_s > 0.0 && self.decode_cadence_s.is_finite()) {
            return bad(format!("decode cadence {} must be positive", self.decode_cadence_s));
        }
        if !(self.jitter_s >= 0.0 && self.jitter_s < self.decode_cadence_s) {
            return bad(format!("jitter {} must be in [0, cadence)", self.jitter_s));
        }
        if let Some(s) = self.stall {
            if s.every == 0 || !(s.extra_s >= 0.0) {
                return bad("stall needs every >= 1 and a non-negative extra".into());
            }
        }
        if matches!(self.burst, Some(b) if b.tokens == 0) {
            return bad("burst size must be at least 1".into());
        }
        if let Some(k) = self.knee_qps {
            if !(k > 0.0 && k.is_finite()) {
                return bad(format!("knee_qps {k} must be positive"));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockError> {
        let text = fs::read_to_string(path)?;
        let profile: Self = serde_json::from_str(&text).map_err(|e| MockError::Profile(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    /// Emission plan for one request. `stream` selects an independent jitter
    /// sequence so concurrent requests do not share noise.
    pub fn plan(&self, prompt_tokens: u32, max_tokens: u32, stream: u64) -> EmissionPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let first = self.prefill.seconds(prompt_tokens);
        let group = self.burst.map_or(1, |b| b.tokens);
        let mut steps = Vec::new();
        let mut emitted = 1u32.min(max_tokens);
        let mut last_group = emitted;
        while emitted < max_tokens {
            let tokens = group.min(max_tokens - emitted);
            let mut cadence = 0.0;
            for _ in 0..tokens {
                let noise = if self.jitter_s > 0.0 {
                    rng.random_range(-self.jitter_s..=self.jitter_s)
                } else {
                    0.0
                };
                cadence += self.decode_cadence_s + noise;
            }
            let stall = match self.stall {
                Some(s) => {
                    let crossed = emitted / s.every - (emitted - last_group) / s.every;
                    f64::from(crossed) * s.extra_s
                }
                None => 0.0,
            };
            steps.push(PlanStep {
                cadence_s: cadence,
                stall_s: stall,
                tokens,
            });
            emitted += tokens;
            last_group = tokens;
        }
        EmissionPlan {
            first_token_s: first,
            first_tokens: 1u32.min(max_tokens),
            steps,
        }
    }

    /// Nominal time to serve a request with no overload.
    pub fn nominal_service_s(&self, prompt_tokens: u32, max_tokens: u32) -> f64 {
        let plan = self.plan(prompt_tokens, max_tokens, 0);
        plan.first_token_s + plan.steps.iter().map(|s| s.cadence_s + s.stall_s).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStep {
    /// Decode time for the group, scaled by the overload factor when served.
    pub cadence_s: f64,
    /// Stall time, never scaled.
    pub stall_s: f64,
    pub tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionPlan {
    pub first_token_s: f64,
    pub first_tokens: u32,
    pub steps: Vec<PlanStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    /// Seconds after the request was received.
    pub offset_s: f64,
    pub token_count: u32,
}

impl EmissionPlan {
    pub fn schedule(&self, overload_factor: f64) -> Vec<Emission> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        if self.first_tokens == 0 {
            return out;
        }
        let mut t = self.first_token_s;
        out.push(Emission {
            offset_s: t,
            token_count: self.first_tokens,
        });
        for s in &self.steps {
            t += s.cadence_s * overload_factor + s.stall_s;
            out.push(Emission {
                offset_s: t,
                token_count: s.tokens,
            });
        }
        out
    }
}

/// Pure emission timeline of the mock for one request.
pub fn emission_schedule(
    profile: &MockProfile,
    prompt_tokens: u32,
    max_tokens: u32,
    overload_factor: f64,
) -> Vec<Emission> {
    profile.plan(prompt_tokens, max_tokens, 0).schedule(overload_factor)
}
