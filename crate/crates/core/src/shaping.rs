//! Per-token reward assembly from reward-model judgements, the sampled-token
//! KL penalty, and batch whitening.

use serde::{Deserialize, Serialize};

use crate::env::Segment;
use crate::error::{ensure_same_len, Error, Result};

/// Reward constants applied to reward-model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapingConfig {
    pub relevance_pos: f64,
    pub relevance_neg: f64,
    pub factuality_pos: f64,
    pub factuality_neg: f64,
    pub completeness_mean: f64,
    pub completeness_std: f64,
    pub completeness_bias: f64,
    pub completeness_scale: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            relevance_pos: 0.3,
            relevance_neg: -0.3,
            factuality_pos: 0.5,
            factuality_neg: -0.5,
            completeness_mean: -0.4468,
            completeness_std: 8.3012,
            completeness_bias: 0.0,
            completeness_scale: 0.3,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.completeness_std > 0.0) {
            return Err(Error::config("shaping.completeness_std must be positive"));
        }
        let all = [
            self.relevance_pos,
            self.relevance_neg,
            self.factuality_pos,
            self.factuality_neg,
            self.completeness_mean,
            self.completeness_std,
            self.completeness_bias,
            self.completeness_scale,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("shaping constants must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlPenaltyConfig {
    pub beta: f64,
}

impl Default for KlPenaltyConfig {
    fn default() -> Self {
        Self { beta: 0.3 }
    }
}

/// What the reward models said about one response. Axes without a reward
/// model are `None` and contribute nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub relevance: Option<Vec<bool>>,
    pub factuality: Option<Vec<bool>>,
    /// Raw sequence-level completeness score, before normalisation.
    pub completeness: Option<f64>,
}

pub fn normalize_completeness(raw: f64, cfg: &ShapingConfig) -> f64 {
    ((raw - cfg.completeness_mean) / cfg.completeness_std + cfg.completeness_bias)
        * cfg.completeness_scale
}

/// Segment judgements land on each segment's final token; the completeness
/// term lands on the final token of the response.
pub fn assemble_rewards(
    segments: &[Segment],
    feedback: &Feedback,
    cfg: &ShapingConfig,
) -> Result<Vec<f64>> {
    let len = segments.last().map_or(0, |s| s.end);
    let mut rewards = vec![0.0; len];
    if len == 0 {
        return Ok(rewards);
    }
    let axes = [
        (&feedback.relevance, cfg.relevance_pos, cfg.relevance_neg, "relevance"),
        (&feedback.factuality, cfg.factuality_pos, cfg.factuality_neg, "factuality"),
    ];
    for (labels, pos, neg, name) in axes {
        if let Some(labels) = labels {
            ensure_same_len(&format!("{name} labels per segment"), labels.len(), segments.len())?;
            for (seg, &ok) in segments.iter().zip(labels) {
                rewards[seg.end - 1] += if ok { pos } else { neg };
            }
        }
    }
    if let Some(raw) = feedback.completeness {
        rewards[len - 1] += normalize_completeness(raw, cfg);
    }
    Ok(rewards)
}

/// `-beta * (logp_policy - logp_reference)` at each sampled token.
pub fn kl_penalty(
    logp_policy: &[f64],
    logp_reference: &[f64],
    cfg: &KlPenaltyConfig,
) -> Result<Vec<f64>> {
    ensure_same_len("kl penalty inputs", logp_policy.len(), logp_reference.len())?;
    Ok(logp_policy
        .iter()
        .zip(logp_reference)
        .map(|(p, r)| -cfg.beta * (p - r))
        .collect())
}

pub const WHITEN_STD_FLOOR: f64 = 1e-8;

/// Shifts to zero mean and scales by the population standard deviation,
/// floored at [`WHITEN_STD_FLOOR`].
pub fn whiten(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(WHITEN_STD_FLOOR);
    values.iter().map(|v| (v - mean) / std).collect()
}
