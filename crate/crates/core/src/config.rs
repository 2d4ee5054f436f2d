//! Resolved experiment configuration: presets, JSON overrides and
//! validation.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{Axis, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::{FeatureMap, SamplerConfig, SftConfig, FEATURE_DIM_SMALL};
use crate::ppo::{PpoConfig, RunConfig};
use crate::reward_model::{
    DatasetConfig, NoisyOracleConfig, ProxyLabelerConfig, RmTrainConfig,
};
use crate::shaping::ShapingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::usage(format!("unknown preset `{other}` (desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub feature_dim: usize,
    /// Demonstrations drawn per train instance for supervised fine-tuning.
    pub sft_demos_per_instance: usize,
    /// Probability that a demonstration token comes from the relevant set.
    pub sft_demo_focus: f64,
    pub sft_learning_rate: f64,
    pub sft_steps: usize,
    pub sft_batch_size: usize,
    pub sft_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            feature_dim: FEATURE_DIM_SMALL,
            sft_demos_per_instance: 2,
            sft_demo_focus: 0.5,
            sft_learning_rate: 0.5,
            sft_steps: 200,
            sft_batch_size: 16,
            sft_seed: 11,
        }
    }
}

impl PolicyConfig {
    pub fn sft(&self) -> SftConfig {
        SftConfig {
            learning_rate: self.sft_learning_rate,
            steps: self.sft_steps,
            batch_size: self.sft_batch_size,
            seed: self.sft_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModelConfig {
    pub axis: Axis,
    /// Fraction δ of proxy items whose label is flipped.
    pub proxy_disagreement: f64,
    pub proxy_seed: u64,
    pub projection_seed: u64,
    pub responses_per_instance: usize,
    pub dataset_seed: u64,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub checkpoint_stride: u64,
    pub batch_size: usize,
    pub train_seed: u64,
    /// When set, runs are driven by a noisy gold oracle instead of the
    /// trained checkpoint family.
    pub oracle: Option<NoisyOracleConfig>,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            axis: Axis::Relevance,
            proxy_disagreement: 0.15,
            proxy_seed: 3,
            projection_seed: 5,
            responses_per_instance: 8,
            dataset_seed: 7,
            learning_rate: 0.5,
            total_steps: 30_000,
            checkpoint_stride: 5_000,
            batch_size: 32,
            train_seed: 9,
            oracle: None,
        }
    }
}

impl RewardModelConfig {
    pub fn proxy(&self) -> Result<ProxyLabelerConfig> {
        ProxyLabelerConfig::new(self.proxy_disagreement, self.proxy_seed)
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            responses_per_instance: self.responses_per_instance,
            seed: self.dataset_seed,
        }
    }

    pub fn training(&self) -> RmTrainConfig {
        RmTrainConfig {
            learning_rate: self.learning_rate,
            total_steps: self.total_steps,
            checkpoint_stride: self.checkpoint_stride,
            batch_size: self.batch_size,
            seed: self.train_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Checkpoint steps to train against; `None` selects the whole family.
    pub checkpoint_steps: Option<Vec<u64>>,
    pub seeds: Vec<u64>,
    pub eval_every: u64,
    pub parallelism: usize,
    pub resume: bool,
    /// Points per window in `dynamics.csv`.
    pub dynamics_window: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            checkpoint_steps: None,
            seeds: vec![42, 43, 44],
            eval_every: 50,
            parallelism: 4,
            resume: true,
            dynamics_window: 10,
        }
    }
}

/// Everything an experiment needs, with every field present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Seed for task instance generation.
    pub data_seed: u64,
    pub task: TaskSpec,
    pub policy: PolicyConfig,
    pub sampler: SamplerConfig,
    pub shaping: ShapingConfig,
    pub ppo: PpoConfig,
    pub reward_model: RewardModelConfig,
    pub sweep: SweepConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let (task, ppo) = match preset {
            Preset::Desk => (TaskSpec::desk(), PpoConfig::desk()),
            Preset::Paper => (TaskSpec::paper(), PpoConfig::paper()),
        };
        Self {
            data_seed: 1,
            task,
            policy: PolicyConfig::default(),
            sampler: SamplerConfig::default(),
            shaping: ShapingConfig::default(),
            ppo,
            reward_model: RewardModelConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Applies `overrides` (a JSON object mirroring this structure) on top of
    /// `preset` and validates the result.
    pub fn resolve(preset: Preset, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, overrides, "")?;
        let cfg: Config = serde_json::from_value(base)
            .map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        FeatureMap::new(&self.task, self.policy.feature_dim)
            .map_err(|e| Error::config(format!("policy.feature_dim: {e}")))?;
        let p = &self.policy;
        if !(0.0..=1.0).contains(&p.sft_demo_focus) {
            return Err(Error::config("policy.sft_demo_focus must lie in [0, 1]"));
        }
        if !(p.sft_learning_rate >= 0.0 && p.sft_learning_rate.is_finite()) {
            return Err(Error::config("policy.sft_learning_rate must be non-negative"));
        }
        self.sampler.validate(self.task.vocab_size)?;
        self.shaping.validate()?;
        self.ppo.validate()?;
        let rm = &self.reward_model;
        rm.proxy()?;
        if rm.checkpoint_stride == 0 {
            return Err(Error::config("reward_model.checkpoint_stride must be at least 1"));
        }
        if rm.total_steps == 0 {
            return Err(Error::config("reward_model.total_steps must be at least 1"));
        }
        if !(rm.learning_rate > 0.0 && rm.learning_rate.is_finite()) {
            return Err(Error::config("reward_model.learning_rate must be positive"));
        }
        if let Some(o) = rm.oracle {
            if !(0.0..=1.0).contains(&o.target_accuracy) {
                return Err(Error::config(
                    "reward_model.oracle.target_accuracy must lie in [0, 1]",
                ));
            }
        }
        let s = &self.sweep;
        if s.seeds.is_empty() {
            return Err(Error::config("sweep.seeds must not be empty"));
        }
        let mut seen = s.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("sweep.seeds must be distinct"));
        }
        if s.eval_every == 0 {
            return Err(Error::config("sweep.eval_every must be at least 1"));
        }
        if s.parallelism == 0 {
            return Err(Error::config("sweep.parallelism must be at least 1"));
        }
        if s.dynamics_window == 0 {
            return Err(Error::config("sweep.dynamics_window must be at least 1"));
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            ppo: self.ppo,
            shaping: self.shaping,
            sampler: self.sampler,
            axis: self.reward_model.axis,
            eval_every: self.sweep.eval_every,
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Deep-merges `overrides` into `base`. Keys absent from `base` are
/// rejected with their dotted path.
fn merge(base: &mut Value, overrides: &Value, path: &str) -> Result<()> {
    let Value::Object(over) = overrides else {
        if path.is_empty() {
            return Err(Error::config("configuration must be a JSON object"));
        }
        *base = overrides.clone();
        return Ok(());
    };
    let Value::Object(target) = base else {
        if base.is_null() {
            // Optional section that is unset in the preset.
            *base = overrides.clone();
            return Ok(());
        }
        return Err(Error::config(format!("{path} is not a section")));
    };
    for (key, value) in over {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match target.get_mut(key) {
            Some(slot) => merge(slot, value, &full)?,
            None => return Err(Error::config(format!("unknown key `{full}`"))),
        }
    }
    Ok(())
}

/// Reads `path` (if given) and resolves it over `preset`.
pub fn load_config(path: Option<&Path>, preset: Preset) -> Result<Config> {
    let overrides = match path {
        None => Value::Object(Default::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("malformed JSON in {}: {e}", p.display())))?
        }
    };
    Config::resolve(preset, &overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = Config::resolve(Preset::Desk, &json!({})).unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.ppo.kl_coefficient, 0.3);
    }

    #[test]
    fn override_touches_one_field() {
        let cfg = Config::resolve(Preset::Desk, &json!({"ppo": {"seed": 7}})).unwrap();
        let mut expected = Config::default();
        expected.ppo.seed = 7;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn invariant_violation_names_key() {
        let err = Config::resolve(Preset::Desk, &json!({"ppo": {"lambda": 2.0}})).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("ppo.lambda")), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let err = Config::resolve(Preset::Desk, &json!({"ppo": {"lamda": 0.9}})).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("ppo.lamda")), "{err}");
        let err = Config::resolve(Preset::Desk, &json!({"colour": 1})).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("colour")));
    }

    #[test]
    fn oracle_section_can_be_set() {
        let cfg = Config::resolve(
            Preset::Desk,
            &json!({"reward_model": {"oracle": {"target_accuracy": 0.9, "seed": 1}}}),
        )
        .unwrap();
        assert_eq!(cfg.reward_model.oracle.unwrap().target_accuracy, 0.9);
    }

    #[test]
    fn resolution_is_idempotent() {
        for preset in [Preset::Desk, Preset::Paper] {
            let once = Config::resolve(preset, &json!({"sweep": {"seeds": [1, 2]}})).unwrap();
            let twice = Config::resolve(preset, &serde_json::to_value(&once).unwrap()).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let err = Config::resolve(Preset::Desk, &json!({"sweep": {"seeds": [1, 1]}})).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn paper_preset_scale() {
        let cfg = Config::preset(Preset::Paper);
        assert_eq!(cfg.ppo.total_episodes, 80_000);
        assert_eq!(cfg.ppo.learning_rate, 1e-5);
        assert_eq!(cfg.task.max_gen_len, 200);
        assert_eq!(cfg.task.split_sizes, [3853, 500, 948]);
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        assert!(matches!(load_config(Some(&missing), Preset::Desk), Err(Error::Config(_))));
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{ not json").unwrap();
        assert!(matches!(load_config(Some(&bad), Preset::Desk), Err(Error::Config(_))));
    }
}
