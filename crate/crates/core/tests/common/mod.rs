//! A configuration small enough for end-to-end tests to finish in seconds.

#![allow(dead_code)]

use rpl::config::{Config, Preset};
use rpl::env::TaskSpec;

pub fn tiny_config() -> Config {
    let mut cfg = Config::preset(Preset::Desk);
    cfg.task = TaskSpec {
        max_gen_len: 8,
        split_sizes: [32, 8, 8],
        ..TaskSpec::desk()
    };
    cfg.policy.sft_steps = 20;
    cfg.ppo.total_episodes = 32 * 6;
    cfg.ppo.warmup_steps = 2;
    cfg.reward_model.total_steps = 400;
    cfg.reward_model.checkpoint_stride = 200;
    cfg.sweep.seeds = vec![1, 2];
    cfg.sweep.eval_every = 2;
    cfg.sweep.parallelism = 1;
    cfg
}

/// Writes `cfg` to a JSON file inside `dir` and returns its path.
pub fn write_config(dir: &std::path::Path, cfg: &Config) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json_pretty().unwrap()).unwrap();
    path
}
