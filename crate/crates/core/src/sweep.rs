//! Experiment pipeline, run directories, sweep planning and execution over
//! reward-model checkpoints × seeds, and result aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, SweepConfig};
use crate::env::{Axis, Splits, TaskInstance, Token};
use crate::error::{Error, Result};
use crate::eval::{
    best_checkpoint_report, build_surface, dynamics_stats, emit_plot_data, DynamicsStats,
    EvalPoint, PerfRecord, PlotData, PlotFormat, RunOutcome, SurfacePoint,
};
use crate::hashing::hash_words;
use crate::policy::{gold_behavior_demo, sft_train, FeatureMap, PolicyParams};
use crate::ppo::{train_run, RunEnv, RunRecord, RunStatus, StepMetrics};
use crate::reward_model::{
    build_dataset, family_summary, make_noisy_oracle, train_with_checkpoints, FamilyRow,
    RewardModel, RewardModelCheckpoint, RewardModelIdentity, RmFeatureMap,
};

/// Shared, read-only inputs of every run in an experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: Config,
    pub splits: Splits,
    pub fmap: FeatureMap,
    /// Supervised fine-tuned policy; the initial and reference policy of
    /// every run.
    pub init_policy: PolicyParams,
}

impl Experiment {
    pub fn prepare(config: &Config) -> Result<Self> {
        config.validate()?;
        let splits = Splits::generate(&config.task, config.data_seed)?;
        let fmap = FeatureMap::new(&config.task, config.policy.feature_dim)?;
        let demos = sft_demos(config, &splits.train);
        let init_policy = sft_train(&fmap, &demos, &config.policy.sft())?;
        Ok(Self {
            config: config.clone(),
            splits,
            fmap,
            init_policy,
        })
    }

    pub fn run_env(&self) -> RunEnv<'_> {
        RunEnv {
            spec: &self.config.task,
            fmap: &self.fmap,
            train: &self.splits.train,
            valid: &self.splits.valid,
        }
    }
}

pub fn sft_demos(config: &Config, train: &[TaskInstance]) -> Vec<(TaskInstance, Vec<Token>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[0x5346_54, config.policy.sft_seed]));
    let mut demos = Vec::new();
    for inst in train {
        for _ in 0..config.policy.sft_demos_per_instance {
            let resp = gold_behavior_demo(inst, &config.task, config.policy.sft_demo_focus, &mut rng);
            demos.push((inst.clone(), resp));
        }
    }
    demos
}

/// Trains the reward-model checkpoint family described by `config`.
pub fn train_family(config: &Config, splits: &Splits) -> Result<Vec<RewardModelCheckpoint>> {
    let rm = &config.reward_model;
    let fmap = RmFeatureMap::new(config.task.vocab_size, rm.projection_seed);
    let dataset = build_dataset(splits, &config.task, rm.axis, &fmap, &rm.proxy()?, &rm.dataset())?;
    train_with_checkpoints(&dataset, &fmap, &rm.training())
}

/// The reward models a sweep can select from, keyed by step: the trained
/// family, or a single noisy oracle at step 0 when one is configured.
pub fn reward_models(config: &Config, splits: &Splits) -> Result<Vec<RewardModel>> {
    match config.reward_model.oracle {
        Some(o) => Ok(vec![RewardModel::Oracle(make_noisy_oracle(o, config.reward_model.axis)?)]),
        None => Ok(train_family(config, splits)?
            .into_iter()
            .map(RewardModel::learned)
            .collect()),
    }
}

pub fn family_rows(models: &[RewardModel]) -> Vec<FamilyRow> {
    let mut rows: Vec<FamilyRow> = models
        .iter()
        .map(|m| {
            let id = m.identity();
            FamilyRow {
                step: id.step,
                accuracy_proxy: id.accuracy_proxy,
                accuracy_gold: id.accuracy_gold,
            }
        })
        .collect();
    rows.sort_by_key(|r| r.step);
    rows
}

pub const RUNS_DIR: &str = "runs";
pub const STATUS_FILE: &str = "status.json";

/// Contents of `status.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatusFile {
    pub run_id: String,
    pub seed: u64,
    pub rm_step: u64,
    pub status: RunStatus,
    pub steps_completed: u64,
    pub interruption: Option<crate::ppo::Interruption>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct EvalRow {
    step: u64,
    relevance_ratio: f64,
    factuality_ratio: f64,
    completeness_reward: f64,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::data(format!("csv buffer: {e}")))
}

/// Writes a complete run directory under a temporary name and renames it to
/// `final_dir`, so a half-written run is never visible under its final name.
pub fn write_run_dir(
    final_dir: &Path,
    config: &Config,
    status: &RunStatusFile,
    record: Option<&RunRecord>,
    reward_model: &RewardModelIdentity,
) -> Result<()> {
    let parent = final_dir
        .parent()
        .ok_or_else(|| Error::usage("run directory needs a parent"))?;
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = final_dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    let tmp = parent.join(format!(".tmp-{name}-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    write_file(&tmp.join("config.json"), config.to_json_pretty()?.as_bytes())?;
    write_file(&tmp.join("reward_model.json"), &serde_json::to_vec_pretty(reward_model)?)?;
    if let Some(rec) = record {
        write_file(
            &tmp.join("metrics.csv"),
            &csv_bytes(&rec.metrics, &["step", "reward_mean", "reward_var", "kl_mean", "kl_var"])?,
        )?;
        let evals: Vec<EvalRow> = rec
            .evals
            .iter()
            .map(|e| EvalRow {
                step: e.step,
                relevance_ratio: e.perf.relevance_ratio,
                factuality_ratio: e.perf.factuality_ratio,
                completeness_reward: e.perf.completeness_reward,
            })
            .collect();
        write_file(
            &tmp.join("eval.csv"),
            &csv_bytes(&evals, &["step", "relevance_ratio", "factuality_ratio", "completeness_reward"])?,
        )?;
        write_file(&tmp.join("policy.json"), &serde_json::to_vec(&rec.final_policy)?)?;
        write_file(&tmp.join("value.json"), &serde_json::to_vec(&rec.final_value)?)?;
    }
    // status.json last: its presence marks a finished run.
    write_file(&tmp.join(STATUS_FILE), &serde_json::to_vec_pretty(status)?)?;

    if final_dir.exists() {
        fs::remove_dir_all(final_dir).map_err(|e| Error::io(final_dir, e))?;
    }
    fs::rename(&tmp, final_dir).map_err(|e| Error::io(final_dir, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn read_metrics(dir: &Path) -> Result<Vec<StepMetrics>> {
    let path = dir.join("metrics.csv");
    let mut r = csv::Reader::from_path(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn read_evals(dir: &Path) -> Result<Vec<EvalPoint>> {
    let path = dir.join("eval.csv");
    let mut r = csv::Reader::from_path(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let rows: Vec<EvalRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(rows
        .into_iter()
        .map(|row| EvalPoint {
            step: row.step,
            perf: PerfRecord {
                relevance_ratio: row.relevance_ratio,
                factuality_ratio: row.factuality_ratio,
                completeness_reward: row.completeness_reward,
                n_eval_instances: 0,
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedRun {
    pub run_id: String,
    pub rm_step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub config: Config,
    pub family: Vec<FamilyRow>,
    pub selected_steps: Vec<u64>,
    pub seeds: Vec<u64>,
    pub eval_every: u64,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub runs: Vec<PlannedRun>,
}

/// The config with execution-only settings reset, so thread count and resume
/// mode never change a run's identity or its files.
fn run_scoped(config: &Config) -> Config {
    let mut c = config.clone();
    let defaults = SweepConfig::default();
    c.sweep.parallelism = defaults.parallelism;
    c.sweep.resume = defaults.resume;
    c
}

/// Hex SHA-256 of the resolved config, checkpoint step and seed.
pub fn run_id(config: &Config, rm_step: u64, seed: u64) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&run_scoped(config))?);
    h.update(rm_step.to_le_bytes());
    h.update(seed.to_le_bytes());
    Ok(hex::encode(h.finalize())[..16].to_string())
}

/// Cartesian product of the selected checkpoints and the configured seeds.
pub fn plan_sweep(config: &Config, family: &[FamilyRow], output_dir: &Path) -> Result<SweepPlan> {
    config.validate()?;
    if family.is_empty() {
        return Err(Error::usage("a sweep needs a non-empty reward-model family"));
    }
    let selected = match &config.sweep.checkpoint_steps {
        None => family.iter().map(|r| r.step).collect(),
        Some(steps) => {
            for s in steps {
                if !family.iter().any(|r| r.step == *s) {
                    return Err(Error::config(format!(
                        "sweep.checkpoint_steps: step {s} is not in the reward-model family"
                    )));
                }
            }
            steps.clone()
        }
    };
    let mut runs = Vec::new();
    for &step in &selected {
        for &seed in &config.sweep.seeds {
            runs.push(PlannedRun {
                run_id: run_id(config, step, seed)?,
                rm_step: step,
                seed,
            });
        }
    }
    Ok(SweepPlan {
        config: config.clone(),
        family: family.to_vec(),
        selected_steps: selected,
        seeds: config.sweep.seeds.clone(),
        eval_every: config.sweep.eval_every,
        output_dir: output_dir.to_path_buf(),
        parallelism: config.sweep.parallelism,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub rm_step: u64,
    pub seed: u64,
    pub status: RunStatus,
    pub diagnostic: Option<String>,
}

/// Where the best point sits relative to the most accurate checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisReport {
    pub axis: Axis,
    pub best: SurfacePoint,
    pub family_max_accuracy_proxy: f64,
    /// The best point's checkpoint is strictly less accurate than the most
    /// accurate checkpoint in the sweep.
    pub paradox: bool,
    /// Best performance per checkpoint never decreases as accuracy grows.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub reports: Vec<AxisReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadoxReport {
    /// Axis the reward models were trained for.
    pub reward_axis: Axis,
    pub overall: Vec<AxisReport>,
    pub per_seed: Vec<SeedReport>,
    /// Seeds whose report marks a paradox on `reward_axis`.
    pub seeds_with_paradox: usize,
}

impl ParadoxReport {
    pub fn overall_for(&self, axis: Axis) -> Option<&AxisReport> {
        self.overall.iter().find(|r| r.axis == axis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<RunSummary>,
    pub surface: Vec<SurfacePoint>,
    pub report: Option<ParadoxReport>,
    pub executed: usize,
    pub reused: usize,
}

/// Points after step 0 when any exist. Every run starts from the same
/// policy, so step-0 points carry no information about the reward model.
fn trained_points(surface: &[SurfacePoint]) -> Vec<SurfacePoint> {
    let trained: Vec<SurfacePoint> = surface.iter().copied().filter(|p| p.lm_step > 0).collect();
    if trained.is_empty() {
        surface.to_vec()
    } else {
        trained
    }
}

pub fn axis_report(surface: &[SurfacePoint], axis: Axis) -> Result<AxisReport> {
    let points = trained_points(surface);
    let best = best_checkpoint_report(&points, axis)?;
    let family_max = points
        .iter()
        .map(|p| p.rm_accuracy_proxy)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut per_ckpt: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for p in &points {
        let e = per_ckpt
            .entry(p.rm_step)
            .or_insert((p.rm_accuracy_proxy, f64::NEG_INFINITY));
        e.1 = e.1.max(p.metric(axis));
    }
    let mut by_acc: Vec<(f64, f64)> = per_ckpt.into_values().collect();
    by_acc.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = by_acc.windows(2).all(|w| w[1].1 >= w[0].1);
    Ok(AxisReport {
        axis,
        best,
        family_max_accuracy_proxy: family_max,
        paradox: best.rm_accuracy_proxy < family_max,
        monotone,
    })
}

pub fn paradox_report(outcomes: &[RunOutcome], reward_axis: Axis) -> Result<ParadoxReport> {
    let surface = build_surface(outcomes)?;
    let overall = Axis::ALL
        .iter()
        .map(|&a| axis_report(&surface, a))
        .collect::<Result<Vec<_>>>()?;
    let mut seeds: Vec<u64> = outcomes.iter().map(|o| o.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut per_seed = Vec::new();
    for seed in seeds {
        let runs: Vec<RunOutcome> = outcomes.iter().filter(|o| o.seed == seed).cloned().collect();
        let s = build_surface(&runs)?;
        let reports = Axis::ALL
            .iter()
            .map(|&a| axis_report(&s, a))
            .collect::<Result<Vec<_>>>()?;
        per_seed.push(SeedReport { seed, reports });
    }
    let seeds_with_paradox = per_seed
        .iter()
        .filter(|s| s.reports.iter().any(|r| r.axis == reward_axis && r.paradox))
        .count();
    Ok(ParadoxReport {
        reward_axis,
        overall,
        per_seed,
        seeds_with_paradox,
    })
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(format!(".write-probe-{}", std::process::id()));
    fs::write(&probe, b"").map_err(|e| Error::io(dir, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn run_dir(output_dir: &Path, run_id: &str) -> PathBuf {
    output_dir.join(RUNS_DIR).join(run_id)
}

fn execute_one(exp: &Experiment, model: &RewardModel, run: &PlannedRun, dir: &Path) -> Result<()> {
    let mut config = run_scoped(&exp.config);
    config.ppo.seed = run.seed;
    let identity = model.identity();
    let (record, status, steps, interruption, diagnostic) =
        match train_run(&config.run_config(), &exp.run_env(), &exp.init_policy, model) {
            Ok(rec) => {
                let (s, n, i, d) = (rec.status, rec.steps_completed(), rec.interruption.clone(), rec.diagnostic.clone());
                (Some(rec), s, n, i, d)
            }
            Err(e) => (None, RunStatus::Failed, 0, None, Some(e.to_string())),
        };
    let status_file = RunStatusFile {
        run_id: run.run_id.clone(),
        seed: run.seed,
        rm_step: run.rm_step,
        status,
        steps_completed: steps,
        interruption,
        diagnostic,
    };
    write_run_dir(dir, &config, &status_file, record.as_ref(), &identity)
}

/// Executes every planned run with at most `plan.parallelism` in flight and
/// aggregates the results. With `resume`, runs whose directory already holds
/// a status file are not executed again.
pub fn execute_sweep(plan: &SweepPlan, exp: &Experiment, models: &[RewardModel]) -> Result<SweepResult> {
    ensure_writable(&plan.output_dir)?;
    let by_step: BTreeMap<u64, &RewardModel> = models.iter().map(|m| (m.identity().step, m)).collect();
    for run in &plan.runs {
        if !by_step.contains_key(&run.rm_step) {
            return Err(Error::config(format!("no reward model for checkpoint step {}", run.rm_step)));
        }
    }
    let resume = plan.config.sweep.resume;
    let pending: Vec<&PlannedRun> = plan
        .runs
        .iter()
        .filter(|r| !(resume && run_dir(&plan.output_dir, &r.run_id).join(STATUS_FILE).exists()))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| Error::data(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<()>> = pool.install(|| {
        pending
            .par_iter()
            .map(|run| {
                log::info!("run {} (checkpoint {}, seed {})", run.run_id, run.rm_step, run.seed);
                execute_one(exp, by_step[&run.rm_step], run, &run_dir(&plan.output_dir, &run.run_id))
            })
            .collect()
    });
    for r in outcomes {
        r?;
    }
    let dirs: Vec<PathBuf> = plan.runs.iter().map(|r| run_dir(&plan.output_dir, &r.run_id)).collect();
    let mut result = aggregate_results(&dirs, plan.config.reward_model.axis)?;
    result.executed = pending.len();
    result.reused = plan.runs.len() - pending.len();
    write_outputs(&plan.output_dir, plan, &result, &dirs)?;
    Ok(result)
}

fn read_outcome(dir: &Path) -> Result<(RunStatusFile, RunOutcome)> {
    let status: RunStatusFile = read_json(&dir.join(STATUS_FILE))?;
    let identity: RewardModelIdentity = read_json(&dir.join("reward_model.json"))?;
    let evals = if status.status == RunStatus::Failed { Vec::new() } else { read_evals(dir)? };
    if status.status != RunStatus::Failed {
        read_metrics(dir)?;
    }
    let outcome = RunOutcome {
        run_id: status.run_id.clone(),
        seed: status.seed,
        reward_model: Some(identity),
        evals,
    };
    Ok((status, outcome))
}

/// Reads run directories, marks unreadable ones as failed and builds the
/// surface and paradox report from the rest.
pub fn aggregate_results(dirs: &[PathBuf], reward_axis: Axis) -> Result<SweepResult> {
    if dirs.is_empty() {
        return Err(Error::usage("aggregation needs at least one run directory"));
    }
    let mut runs = Vec::new();
    let mut outcomes = Vec::new();
    for dir in dirs {
        match read_outcome(dir) {
            Ok((status, outcome)) => {
                runs.push(RunSummary {
                    run_id: status.run_id.clone(),
                    rm_step: status.rm_step,
                    seed: status.seed,
                    status: status.status,
                    diagnostic: status.diagnostic.clone(),
                });
                if status.status != RunStatus::Failed {
                    outcomes.push((status.rm_step, status.seed, outcome));
                }
            }
            Err(e) => {
                let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                log::warn!("run {name} is unreadable: {e}");
                let status: Option<RunStatusFile> = read_json(&dir.join(STATUS_FILE)).ok();
                runs.push(RunSummary {
                    run_id: name.to_string(),
                    rm_step: status.as_ref().map_or(0, |s| s.rm_step),
                    seed: status.as_ref().map_or(0, |s| s.seed),
                    status: RunStatus::Failed,
                    diagnostic: Some(e.to_string()),
                });
            }
        }
    }
    outcomes.sort_by(|a, b| (a.0, a.1, &a.2.run_id).cmp(&(b.0, b.1, &b.2.run_id)));
    let outcomes: Vec<RunOutcome> = outcomes.into_iter().map(|o| o.2).collect();
    let surface = build_surface(&outcomes)?;
    let report = if outcomes.iter().any(|o| !o.evals.is_empty()) {
        Some(paradox_report(&outcomes, reward_axis)?)
    } else {
        None
    };
    runs.sort_by(|a, b| (a.rm_step, a.seed, &a.run_id).cmp(&(b.rm_step, b.seed, &b.run_id)));
    Ok(SweepResult {
        runs,
        surface,
        report,
        executed: 0,
        reused: 0,
    })
}

/// Windowed reward and KL statistics for each readable run.
pub fn run_dynamics(dirs: &[PathBuf], window: usize) -> Result<Vec<DynamicsStats>> {
    let mut stats = Vec::new();
    for dir in dirs {
        let Ok(status) = read_json::<RunStatusFile>(&dir.join(STATUS_FILE)) else { continue };
        let Ok(metrics) = read_metrics(dir) else { continue };
        let prefix = format!("rm{}/seed{}", status.rm_step, status.seed);
        let reward: Vec<(u64, f64)> = metrics.iter().map(|m| (m.step, m.reward_mean)).collect();
        let kl: Vec<(u64, f64)> = metrics.iter().map(|m| (m.step, m.kl_mean)).collect();
        stats.push(dynamics_stats(&format!("{prefix}/reward_mean"), &reward, window)?);
        stats.push(dynamics_stats(&format!("{prefix}/kl_mean"), &kl, window)?);
    }
    stats.sort_by(|a, b| a.series.cmp(&b.series));
    Ok(stats)
}

pub const SURFACE_FILE: &str = "surface.csv";
pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.json";

#[derive(Serialize)]
struct SweepFile<'a> {
    plan: &'a SweepPlan,
    runs: &'a [RunSummary],
}

/// `surface.csv`, `dynamics.csv`, `report.json` and `sweep.json`.
pub fn write_outputs(out: &Path, plan: &SweepPlan, result: &SweepResult, dirs: &[PathBuf]) -> Result<()> {
    write_aggregates(out, result, dirs, plan.config.sweep.dynamics_window)?;
    let sweep = SweepFile {
        plan,
        runs: &result.runs,
    };
    write_file(&out.join(SWEEP_FILE), &serde_json::to_vec_pretty(&sweep)?)
}

pub fn write_aggregates(out: &Path, result: &SweepResult, dirs: &[PathBuf], window: usize) -> Result<()> {
    let surface = emit_plot_data(
        PlotData::Surface {
            points: &result.surface,
            axis: Axis::Relevance,
        },
        PlotFormat::Csv,
    )?;
    write_file(&out.join(SURFACE_FILE), &surface)?;
    let dynamics = run_dynamics(dirs, window)?;
    write_file(&out.join(DYNAMICS_FILE), &emit_plot_data(PlotData::Dynamics(&dynamics), PlotFormat::Csv)?)?;
    #[derive(Serialize)]
    struct ReportFile<'a> {
        runs: &'a [RunSummary],
        report: &'a Option<ParadoxReport>,
    }
    let report = ReportFile {
        runs: &result.runs,
        report: &result.report,
    };
    write_file(&out.join(REPORT_FILE), &serde_json::to_vec_pretty(&report)?)
}

/// Run directories found under `out/runs`, sorted by name.
pub fn list_run_dirs(out: &Path) -> Result<Vec<PathBuf>> {
    let root = out.join(RUNS_DIR);
    let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&root, e))?;
        let name = entry.file_name();
        if entry.path().is_dir() && !name.to_string_lossy().starts_with('.') {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Everything `sweep` does: data, supervised policy, reward models, plan,
/// execution and aggregation.
pub fn run_sweep(config: &Config, output_dir: &Path) -> Result<SweepResult> {
    ensure_writable(output_dir)?;
    let exp = Experiment::prepare(config)?;
    let models = reward_models(config, &exp.splits)?;
    if config.reward_model.oracle.is_none() {
        let family: Vec<RewardModelCheckpoint> = models
            .iter()
            .filter_map(|m| match m {
                RewardModel::Learned { checkpoint, .. } => Some(checkpoint.clone()),
                RewardModel::Oracle(_) => None,
            })
            .collect();
        crate::reward_model::save_family(&output_dir.join("family"), &family)?;
        debug_assert_eq!(family_summary(&family), family_rows(&models));
    }
    let plan = plan_sweep(config, &family_rows(&models), output_dir)?;
    execute_sweep(&plan, &exp, &models)
}
