//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, Config, Preset};
use crate::env::{Axis, Splits};
use crate::error::{Error, Result};
use crate::eval::{emit_plot_data, parse_surface_csv, DynamicsStats, PlotData, PlotFormat};
use crate::policy::{sft_train, FeatureMap};
use crate::reward_model::{save_family, RewardModel};
use crate::sweep::{
    aggregate_results, execute_sweep, family_rows, list_run_dirs, plan_sweep, reward_models,
    run_dynamics, run_sweep, sft_demos, train_family, write_aggregates, Experiment, SURFACE_FILE,
};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "RPL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "rpl", version, about = "PPO against reward models of varying accuracy")]
pub struct Cli {
    /// JSON file with configuration overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $RPL_OUT_DIR, else ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides ppo.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["desk", "paper"], default_value = "desk")]
    pub preset: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/valid/test task instances.
    GenData,
    /// Fit the initial policy to demonstrations.
    TrainSft,
    /// Train the reward-model checkpoint family.
    TrainRm,
    /// One PPO run against a single reward model.
    PpoRun {
        /// Checkpoint step to train against (default: the last one).
        #[arg(long)]
        rm_step: Option<u64>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Every selected checkpoint × seed, then aggregation.
    Sweep,
    /// Rebuild surface, dynamics and report from existing run directories.
    Aggregate,
    /// Render surface or dynamics data.
    Plot {
        #[arg(long, value_parser = ["surface", "dynamics"], default_value = "surface")]
        kind: String,
        #[arg(long, default_value = "svg")]
        format: String,
        #[arg(long, default_value = "relevance")]
        axis: String,
        /// Destination file (default: standard output).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve(cli: &Cli) -> Result<Config> {
    let preset: Preset = cli.preset.parse()?;
    let mut cfg = load_config(cli.config.as_deref(), preset)?;
    if let Some(seed) = cli.seed {
        cfg.ppo.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match output {
        Some(p) => write(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = out_dir(cli);
    match &cli.command {
        Command::GenData => {
            let cfg = resolve(cli)?;
            let splits = Splits::generate(&cfg.task, cfg.data_seed)?;
            write(&out.join("splits.json"), &serde_json::to_vec(&splits)?)?;
        }
        Command::TrainSft => {
            let cfg = resolve(cli)?;
            let splits = Splits::generate(&cfg.task, cfg.data_seed)?;
            let fmap = FeatureMap::new(&cfg.task, cfg.policy.feature_dim)?;
            let policy = sft_train(&fmap, &sft_demos(&cfg, &splits.train), &cfg.policy.sft())?;
            write(&out.join("sft_policy.json"), &serde_json::to_vec(&policy)?)?;
        }
        Command::TrainRm => {
            let cfg = resolve(cli)?;
            let splits = Splits::generate(&cfg.task, cfg.data_seed)?;
            let family = train_family(&cfg, &splits)?;
            save_family(&out.join("family"), &family)?;
            for c in &family {
                println!("{}\t{:.4}\t{:.4}", c.step, c.accuracy_proxy, c.accuracy_gold);
            }
        }
        Command::PpoRun { rm_step, dry_run } => {
            let mut cfg = resolve(cli)?;
            if *dry_run {
                println!("{}", cfg.to_json_pretty()?);
                return Ok(());
            }
            let exp = Experiment::prepare(&cfg)?;
            let models = reward_models(&cfg, &exp.splits)?;
            let step = match rm_step {
                Some(s) => *s,
                None => models.iter().map(|m| m.identity().step).max().unwrap_or(0),
            };
            let model: Vec<RewardModel> = models.into_iter().filter(|m| m.identity().step == step).collect();
            if model.is_empty() {
                return Err(Error::config(format!("no reward-model checkpoint at step {step}")));
            }
            cfg.sweep.seeds = vec![cfg.ppo.seed];
            cfg.sweep.checkpoint_steps = Some(vec![step]);
            cfg.sweep.parallelism = 1;
            let plan = plan_sweep(&cfg, &family_rows(&model), &out)?;
            let result = execute_sweep(&plan, &exp, &model)?;
            for r in &result.runs {
                println!("{}\t{:?}", out.join("runs").join(&r.run_id).display(), r.status);
            }
        }
        Command::Sweep => {
            let cfg = resolve(cli)?;
            let result = run_sweep(&cfg, &out)?;
            print_summary(&result);
        }
        Command::Aggregate => {
            let cfg = resolve(cli)?;
            let dirs = list_run_dirs(&out)?;
            let result = aggregate_results(&dirs, cfg.reward_model.axis)?;
            write_aggregates(&out, &result, &dirs, cfg.sweep.dynamics_window)?;
            print_summary(&result);
        }
        Command::Plot {
            kind,
            format,
            axis,
            output,
        } => {
            let format: PlotFormat = format.parse()?;
            let axis: Axis = axis.parse()?;
            let bytes = if kind == "surface" {
                let path = out.join(SURFACE_FILE);
                let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let points = parse_surface_csv(&raw)?;
                emit_plot_data(PlotData::Surface { points: &points, axis }, format)?
            } else {
                let cfg = resolve(cli)?;
                let stats: Vec<DynamicsStats> = run_dynamics(&list_run_dirs(&out)?, cfg.sweep.dynamics_window)?;
                emit_plot_data(PlotData::Dynamics(&stats), format)?
            };
            emit(output.as_deref(), &bytes)?;
        }
    }
    Ok(())
}

fn print_summary(result: &crate::sweep::SweepResult) {
    for r in &result.runs {
        println!("{}\trm_step={}\tseed={}\t{:?}", r.run_id, r.rm_step, r.seed, r.status);
    }
    if let Some(rep) = &result.report {
        if let Some(a) = rep.overall_for(rep.reward_axis) {
            println!(
                "best {}: {:.4} at rm_step={} lm_step={} (accuracy {:.4}, family max {:.4}); paradox={} monotone={}",
                a.axis, a.best.metric(a.axis), a.best.rm_step, a.best.lm_step,
                a.best.rm_accuracy_proxy, a.family_max_accuracy_proxy, a.paradox, a.monotone
            );
        }
        println!("seeds with paradox: {}/{}", rep.seeds_with_paradox, rep.per_seed.len());
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("rpl: {e}");
            e.exit_code()
        }
    }
}
