//! Command-line driver: `gen`, `train`, `assimilate`, `forecast`, `eval`.
//!
//! Every command reads an optional JSON [`RunConfig`]; flags override it.
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    assimilate, eval, forecast, gen, train_cmd, AssimilateArgs, AssimilationState, EnsembleState, ForecastLine,
    ModelSource, EVAL_HEADER, FORECAST_FILE, POSTERIOR_FILE, REPORT_CSV, REPORT_JSON, STATE_FILE,
};
pub use config::{preset, DataConfig, EvalConfig, IoConfig, ModelConfig, RunConfig, SystemConfig, PRESETS, RESOLVED_CONFIG_FILE};

use crate::error::{Error, Result};
use crate::filters::FilterMethod;
use crate::mdpenv::Backend;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const GEN_KEYS: &str = "Config keys read:
  system                       preset name or full system object
  data.k_train data.t_train data.k_test data.t_test data.seed data.snr_db
  io.data_dir";

const TRAIN_KEYS: &str = "Config keys read:
  train.iterations train.epochs train.minibatch train.actor_lr train.critic_lr
  train.gamma train.lambda train.clip_eps train.n_particles train.episodes
  train.grad_clip train.seed train.backend train.normalize_advantages
  train.plateau_window train.plateau_tol train.control
  model.actor model.critic model.init_noise_var model.residual
  io.data_dir io.run_dir";

const ASSIMILATE_KEYS: &str = "Config keys read:
  eval.method eval.n_particles eval.seed eval.until
  eval.rmse_f_horizon eval.rmse_f_initial
  data.snr_db (recorded in the report)
  io.data_dir io.run_dir io.out_dir";

const FORECAST_KEYS: &str = "Config keys read:
  eval.forecast_horizon eval.seed
  io.data_dir io.out_dir";

const EVAL_KEYS: &str = "Config keys read: none (reports are given as arguments)";

#[derive(Debug, Parser)]
#[command(name = "rlda", version, about = "Learn surrogate dynamics from noisy observations and assimilate with them")]
pub struct Cli {
    /// JSON run configuration; absent sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel rollouts (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a training and test dataset.
    #[command(after_help = GEN_KEYS)]
    Gen(GenArgs),
    /// Train the surrogate with PPO.
    #[command(after_help = TRAIN_KEYS)]
    Train(TrainArgs),
    /// Filter the test set and score the posteriors.
    #[command(after_help = ASSIMILATE_KEYS)]
    Assimilate(AssimArgs),
    /// Propagate the last posterior ensembles without analysis.
    #[command(after_help = FORECAST_KEYS)]
    Forecast(ForecastArgs),
    /// Merge reports into one long-format CSV.
    #[command(after_help = EVAL_KEYS)]
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// System preset (overrides `system`).
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub k_train: Option<usize>,
    #[arg(long)]
    pub t_train: Option<usize>,
    #[arg(long)]
    pub k_test: Option<usize>,
    #[arg(long)]
    pub t_test: Option<usize>,
    /// Dataset directory (overrides `io.data_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for the checkpoint and log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// enkf or pf.
    #[arg(long)]
    pub backend: Option<Backend>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Feed the system's control to the surrogate.
    #[arg(long)]
    pub control: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_particles: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Surrogate checkpoint (default: `io.run_dir`/checkpoint.json).
    #[arg(long, conflicts_with = "truth_model")]
    pub checkpoint: Option<PathBuf>,
    /// Use the true system instead of a surrogate.
    #[arg(long)]
    pub truth_model: bool,
}

#[derive(Debug, Args)]
pub struct AssimArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// enkf, pf or kf.
    #[arg(long)]
    pub method: Option<FilterMethod>,
    /// Ensemble size.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Assimilate only the first `until` observations.
    #[arg(long)]
    pub until: Option<usize>,
    /// Include every posterior ensemble in the posterior dump.
    #[arg(long)]
    pub dump_ensembles: bool,
    #[arg(long)]
    pub rmse_f_horizon: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Model override; by default the one used by `assimilate`.
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding the assimilation state; the forecast goes there too.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Report JSON files written by `assimilate`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// CSV destination (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn source(m: &ModelArgs, cfg: &RunConfig) -> ModelSource {
    match (&m.checkpoint, m.truth_model) {
        (_, true) => ModelSource::Truth,
        (Some(p), false) => ModelSource::Checkpoint(p.clone()),
        (None, false) => ModelSource::Checkpoint(cfg.io.run_dir.join(crate::ppo::CHECKPOINT_FILE)),
    }
}

fn override_opt<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

/// Executes a parsed command line.
pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        // A global pool may already exist when called repeatedly in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    match &cli.command {
        Command::Gen(a) => {
            if let Some(name) = &a.system {
                cfg.system = SystemConfig::Preset(name.clone());
            }
            let d = &mut cfg.data;
            override_opt(&mut d.seed, &a.seed);
            if a.snr_db.is_some() {
                d.snr_db = a.snr_db;
            }
            override_opt(&mut d.k_train, &a.k_train);
            override_opt(&mut d.t_train, &a.t_train);
            override_opt(&mut d.k_test, &a.k_test);
            override_opt(&mut d.t_test, &a.t_test);
            override_opt(&mut cfg.io.data_dir, &a.out);
            gen(&cfg, out)?;
        }
        Command::Train(a) => {
            override_opt(&mut cfg.io.data_dir, &a.data);
            override_opt(&mut cfg.io.run_dir, &a.out);
            let t = &mut cfg.train;
            override_opt(&mut t.backend, &a.backend);
            override_opt(&mut t.iterations, &a.iterations);
            override_opt(&mut t.seed, &a.seed);
            override_opt(&mut t.n_particles, &a.n_particles);
            t.control |= a.control;
            train_cmd(&cfg, out)?;
        }
        Command::Assimilate(a) => {
            override_opt(&mut cfg.io.data_dir, &a.data);
            override_opt(&mut cfg.io.out_dir, &a.out);
            let e = &mut cfg.eval;
            override_opt(&mut e.method, &a.method);
            override_opt(&mut e.n_particles, &a.n);
            override_opt(&mut e.seed, &a.seed);
            override_opt(&mut e.rmse_f_horizon, &a.rmse_f_horizon);
            if a.until.is_some() {
                e.until = a.until;
            }
            let args = AssimilateArgs {
                source: source(&a.model, &cfg),
                dump_ensembles: a.dump_ensembles,
            };
            let rep = assimilate(&cfg, &args)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            writeln!(
                out,
                "{} on {}: {} trajectories, RMSE-a {}, CRPS {}",
                rep.method,
                rep.system,
                rep.trajectories.len(),
                fmt(rep.rmse_a),
                fmt(rep.crps)
            )
            .map_err(|e| Error::io("stdout", e))?;
        }
        Command::Forecast(a) => {
            override_opt(&mut cfg.io.data_dir, &a.data);
            override_opt(&mut cfg.io.out_dir, &a.out);
            override_opt(&mut cfg.eval.forecast_horizon, &a.horizon);
            override_opt(&mut cfg.eval.seed, &a.seed);
            let src = (a.model.truth_model || a.model.checkpoint.is_some()).then(|| source(&a.model, &cfg));
            let lines = forecast(&cfg, src, cfg.eval.forecast_horizon)?;
            writeln!(
                out,
                "{} forecast steps written to {}",
                lines.len(),
                cfg.io.out_dir.join(FORECAST_FILE).display()
            )
            .map_err(|e| Error::io("stdout", e))?;
        }
        Command::Eval(a) => {
            let csv = eval(&a.reports)?;
            match &a.out {
                Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e))?,
                None => out.write_all(csv.as_bytes()).map_err(|e| Error::io("stdout", e))?,
            }
        }
    }
    Ok(())
}

/// Maps an error onto the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() || matches!(e, Error::Domain(_)) {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                eprint!("{}", e.render());
            } else {
                print!("{}", e.render());
            }
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let mut buf = Vec::new();
    let result = execute(&cli, &mut buf);
    print!("{}", String::from_utf8_lossy(&buf));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
