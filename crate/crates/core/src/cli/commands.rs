use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::filters::{
    run_filter_with, FilterMethod, FilterModel, FilterOptions, LinearGaussian, ObsModel, StepPosterior, Transition,
};
use crate::mdpenv::FilterEnv;
use crate::metrics::{method_name, report, rmse_f, score_run, EvalReport};
use crate::ppo::{train, TrainOutput, CHECKPOINT_FILE};
use crate::rng::{derive_seed, derived_rng, streams};
use crate::ssm::{generate_dataset, Dataset, SystemSpec};
use crate::surrogate::{init_models, load_models, Actor};
use crate::tensor::Tensor;

pub const POSTERIOR_FILE: &str = "posterior.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const FORECAST_FILE: &str = "forecast.jsonl";
pub const EVAL_HEADER: &str = "system,method,snr_db,metric,value,n_traj";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Generates the dataset into `io.data_dir`.
pub fn gen(cfg: &RunConfig, out: &mut impl Write) -> Result<Dataset> {
    cfg.validate()?;
    let mut spec = cfg.system.resolve()?;
    if let Some(snr) = cfg.data.snr_db {
        spec = spec.with_snr(snr, cfg.data.seed)?;
    }
    let d = &cfg.data;
    let ds = generate_dataset(&spec, d.k_train, d.t_train, d.k_test, d.t_test, d.seed)?;
    ds.save(&cfg.io.data_dir)?;
    cfg.write_resolved(&cfg.io.data_dir, &spec)?;
    let table = format!(
        "system {} (state {}, observation {}, R {:.4})\nsplit  trajectories  steps\ntrain  {:>12}  {:>5}\ntest   {:>12}  {:>5}\n",
        spec.name(),
        spec.state_dim,
        spec.obs_dim(),
        spec.obs_noise.first().copied().unwrap_or(0.0),
        ds.train.len(),
        d.t_train,
        ds.test.len(),
        d.t_test,
    );
    out.write_all(table.as_bytes()).map_err(|e| Error::io("stdout", e))?;
    Ok(ds)
}

/// Trains on `io.data_dir` and writes the checkpoint and log to `io.run_dir`.
pub fn train_cmd(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.io.data_dir)?;
    let spec = &ds.system;
    let (actor_spec, critic_spec) = cfg.model.resolve(spec, cfg.train.control)?;
    let (actor, critic) = init_models(actor_spec, critic_spec, cfg.train.seed)?;
    let env = FilterEnv::for_system(spec, cfg.train.backend, cfg.train.n_particles);
    let dir = cfg.io.run_dir.clone();
    cfg.write_resolved(&dir, spec)?;
    let rep = train(&cfg.train, &env, &ds.train, actor, critic, &TrainOutput { dir: Some(dir.clone()) })?;
    let last = rep.log.last().map_or(f64::NAN, |r| r.mean_return);
    writeln!(
        out,
        "iterations {}, final mean return {last:.4}, best {:.4} at iteration {}{}\ncheckpoint {}",
        rep.log.len(),
        rep.best_return,
        rep.best_iteration,
        if rep.stopped_on_plateau { " (plateau)" } else { "" },
        dir.join(CHECKPOINT_FILE).display()
    )
    .map_err(|e| Error::io("stdout", e))
}

/// Where the transition used by `assimilate` and `forecast` comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Truth,
    Checkpoint(PathBuf),
}

enum Loaded {
    Truth,
    Learned { actor: Box<Actor>, backend: Option<String> },
}

fn load_source(src: &ModelSource, spec: &SystemSpec) -> Result<Loaded> {
    match src {
        ModelSource::Truth => Ok(Loaded::Truth),
        ModelSource::Checkpoint(path) => {
            let (actor, _, ckpt) = load_models(path)?;
            let a = actor.spec();
            if a.state_dim != spec.state_dim {
                return Err(Error::Config(format!(
                    "checkpoint state dimension {} does not match {} ({})",
                    a.state_dim,
                    spec.name(),
                    spec.state_dim
                )));
            }
            if a.control_dim != 0 && a.control_dim != spec.control_dim() {
                return Err(Error::Config(format!(
                    "checkpoint control dimension {} does not match {} ({})",
                    a.control_dim,
                    spec.name(),
                    spec.control_dim()
                )));
            }
            let backend = ckpt.meta.pointer("/train/backend").and_then(|v| v.as_str()).map(str::to_string);
            Ok(Loaded::Learned {
                actor: Box::new(actor),
                backend,
            })
        }
    }
}

impl Loaded {
    fn transition<'a>(&'a self, spec: &'a SystemSpec) -> &'a dyn Transition {
        match self {
            Loaded::Truth => spec,
            Loaded::Learned { actor, .. } => actor.as_ref(),
        }
    }

    fn label(&self, method: FilterMethod) -> String {
        match self {
            Loaded::Truth => format!("truth_{}", method_name(method)),
            Loaded::Learned { backend, .. } => {
                format!("ppo_{}_{}", backend.as_deref().unwrap_or("unknown"), method_name(method))
            }
        }
    }
}

#[derive(Serialize)]
struct PosteriorLine<'a> {
    id: usize,
    t: usize,
    mean: &'a [f64],
    std: &'a [f64],
    loglik_inc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    particles: Option<Vec<&'a [f64]>>,
}

/// Final filtering ensemble of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub id: usize,
    pub t: usize,
    pub particles: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Saved output of `assimilate`, the input of `forecast`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssimilationState {
    pub system: SystemSpec,
    pub source: ModelSource,
    pub method: FilterMethod,
    pub seed: u64,
    pub ensembles: Vec<EnsembleState>,
}

#[derive(Clone, Debug)]
pub struct AssimilateArgs {
    pub source: ModelSource,
    pub dump_ensembles: bool,
}

/// Filters the test split of `io.data_dir`; writes posteriors, the final
/// ensembles and the metric report to `io.out_dir`.
pub fn assimilate(cfg: &RunConfig, args: &AssimilateArgs) -> Result<EvalReport> {
    cfg.validate()?;
    let ev = &cfg.eval;
    let ds = Dataset::load(&cfg.io.data_dir)?;
    let spec = &ds.system;
    let loaded = load_source(&args.source, spec)?;
    let linear = match (ev.method, &loaded) {
        (FilterMethod::Kf, Loaded::Truth) => Some(LinearGaussian::from_system(spec).ok_or_else(|| {
            Error::Config(format!("the Kalman filter needs a linear-Gaussian system, {} is not", spec.name()))
        })?),
        (FilterMethod::Kf, _) => return Err(Error::Config("the Kalman filter runs with --truth-model only".into())),
        _ => None,
    };
    let prior = spec.default_prior();
    let model = FilterModel {
        transition: loaded.transition(spec),
        observation: ObsModel::of(spec),
        prior: &prior,
        linear: linear.as_ref(),
    };
    let out_dir = &cfg.io.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.write_resolved(out_dir, spec)?;
    let post_path = out_dir.join(POSTERIOR_FILE);
    let mut post = create(&post_path)?;
    let mut metrics = Vec::with_capacity(ds.test.len());
    let mut ensembles = Vec::with_capacity(ds.test.len());
    let opts = FilterOptions { keep_ensembles: true };
    for (k, traj) in ds.test.iter().enumerate() {
        let traj = match ev.until {
            Some(u) => traj.truncated(u.min(traj.len())),
            None => traj.clone(),
        };
        let seed = derive_seed(ev.seed, streams::FILTER, k as u64);
        let run = run_filter_with(ev.method, &model, &traj, ev.n_particles, seed, opts)?;
        for s in &run.steps {
            write_posterior(&mut post, &post_path, traj.id, s, args.dump_ensembles)?;
        }
        if traj.x.is_some() && !run.steps.is_empty() {
            metrics.push(score_run(ev.method, &run, &traj)?);
        }
        if let Some(e) = &run.last {
            ensembles.push(EnsembleState {
                id: traj.id,
                t: e.t,
                particles: e.particles.row_iter().map(<[f64]>::to_vec).collect(),
                weights: e.weights.clone(),
            });
        }
    }
    post.flush().map_err(|e| Error::io(&post_path, e))?;

    let state_path = out_dir.join(STATE_FILE);
    if ev.method == FilterMethod::Kf {
        if state_path.exists() {
            std::fs::remove_file(&state_path).map_err(|e| Error::io(&state_path, e))?;
        }
    } else {
        let state = AssimilationState {
            system: spec.clone(),
            source: args.source.clone(),
            method: ev.method,
            seed: ev.seed,
            ensembles,
        };
        let mut w = create(&state_path)?;
        serde_json::to_writer(&mut w, &state)?;
        w.flush().map_err(|e| Error::io(&state_path, e))?;
    }

    let mut rep = report(spec, &loaded.label(ev.method), ev.n_particles, ev.seed, cfg.data.snr_db, metrics);
    if ev.rmse_f_horizon > 0 {
        let vals = rmse_f(loaded.transition(spec), spec, ev.rmse_f_horizon, ev.rmse_f_initial, ev.n_particles, ev.seed)?;
        rep.rmse_f = vals.into_iter().enumerate().map(|(h, v)| (h + 1, v)).collect();
    }
    rep.save_json(&out_dir.join(REPORT_JSON))?;
    let csv_path = out_dir.join(REPORT_CSV);
    std::fs::write(&csv_path, rep.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(rep)
}

fn write_posterior(w: &mut impl Write, path: &Path, id: usize, s: &StepPosterior, dump: bool) -> Result<()> {
    let line = PosteriorLine {
        id,
        t: s.t,
        mean: &s.mean,
        std: &s.std,
        loglik_inc: s.loglik_inc,
        particles: if dump { s.particles.as_ref().map(|p| p.row_iter().collect()) } else { None },
    };
    write_line(w, path, &serde_json::to_string(&line)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastLine {
    pub id: usize,
    pub t: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Propagates the saved final ensembles `horizon` steps with no analysis.
/// Controls come from the matching test trajectories of `io.data_dir`
/// when the system is controlled.
pub fn forecast(cfg: &RunConfig, source: Option<ModelSource>, horizon: usize) -> Result<Vec<ForecastLine>> {
    let state_path = cfg.io.out_dir.join(STATE_FILE);
    if !state_path.exists() {
        return Err(Error::Contract(format!(
            "no assimilation state at {}; run assimilate with a particle method first",
            state_path.display()
        )));
    }
    let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state: AssimilationState = serde_json::from_str(&text)?;
    let spec = &state.system;
    let source = source.unwrap_or_else(|| state.source.clone());
    let loaded = load_source(&source, spec)?;
    let transition = loaded.transition(spec);
    let controls = if spec.control_dim() > 0 {
        Some(Dataset::load(&cfg.io.data_dir)?.test)
    } else {
        None
    };
    let mut lines = Vec::new();
    for (k, e) in state.ensembles.iter().enumerate() {
        let mut ens = crate::filters::Ensemble {
            particles: Tensor::from_rows(&e.particles)?,
            weights: e.weights.clone(),
            t: e.t,
        };
        let mut rng = derived_rng(cfg.eval.seed, streams::FORECAST, k as u64);
        lines.push(ForecastLine {
            id: e.id,
            t: ens.t,
            mean: ens.mean(),
            std: ens.std(),
        });
        for h in 0..horizon {
            let t = e.t + h;
            let control = match &controls {
                Some(test) => Some(
                    test.iter()
                        .find(|tr| tr.id == e.id)
                        .and_then(|tr| tr.control(t))
                        .ok_or_else(|| {
                            Error::Contract(format!("trajectory {} has no control at t = {t} for the forecast", e.id))
                        })?,
                ),
                None => None,
            };
            let particles = transition.propagate(&ens.particles, control, &mut rng)?;
            ens = crate::filters::Ensemble::uniform(particles, t + 1);
            lines.push(ForecastLine {
                id: e.id,
                t: ens.t,
                mean: ens.mean(),
                std: ens.std(),
            });
        }
    }
    let path = cfg.io.out_dir.join(FORECAST_FILE);
    let mut w = create(&path)?;
    for l in &lines {
        write_line(&mut w, &path, &serde_json::to_string(l)?)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(lines)
}

/// Merges reports into one long-format CSV.
pub fn eval(reports: &[PathBuf]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Config("eval needs at least one report".into()));
    }
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for path in reports {
        let rep = EvalReport::load_json(path).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{} is not a report: {j}", path.display())),
            other => other,
        })?;
        let snr = rep.snr_db.map(|s| s.to_string()).unwrap_or_default();
        for (metric, value) in rep.aggregate_rows() {
            out.push_str(&format!(
                "{},{},{snr},{metric},{value},{}\n",
                rep.system,
                rep.method,
                rep.trajectories.len()
            ));
        }
    }
    Ok(out)
}
