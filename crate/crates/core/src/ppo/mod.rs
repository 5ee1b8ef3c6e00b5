//! Proximal policy optimisation of the surrogate transition.

mod adam;
mod gae;
mod loss;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use gae::compute_gae;
pub use loss::{actor_loss, batch_log_prob, critic_loss};

use crate::diffmath::Tape;
use crate::error::{Error, Result};
use crate::mdpenv::{rollout, Backend, FilterEnv, RolloutBuffer, StepRecord};
use crate::rng::{derived_rng, streams};
use crate::ssm::Trajectory;
use crate::surrogate::{save_models, Actor, Critic};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "iteration,mean_return,actor_loss,critic_loss,grad_norm,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub actor_lr: f64,
    /// Learning rate of the surrogate's noise parameters (`actor_lr` when absent).
    pub noise_lr: Option<f64>,
    pub critic_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub n_particles: usize,
    /// Number of training trajectories used as episodes (all when absent).
    pub episodes: Option<usize>,
    pub grad_clip: f64,
    pub seed: u64,
    pub backend: Backend,
    pub normalize_advantages: bool,
    /// Stop when the best return improved by less than `plateau_tol`
    /// (relative) over this many iterations; 0 disables the check.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Feed the exogenous control to the actor and critic.
    pub control: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100,
            epochs: 1,
            minibatch: 512,
            actor_lr: 1e-3,
            noise_lr: Some(1e-2),
            critic_lr: 1e-3,
            gamma: 1.0,
            lambda: 0.9,
            clip_eps: 0.2,
            n_particles: 20,
            episodes: None,
            grad_clip: 5.0,
            seed: 0,
            backend: Backend::Enkf,
            normalize_advantages: true,
            plateau_window: 20,
            plateau_tol: 1e-3,
            control: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train.{what}")));
        if self.epochs == 0 || self.minibatch == 0 || self.n_particles == 0 {
            return bad("epochs, minibatch and n_particles must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.noise_lr.is_none_or(|v| v > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.backend == Backend::Enkf && self.n_particles < 2 {
            return bad("n_particles must be at least 2 for the EnKF backend");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.mean_return, self.actor_loss, self.critic_loss, self.grad_norm, self.wall_ms
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub best_return: f64,
    pub best_iteration: usize,
    pub stopped_on_plateau: bool,
    /// Parameters that achieved `best_return`.
    pub actor: Actor,
    pub critic: Critic,
}

/// Where training artifacts go; nothing is written when absent.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

struct Snapshot {
    actor: Actor,
    critic: Critic,
    ret: f64,
    iteration: usize,
}

struct UpdateStats {
    actor_loss: f64,
    critic_loss: f64,
    grad_norm: f64,
}

/// Checks that the recorded behaviour log-densities were produced by the
/// parameters about to be updated.
fn check_behaviour_logp(actor: &Actor, buf: &RolloutBuffer) -> Result<()> {
    let Some(step) = buf.steps.first() else {
        return Ok(());
    };
    let lp = actor.log_prob(&step.state, step.control.as_deref(), &step.action)?;
    if (lp - step.logp).abs() > 1e-8 * (1.0 + lp.abs()) {
        return Err(Error::Contract(format!(
            "behaviour log-density {} does not match the sampling policy ({lp})",
            step.logp
        )));
    }
    Ok(())
}

fn clip_grads(store: &mut crate::diffmath::ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[allow(clippy::too_many_arguments)]
fn update(
    cfg: &TrainConfig,
    actor: &mut Actor,
    critic: &mut Critic,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    buf: &RolloutBuffer,
    advantages: &[f64],
    targets: &[f64],
    iteration: usize,
) -> Result<UpdateStats> {
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut rng = derived_rng(cfg.seed, streams::SHUFFLE, iteration as u64);
    let (mut al, mut cl, mut gn, mut count) = (0.0, 0.0, 0.0, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<&StepRecord> = chunk.iter().map(|&i| &buf.steps[i]).collect();
            let mut adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            if cfg.normalize_advantages && adv.len() > 1 {
                let mean = adv.iter().sum::<f64>() / adv.len() as f64;
                let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / adv.len() as f64;
                let sd = var.sqrt() + 1e-8;
                adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
            }
            let tgt: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();

            let mut tape = Tape::new();
            let loss = actor_loss(actor, &mut tape, &batch, &adv, cfg.clip_eps)?;
            actor.store_mut().zero_grad();
            tape.backward(loss, actor.store_mut())?;
            gn += clip_grads(actor.store_mut(), cfg.grad_clip);
            actor_opt.step(actor.store_mut());
            al += tape.value(loss).data()[0];

            let mut tape = Tape::new();
            let loss = critic_loss(critic, &mut tape, &batch, &tgt)?;
            critic.store_mut().zero_grad();
            tape.backward(loss, critic.store_mut())?;
            clip_grads(critic.store_mut(), cfg.grad_clip);
            critic_opt.step(critic.store_mut());
            cl += tape.value(loss).data()[0];
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    Ok(UpdateStats {
        actor_loss: al / c,
        critic_loss: cl / c,
        grad_norm: gn / c,
    })
}

fn actor_adam(cfg: &TrainConfig, actor: &Actor, lr: f64) -> Adam {
    let mut opt = Adam::new(actor.store(), lr);
    if let Some(v) = cfg.noise_lr {
        opt.set_param_lr(actor.beta_id(), v * lr / cfg.actor_lr);
    }
    opt
}

fn params_finite(actor: &Actor, critic: &Critic) -> bool {
    let ok = |s: &crate::diffmath::ParamStore| s.ids().all(|id| s.value(id).is_finite());
    ok(actor.store()) && ok(critic.store())
}

fn write_checkpoint(dir: &Path, snap: &Snapshot, cfg: &TrainConfig, finished: bool) -> Result<()> {
    let meta = serde_json::json!({
        "train": cfg,
        "iteration": snap.iteration,
        "mean_return": snap.ret,
        "finished": finished,
    });
    save_models(&dir.join(CHECKPOINT_FILE), &snap.actor, Some(&snap.critic), meta)
}

/// Runs PPO: each iteration collects one episode per trajectory, computes
/// advantages, then performs `epochs` passes of minibatch updates (actor,
/// then critic). Non-finite updates restore the best parameters and halve
/// both learning rates; a second occurrence aborts.
pub fn train(
    cfg: &TrainConfig,
    env: &FilterEnv,
    trajectories: &[Trajectory],
    mut actor: Actor,
    mut critic: Critic,
    out: &TrainOutput,
) -> Result<TrainReport> {
    cfg.validate()?;
    let k = cfg.episodes.unwrap_or(trajectories.len()).min(trajectories.len());
    if k == 0 {
        return Err(Error::Config("training needs at least one trajectory".into()));
    }
    let episodes = &trajectories[..k];
    let env = FilterEnv {
        backend: cfg.backend,
        n_particles: cfg.n_particles,
        ..env.clone()
    };
    let mut log_file = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let (mut actor_lr, mut critic_lr) = (cfg.actor_lr, cfg.critic_lr);
    let mut actor_opt = actor_adam(cfg, &actor, actor_lr);
    let mut critic_opt = Adam::new(critic.store(), critic_lr);
    let mut best: Option<Snapshot> = None;
    let mut best_history: Vec<f64> = Vec::new();
    let mut log = Vec::new();
    let mut recovered = false;
    let mut stopped_on_plateau = false;
    let start = Instant::now();

    for it in 0..cfg.iterations {
        let t_roll = Instant::now();
        let buf = rollout(&env, &actor, Some(&critic), episodes, cfg.seed, it as u64);
        let roll_ms = t_roll.elapsed().as_millis();
        if buf.episodes.is_empty() {
            return Err(Error::TrainingAborted(format!(
                "every episode failed at iteration {it}: {}",
                buf.failures.first().map(|f| f.1.as_str()).unwrap_or("")
            )));
        }
        check_behaviour_logp(&actor, &buf)?;
        let ret = buf.mean_return();
        if best.as_ref().is_none_or(|b| ret > b.ret) && ret.is_finite() {
            let snap = Snapshot {
                actor: actor.clone(),
                critic: critic.clone(),
                ret,
                iteration: it,
            };
            if let Some(dir) = &out.dir {
                write_checkpoint(dir, &snap, cfg, false)?;
            }
            best = Some(snap);
        }
        let rewards: Vec<f64> = buf.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = buf.steps.iter().map(|s| s.value).collect();
        let dones: Vec<bool> = buf.steps.iter().map(|s| s.done).collect();
        let (adv, targets) = compute_gae(&rewards, &values, &dones, cfg.gamma, cfg.lambda);
        let stats = update(
            cfg,
            &mut actor,
            &mut critic,
            &mut actor_opt,
            &mut critic_opt,
            &buf,
            &adv,
            &targets,
            it,
        );
        log::debug!("iteration {it}: rollout {roll_ms} ms, update {} ms", t_roll.elapsed().as_millis() - roll_ms);
        let stats = match stats {
            Ok(s) if s.actor_loss.is_finite() && s.critic_loss.is_finite() && params_finite(&actor, &critic) => s,
            other => {
                let why = match other {
                    Err(e) if !e.is_numeric() && !matches!(e, Error::Domain(_)) => return Err(e),
                    Err(e) => e.to_string(),
                    Ok(_) => "non-finite loss or parameters".to_string(),
                };
                if recovered {
                    return Err(Error::TrainingAborted(format!(
                        "numerical failure at iteration {it} after an earlier recovery: {why}"
                    )));
                }
                recovered = true;
                let b = best
                    .as_ref()
                    .ok_or_else(|| Error::TrainingAborted(format!("numerical failure at iteration {it}: {why}")))?;
                log::warn!("numerical failure at iteration {it} ({why}); restoring best parameters, halving learning rates");
                actor = b.actor.clone();
                critic = b.critic.clone();
                actor_lr *= 0.5;
                critic_lr *= 0.5;
                actor_opt = actor_adam(cfg, &actor, actor_lr);
                critic_opt = Adam::new(critic.store(), critic_lr);
                UpdateStats {
                    actor_loss: f64::NAN,
                    critic_loss: f64::NAN,
                    grad_norm: f64::NAN,
                }
            }
        };
        let row = LogRow {
            iteration: it,
            mean_return: ret,
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
            grad_norm: stats.grad_norm,
            wall_ms: start.elapsed().as_millis(),
        };
        log::info!(
            "iteration {it}: mean return {ret:.4}, actor loss {:.4}, critic loss {:.4}",
            row.actor_loss,
            row.critic_loss
        );
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io(path, e))?;
        }
        log.push(row);
        let best_ret = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.ret);
        best_history.push(best_ret);
        let w = cfg.plateau_window;
        if w > 0 && best_history.len() > w {
            let then = best_history[best_history.len() - 1 - w];
            if then.is_finite() && (best_ret - then) < cfg.plateau_tol * then.abs() {
                log::info!("return plateau after {} iterations", it + 1);
                stopped_on_plateau = true;
                break;
            }
        }
    }
    let best = match best {
        Some(b) => b,
        None if cfg.iterations == 0 => Snapshot {
            actor,
            critic,
            ret: f64::NAN,
            iteration: 0,
        },
        None => return Err(Error::TrainingAborted("no iteration produced a finite return".into())),
    };
    if let Some(dir) = &out.dir {
        write_checkpoint(dir, &best, cfg, true)?;
    }
    Ok(TrainReport {
        log,
        best_return: best.ret,
        best_iteration: best.iteration,
        stopped_on_plateau,
        actor: best.actor,
        critic: best.critic,
    })
}
