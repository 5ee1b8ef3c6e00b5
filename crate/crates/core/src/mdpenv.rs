//! Filtering as a Markov decision process: states are analysis ensembles
//! paired with the next observation, actions are forecast ensembles drawn
//! from the surrogate, rewards are log-likelihood increments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{
    effective_sample_size, enkf_analysis_mapped, log_mean_likelihood, pf_resample, pf_weights_mapped, Ensemble,
};
use crate::rng::{derive_seed, derived_rng, streams, SimRng};
use crate::ssm::{GaussianPrior, ObsOperator, SystemSpec, Trajectory};
use crate::surrogate::{Actor, Critic};
use crate::tensor::Tensor;

/// Analysis step used as the environment transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Enkf,
    Pf,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enkf" => Ok(Backend::Enkf),
            "pf" => Ok(Backend::Pf),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// `s_t = (x_t^{1:N}, y_{t+1}[, c_t])`.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpState {
    pub particles: Tensor,
    pub y_next: Option<Vec<f64>>,
    pub obs_idx: Option<Vec<usize>>,
    pub control: Option<Vec<f64>>,
    pub t: usize,
    pub terminal: bool,
}

/// `a_t = x̂_{t+1}^{1:N}`; the observation part of the action is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpAction {
    pub particles: Tensor,
}

/// Environment shared by all episodes: filter backend, ensemble size,
/// initial ensemble law and the known observation model.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterEnv {
    pub backend: Backend,
    pub n_particles: usize,
    pub prior: GaussianPrior,
    pub observation: ObsOperator,
    pub obs_noise: Vec<f64>,
}

impl FilterEnv {
    pub fn for_system(spec: &SystemSpec, backend: Backend, n_particles: usize) -> Self {
        FilterEnv {
            backend,
            n_particles,
            prior: spec.default_prior(),
            observation: spec.observation.clone(),
            obs_noise: spec.obs_noise.clone(),
        }
    }

    fn state_at(&self, particles: Tensor, traj: &Trajectory, t: usize) -> MdpState {
        let terminal = t == traj.len();
        MdpState {
            particles,
            y_next: (!terminal).then(|| traj.y[t].clone()),
            obs_idx: if terminal { None } else { traj.indices(t).map(<[usize]>::to_vec) },
            control: if terminal { None } else { traj.control(t).map(<[f64]>::to_vec) },
            t,
            terminal,
        }
    }

    /// Draws `x_0^{1:N}` from the prior and pairs it with `y_1`.
    pub fn reset(&self, traj: &Trajectory, rng: &mut SimRng) -> Result<MdpState> {
        if traj.is_empty() {
            return Err(Error::Contract("an episode needs at least one observation".into()));
        }
        if self.n_particles == 0 {
            return Err(Error::Config("ensemble size must be positive".into()));
        }
        let ens = Ensemble::from_prior(&self.prior, self.n_particles, rng)?;
        Ok(self.state_at(ens.particles, traj, 0))
    }

    /// Scores the action against `y_{t+1}` and applies the analysis step.
    pub fn step(
        &self,
        state: &MdpState,
        action: &MdpAction,
        traj: &Trajectory,
        rng: &mut SimRng,
    ) -> Result<(MdpState, f64)> {
        let y = match (&state.y_next, state.terminal) {
            (Some(y), false) => y,
            _ => return Err(Error::Contract(format!("step called on terminal state at t = {}", state.t))),
        };
        if action.particles.shape() != state.particles.shape() {
            return Err(Error::Dimension(format!(
                "action {:?} does not match state {:?}",
                action.particles.shape(),
                state.particles.shape()
            )));
        }
        let hx = action
            .particles
            .row_iter()
            .map(|x| self.observation.apply(x, state.obs_idx.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let hx = Tensor::from_rows(&hx)?;
        let t1 = state.t + 1;
        let (next, reward) = match self.backend {
            Backend::Enkf => {
                let reward = log_mean_likelihood(&hx, y, &self.obs_noise)?;
                let forecast = Ensemble::uniform(action.particles.clone(), t1);
                (enkf_analysis_mapped(&forecast, &hx, y, &self.obs_noise, rng)?, reward)
            }
            Backend::Pf => {
                let (w, reward) = pf_weights_mapped(&hx, y, &self.obs_noise)?;
                if effective_sample_size(&w) < w.len() as f64 / 100.0 {
                    log::warn!("particle weights degenerate at t = {t1}");
                }
                (pf_resample(&action.particles, &w, t1, rng)?, reward)
            }
        };
        Ok((self.state_at(next.particles, traj, t1), reward))
    }
}

/// One recorded transition `(s_t, a_t, r_t)` with its behaviour log-density
/// and critic value.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: Tensor,
    /// Encoded `(y_{t+1}[, c_t])` as fed to the critic.
    pub obs: Vec<f64>,
    pub control: Option<Vec<f64>>,
    pub action: Tensor,
    pub reward: f64,
    /// `Σᵢ log p_θ(x̂ᵢ | xᵢ[, c])` under the sampling policy.
    pub logp: f64,
    pub value: f64,
    /// Last step of its episode.
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub trajectory: usize,
    pub start: usize,
    pub len: usize,
    pub total_reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeSummary>,
    /// Episodes that failed, as `(trajectory id, message)`.
    pub failures: Vec<(usize, String)>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return f64::NAN;
        }
        self.episodes.iter().map(|e| e.total_reward).sum::<f64>() / self.episodes.len() as f64
    }
}

/// Runs one episode with the actor as the forecast policy.
pub fn run_episode(
    env: &FilterEnv,
    actor: &Actor,
    critic: Option<&Critic>,
    traj: &Trajectory,
    rng: &mut SimRng,
) -> Result<Vec<StepRecord>> {
    let mut state = env.reset(traj, rng)?;
    let mut records = Vec::with_capacity(traj.len());
    while !state.terminal {
        let control = if actor.spec().control_dim > 0 { state.control.as_deref() } else { None };
        let (particles, lp) = actor.sample(&state.particles, control, rng)?;
        let action = MdpAction { particles };
        let (next, reward) = env.step(&state, &action, traj, rng)?;
        let obs = match critic {
            Some(c) => c.encode_obs(state.y_next.as_deref().unwrap_or(&[]), state.obs_idx.as_deref(), state.control.as_deref())?,
            None => Vec::new(),
        };
        records.push(StepRecord {
            state: state.particles,
            obs,
            control: control.map(<[f64]>::to_vec),
            action: action.particles,
            reward,
            logp: lp.iter().sum(),
            value: 0.0,
            done: next.terminal,
        });
        state = next;
    }
    if let Some(c) = critic {
        let values = critic_values(c, &records)?;
        records.iter_mut().zip(values).for_each(|(r, v)| r.value = v);
    }
    Ok(records)
}

/// Critic values of the states of `records`, in one batched pass.
pub fn critic_values(critic: &Critic, records: &[StepRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let n = records[0].state.rows();
    let m = records[0].state.cols();
    let mut pdata = Vec::with_capacity(records.len() * n * m);
    let mut odata = Vec::with_capacity(records.len() * records[0].obs.len());
    for r in records {
        pdata.extend_from_slice(r.state.data());
        odata.extend_from_slice(&r.obs);
    }
    let mut tape = crate::diffmath::Tape::new();
    let p = tape.input(Tensor::new(vec![records.len() * n, m], pdata)?);
    let o = tape.input(Tensor::new(vec![records.len(), records[0].obs.len()], odata)?);
    let v = critic.value_var(&mut tape, p, n, o)?;
    Ok(tape.value(v).data().to_vec())
}

/// Collects one episode per trajectory. Episode `k` draws from its own
/// stream derived from `(seed, round, k)`, so the buffer does not depend on
/// how episodes are scheduled across threads. A failing episode is logged
/// and reported in `failures`; the others still complete.
pub fn rollout(
    env: &FilterEnv,
    actor: &Actor,
    critic: Option<&Critic>,
    trajectories: &[Trajectory],
    seed: u64,
    round: u64,
) -> RolloutBuffer {
    let base = derive_seed(seed, streams::EPISODE, round);
    let results: Vec<Result<Vec<StepRecord>>> = trajectories
        .par_iter()
        .enumerate()
        .map(|(k, traj)| {
            let mut rng = derived_rng(base, streams::EPISODE, k as u64);
            run_episode(env, actor, critic, traj, &mut rng)
        })
        .collect();
    let mut buf = RolloutBuffer::default();
    for (traj, res) in trajectories.iter().zip(results) {
        match res {
            Ok(records) => {
                buf.episodes.push(EpisodeSummary {
                    trajectory: traj.id,
                    start: buf.steps.len(),
                    len: records.len(),
                    total_reward: records.iter().map(|r| r.reward).sum(),
                });
                buf.steps.extend(records);
            }
            Err(e) => {
                log::warn!("episode on trajectory {} failed: {e}", traj.id);
                buf.failures.push((traj.id, e.to_string()));
            }
        }
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::ssm::generate_dataset;
    use crate::surrogate::{ActorSpec, CriticSpec};

    fn circle() -> (SystemSpec, Actor, Critic) {
        let spec = SystemSpec::circular_motion(ObsOperator::Identity);
        let actor = Actor::new(ActorSpec::for_system(&spec), &mut rng_from_seed(1)).unwrap();
        let critic = Critic::new(CriticSpec::for_system(&spec), &mut rng_from_seed(2)).unwrap();
        (spec, actor, critic)
    }

    fn single_obs(y: Vec<f64>) -> Trajectory {
        Trajectory {
            id: 0,
            y: vec![y],
            x: None,
            c: None,
            obs_idx: None,
        }
    }

    #[test]
    fn reward_at_the_mode() {
        let env = FilterEnv {
            backend: Backend::Enkf,
            n_particles: 1,
            prior: GaussianPrior {
                mean: vec![0.0, 0.0],
                var: vec![0.0, 0.0],
            },
            observation: ObsOperator::Identity,
            obs_noise: vec![1.0, 1.0],
        };
        let traj = single_obs(vec![0.7, -0.3]);
        let mut rng = rng_from_seed(0);
        let s = env.reset(&traj, &mut rng).unwrap();
        let a = MdpAction {
            particles: Tensor::from_rows(&[vec![0.7, -0.3]]).unwrap(),
        };
        // A single particle cannot form an ensemble covariance, so use the PF analysis.
        let env = FilterEnv {
            backend: Backend::Pf,
            ..env
        };
        let (next, r) = env.step(&s, &a, &traj, &mut rng).unwrap();
        assert!((r + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!(next.terminal && next.y_next.is_none());
        assert!(matches!(env.step(&next, &a, &traj, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn degenerate_prior_and_identical_actions() {
        let env = FilterEnv {
            backend: Backend::Enkf,
            n_particles: 6,
            prior: GaussianPrior {
                mean: vec![1.5, -2.0],
                var: vec![0.0, 0.0],
            },
            observation: ObsOperator::Identity,
            obs_noise: vec![0.4, 0.4],
        };
        let traj = single_obs(vec![3.0, 3.0]);
        let mut rng = rng_from_seed(1);
        let s = env.reset(&traj, &mut rng).unwrap();
        assert!(s.particles.row_iter().all(|r| r == [1.5, -2.0]));
        let a = MdpAction {
            particles: Tensor::from_rows(&vec![vec![0.25, 0.5]; 6]).unwrap(),
        };
        let (next, _) = env.step(&s, &a, &traj, &mut rng).unwrap();
        assert_eq!(next.particles, a.particles);
    }

    #[test]
    fn rollout_shapes_and_determinism() {
        let (spec, actor, critic) = circle();
        let ds = generate_dataset(&spec, 3, 7, 1, 1, 11).unwrap();
        let env = FilterEnv::for_system(&spec, Backend::Enkf, 5);
        let a = rollout(&env, &actor, Some(&critic), &ds.train, 4, 0);
        let b = rollout(&env, &actor, Some(&critic), &ds.train, 4, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 21);
        assert_eq!(a.episodes.len(), 3);
        assert_eq!(a.steps.iter().filter(|s| s.done).count(), 3);
        let mut rng = derived_rng(derive_seed(4, streams::EPISODE, 0), streams::EPISODE, 1);
        let serial = run_episode(&env, &actor, Some(&critic), &ds.train[1], &mut rng).unwrap();
        assert_eq!(serial.as_slice(), &a.steps[7..14]);
        for s in &a.steps[7..14] {
            let v = critic.value(&s.state, &s.obs).unwrap();
            assert!((v - s.value).abs() < 1e-12);
        }
        for threads in [1, 3] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let c = pool.install(|| rollout(&env, &actor, Some(&critic), &ds.train, 4, 0));
            assert_eq!(a, c);
        }
    }

    #[test]
    fn single_step_episode() {
        let (spec, actor, critic) = circle();
        let ds = generate_dataset(&spec, 1, 1, 1, 1, 3).unwrap();
        let env = FilterEnv::for_system(&spec, Backend::Pf, 4);
        let buf = rollout(&env, &actor, Some(&critic), &ds.train, 0, 0);
        assert_eq!(buf.len(), 1);
        assert!(buf.steps[0].done);
    }

    #[test]
    fn failing_episode_is_isolated() {
        let (spec, actor, critic) = circle();
        let mut ds = generate_dataset(&spec, 2, 4, 1, 1, 3).unwrap();
        ds.train[0].y[2] = vec![0.0];
        let env = FilterEnv::for_system(&spec, Backend::Enkf, 4);
        let buf = rollout(&env, &actor, Some(&critic), &ds.train, 0, 0);
        assert_eq!(buf.failures.len(), 1);
        assert_eq!(buf.episodes.len(), 1);
        assert_eq!(buf.len(), 4);
    }
}
