//! Ensemble Kalman filter, bootstrap particle filter, and the exact Kalman
//! filter used as an oracle on linear-Gaussian models.

mod enkf;
mod kalman;
mod pf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, streams, SimRng};
use crate::ssm::{GaussianPrior, ObsOperator, SystemSpec, Trajectory};
use crate::tensor::Tensor;

pub use enkf::{enkf_analysis, enkf_analysis_mapped, enkf_forecast, enkf_loglik_increment, log_mean_likelihood};
pub use kalman::{kf_predict, kf_update, KalmanBelief, LinearGaussian};
pub use pf::{effective_sample_size, pf_forecast, pf_resample, pf_weights, pf_weights_mapped, systematic_indices};

/// Weighted particle approximation of a forecast or filtering distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    /// `[N, m]`
    pub particles: Tensor,
    /// Normalised weights, uniform outside the particle filter's analysis.
    pub weights: Vec<f64>,
    pub t: usize,
}

impl Ensemble {
    pub fn uniform(particles: Tensor, t: usize) -> Self {
        let n = particles.rows();
        Ensemble {
            particles,
            weights: vec![1.0 / n as f64; n],
            t,
        }
    }

    pub fn from_prior(prior: &GaussianPrior, n: usize, rng: &mut SimRng) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| prior.sample(rng)).collect();
        Ok(Ensemble::uniform(Tensor::from_rows(&rows)?, 0))
    }

    pub fn size(&self) -> usize {
        self.particles.rows()
    }

    pub fn dim(&self) -> usize {
        self.particles.cols()
    }

    /// Weighted mean of the particles.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (row, w) in self.particles.row_iter().zip(&self.weights) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += w * v);
        }
        out
    }

    /// Weighted per-component standard deviation (with the `N/(N−1)`
    /// correction for uniform weights).
    pub fn std(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.size() as f64;
        let mut out = vec![0.0; self.dim()];
        for (row, w) in self.particles.row_iter().zip(&self.weights) {
            for ((o, v), m) in out.iter_mut().zip(row).zip(&mean) {
                *o += w * (v - m) * (v - m);
            }
        }
        let corr = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        out.iter().map(|v| (v * corr).sqrt()).collect()
    }
}

/// A stochastic state transition acting on a whole ensemble.
pub trait Transition: Sync {
    fn state_dim(&self) -> usize;

    /// Maps `[N, m]` particles to `[N, m]` forecasts using `control` (when
    /// the model is controlled) and fresh noise from `rng`.
    fn propagate(&self, particles: &Tensor, control: Option<&[f64]>, rng: &mut SimRng) -> Result<Tensor>;
}

impl Transition for SystemSpec {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn propagate(&self, particles: &Tensor, control: Option<&[f64]>, rng: &mut SimRng) -> Result<Tensor> {
        let rows = particles
            .row_iter()
            .map(|x| self.transition(x, control, rng))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Known observation model: operator `h` plus diagonal noise `R`.
#[derive(Clone, Copy, Debug)]
pub struct ObsModel<'a> {
    pub operator: &'a ObsOperator,
    pub noise: &'a [f64],
}

impl<'a> ObsModel<'a> {
    pub fn of(spec: &'a SystemSpec) -> Self {
        ObsModel {
            operator: &spec.observation,
            noise: &spec.obs_noise,
        }
    }

    /// `h(x)` for every particle: `[N, n]`.
    pub fn map_particles(&self, particles: &Tensor, idx: Option<&[usize]>) -> Result<Tensor> {
        let rows = particles
            .row_iter()
            .map(|x| self.operator.apply(x, idx))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    Enkf,
    Pf,
    Kf,
}

impl std::str::FromStr for FilterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enkf" => Ok(FilterMethod::Enkf),
            "pf" => Ok(FilterMethod::Pf),
            "kf" => Ok(FilterMethod::Kf),
            other => Err(Error::Config(format!("unknown filter method {other:?}"))),
        }
    }
}

/// Everything a filter needs to know about the model.
pub struct FilterModel<'a> {
    pub transition: &'a dyn Transition,
    pub observation: ObsModel<'a>,
    pub prior: &'a GaussianPrior,
    /// Required by [`FilterMethod::Kf`] only.
    pub linear: Option<&'a LinearGaussian>,
}

/// Posterior summary after assimilating `y_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPosterior {
    pub t: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub loglik_inc: f64,
    #[serde(skip)]
    pub particles: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct FilterRun {
    pub steps: Vec<StepPosterior>,
    pub loglik: f64,
    /// Final filtering ensemble (absent for the Kalman filter).
    pub last: Option<Ensemble>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FilterOptions {
    /// Keep every posterior ensemble in the returned steps.
    pub keep_ensembles: bool,
}

/// Runs a filter over a whole observation sequence; particle methods draw
/// from a stream derived from `seed`, so repeated calls are bit-identical.
pub fn run_filter(
    method: FilterMethod,
    model: &FilterModel,
    traj: &Trajectory,
    n_particles: usize,
    seed: u64,
) -> Result<FilterRun> {
    run_filter_with(method, model, traj, n_particles, seed, FilterOptions::default())
}

pub fn run_filter_with(
    method: FilterMethod,
    model: &FilterModel,
    traj: &Trajectory,
    n_particles: usize,
    seed: u64,
    opts: FilterOptions,
) -> Result<FilterRun> {
    traj.validate()?;
    if method == FilterMethod::Kf {
        return run_kalman(model, traj);
    }
    if n_particles == 0 {
        return Err(Error::Config("ensemble size must be positive".into()));
    }
    let mut rng = derived_rng(seed, streams::FILTER, 0);
    let mut ens = Ensemble::from_prior(model.prior, n_particles, &mut rng)?;
    let mut steps = Vec::with_capacity(traj.len());
    let mut loglik = 0.0;
    for t in 0..traj.len() {
        let forecast = enkf_forecast(&ens, model.transition, traj.control(t), &mut rng)?;
        let idx = traj.indices(t);
        let hx = model.observation.map_particles(&forecast.particles, idx)?;
        let y = &traj.y[t];
        let (next, inc) = match method {
            FilterMethod::Enkf => {
                let inc = log_mean_likelihood(&hx, y, model.observation.noise)?;
                (enkf_analysis_mapped(&forecast, &hx, y, model.observation.noise, &mut rng)?, inc)
            }
            FilterMethod::Pf => {
                let (w, inc) = pf_weights_mapped(&hx, y, model.observation.noise)?;
                let ess = effective_sample_size(&w);
                if ess < n_particles as f64 / 100.0 {
                    log::warn!("particle filter degenerate at t = {}: ESS {ess:.2}", t + 1);
                }
                (pf_resample(&forecast.particles, &w, t + 1, &mut rng)?, inc)
            }
            FilterMethod::Kf => unreachable!(),
        };
        loglik += inc;
        steps.push(StepPosterior {
            t: t + 1,
            mean: next.mean(),
            std: next.std(),
            loglik_inc: inc,
            particles: opts.keep_ensembles.then(|| next.particles.clone()),
        });
        ens = next;
    }
    Ok(FilterRun {
        steps,
        loglik,
        last: Some(ens),
    })
}

fn run_kalman(model: &FilterModel, traj: &Trajectory) -> Result<FilterRun> {
    let lin = model
        .linear
        .ok_or_else(|| Error::Config("the Kalman filter needs a linear-Gaussian model".into()))?;
    let mut belief = KalmanBelief::from_prior(model.prior);
    let mut steps = Vec::with_capacity(traj.len());
    let mut loglik = 0.0;
    for (t, y) in traj.y.iter().enumerate() {
        let prior = kf_predict(&belief, &lin.a, &lin.q);
        let (post, inc) = kf_update(&prior, y, &lin.h, &lin.r)?;
        loglik += inc;
        steps.push(StepPosterior {
            t: t + 1,
            mean: post.mean.iter().copied().collect(),
            std: post.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
            loglik_inc: inc,
            particles: None,
        });
        belief = post;
    }
    Ok(FilterRun {
        steps,
        loglik,
        last: None,
    })
}
