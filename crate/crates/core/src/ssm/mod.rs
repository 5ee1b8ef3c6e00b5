//! Ground-truth benchmark systems, observation operators and datasets.
//!
//! The true dynamics are only used to generate data and to score results;
//! nothing in the learning path reads them.

pub mod dataset;
pub mod dynamics;
mod observe;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;

pub use dataset::{generate_dataset, snr_to_sigma, Dataset, DatasetHeader, Trajectory};
pub use observe::ObsOperator;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dynamics {
    CircularMotion { angle: f64 },
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Lorenz96 { forcing: f64 },
    AllenCahn { epsilon: f64, mu: f64 },
    AllenCahnControl { epsilon: f64, mu: f64, amplitude: [f64; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Exact,
    Euler,
    Rk4,
    SemiImplicit,
}

/// Diagonal Gaussian `N(mean, diag(var))`, used for initial filter ensembles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianPrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m + v.sqrt() * standard_normal(rng))
            .collect()
    }
}

/// A benchmark system: true transition, observation operator, noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub dynamics: Dynamics,
    pub state_dim: usize,
    pub dt: f64,
    pub scheme: Scheme,
    /// Diagonal of the true process-noise covariance.
    pub process_noise: Vec<f64>,
    pub observation: ObsOperator,
    /// Diagonal of the observation-noise covariance `R`.
    pub obs_noise: Vec<f64>,
    /// Burn-in steps applied to initial conditions before recording.
    #[serde(default)]
    pub burn_in: usize,
}

const BURN_IN: usize = 500;

impl SystemSpec {
    /// Uniform circular motion: rotation by π/4, `Q = 0.01 I₂`, `R = 0.4 I`.
    pub fn circular_motion(observation: ObsOperator) -> Self {
        let n = observation.output_dim(2);
        SystemSpec {
            dynamics: Dynamics::CircularMotion { angle: PI / 4.0 },
            state_dim: 2,
            dt: 1.0,
            scheme: Scheme::Exact,
            process_noise: vec![0.01; 2],
            observation,
            obs_noise: vec![0.4; n],
            burn_in: 0,
        }
    }

    /// Lorenz 63 with Euler steps of 0.02. Observation noise defaults to unit
    /// variance; see [`SystemSpec::with_snr`].
    pub fn lorenz63(observation: ObsOperator) -> Self {
        let n = observation.output_dim(3);
        SystemSpec {
            dynamics: Dynamics::Lorenz63 {
                sigma: 10.0,
                rho: 28.0,
                beta: 8.0 / 3.0,
            },
            state_dim: 3,
            dt: 0.02,
            scheme: Scheme::Euler,
            process_noise: vec![0.0; 3],
            observation,
            obs_noise: vec![1.0; n],
            burn_in: BURN_IN,
        }
    }

    /// 40-dimensional Lorenz 96, RK4 with step 0.05, `R = 2 I`.
    pub fn lorenz96(observation: ObsOperator) -> Self {
        let n = observation.output_dim(40);
        SystemSpec {
            dynamics: Dynamics::Lorenz96 { forcing: 8.0 },
            state_dim: 40,
            dt: 0.05,
            scheme: Scheme::Rk4,
            process_noise: vec![0.0; 40],
            observation,
            obs_noise: vec![2.0; n],
            burn_in: BURN_IN,
        }
    }

    /// Allen–Cahn on 40 points over `t ∈ [0, 2]` in 200 steps, arctan
    /// observations with `σ_y = 0.1`.
    pub fn allen_cahn() -> Self {
        SystemSpec {
            dynamics: Dynamics::AllenCahn { epsilon: 0.001, mu: 3.0 },
            state_dim: 40,
            dt: 0.01,
            scheme: Scheme::SemiImplicit,
            process_noise: vec![0.0; 40],
            observation: ObsOperator::Arctan,
            obs_noise: vec![0.01; 40],
            burn_in: 0,
        }
    }

    /// Allen–Cahn driven by `a(x,t) = U_c sin(πx) cos(πt)`, `U_c ~ U(0.4, 0.6)`.
    pub fn allen_cahn_control() -> Self {
        SystemSpec {
            dynamics: Dynamics::AllenCahnControl {
                epsilon: 0.001,
                mu: 3.0,
                amplitude: [0.4, 0.6],
            },
            ..Self::allen_cahn()
        }
    }

    pub fn name(&self) -> &'static str {
        match self.dynamics {
            Dynamics::CircularMotion { .. } => "circular_motion",
            Dynamics::Lorenz63 { .. } => "lorenz63",
            Dynamics::Lorenz96 { .. } => "lorenz96",
            Dynamics::AllenCahn { .. } => "allen_cahn",
            Dynamics::AllenCahnControl { .. } => "allen_cahn_control",
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.output_dim(self.state_dim)
    }

    /// Dimension of the control input `c_t` (0 when uncontrolled).
    pub fn control_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::AllenCahnControl { .. } => self.state_dim,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.state_dim;
        if m == 0 {
            return Err(Error::Config("state_dim must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.process_noise.len() != m {
            return Err(Error::Config(format!(
                "process_noise has {} entries for state_dim {m}",
                self.process_noise.len()
            )));
        }
        self.observation.validate(m)?;
        if self.obs_noise.len() != self.obs_dim() {
            return Err(Error::Config(format!(
                "obs_noise has {} entries for obs_dim {}",
                self.obs_noise.len(),
                self.obs_dim()
            )));
        }
        let bad = |v: &f64| !(v.is_finite() && *v >= 0.0);
        if self.process_noise.iter().any(bad) || self.obs_noise.iter().any(bad) {
            return Err(Error::Config("noise variances must be finite and non-negative".into()));
        }
        let ok = match (&self.dynamics, self.scheme) {
            (Dynamics::CircularMotion { .. }, Scheme::Exact) => m == 2,
            (Dynamics::Lorenz63 { .. }, Scheme::Euler | Scheme::Rk4) => m == 3,
            (Dynamics::Lorenz96 { .. }, Scheme::Euler | Scheme::Rk4) => m >= 4,
            (Dynamics::AllenCahn { .. } | Dynamics::AllenCahnControl { .. }, Scheme::SemiImplicit) => m >= 3,
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{} does not support scheme {:?} with state_dim {m}",
                self.name(),
                self.scheme
            )));
        }
        if let Dynamics::AllenCahnControl { amplitude, .. } = self.dynamics {
            if !(amplitude[0] <= amplitude[1]) {
                return Err(Error::Config("control amplitude range is empty".into()));
            }
        }
        Ok(())
    }

    /// Noise-free one-step map of the true model.
    pub fn step(&self, x: &[f64], control: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(match (&self.dynamics, self.scheme) {
            (Dynamics::CircularMotion { angle }, _) => dynamics::rotate(x, *angle).to_vec(),
            (Dynamics::Lorenz63 { sigma, rho, beta }, Scheme::Rk4) => {
                dynamics::lorenz63_rk4(x, *sigma, *rho, *beta, self.dt)
            }
            (Dynamics::Lorenz63 { sigma, rho, beta }, _) => dynamics::lorenz63_euler(x, *sigma, *rho, *beta, self.dt),
            (Dynamics::Lorenz96 { forcing }, Scheme::Euler) => dynamics::lorenz96_euler(x, *forcing, self.dt),
            (Dynamics::Lorenz96 { forcing }, _) => dynamics::lorenz96_rk4(x, *forcing, self.dt),
            (Dynamics::AllenCahn { epsilon, mu }, _) => dynamics::allen_cahn_step(x, None, *epsilon, *mu, self.dt)?,
            (Dynamics::AllenCahnControl { epsilon, mu, .. }, _) => {
                dynamics::allen_cahn_step(x, control, *epsilon, *mu, self.dt)?
            }
        })
    }

    /// One step of the true stochastic model: `step(x) + ξ`, `ξ ~ N(0, Q)`.
    pub fn transition<R: Rng + ?Sized>(&self, x: &[f64], control: Option<&[f64]>, rng: &mut R) -> Result<Vec<f64>> {
        let mut next = self.step(x, control)?;
        for (v, q) in next.iter_mut().zip(&self.process_noise) {
            if *q > 0.0 {
                *v += q.sqrt() * standard_normal(rng);
            }
        }
        Ok(next)
    }

    /// Draws an initial state (after burn-in) and, for controlled systems,
    /// the trajectory's control amplitude.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<f64>, Option<f64>)> {
        let m = self.state_dim;
        let mut x: Vec<f64> = match &self.dynamics {
            Dynamics::CircularMotion { .. } => vec![1.0 + 0.5 * standard_normal(rng), 0.5 * standard_normal(rng)],
            Dynamics::Lorenz63 { .. } => (0..3).map(|_| 1.0 + standard_normal(rng)).collect(),
            Dynamics::Lorenz96 { forcing } => (0..m).map(|_| forcing + standard_normal(rng)).collect(),
            Dynamics::AllenCahn { .. } | Dynamics::AllenCahnControl { .. } => {
                let amp: f64 = rng.gen_range(0.8..1.2);
                dynamics::allen_cahn_grid(m)
                    .iter()
                    .map(|&g| amp * g * g * (PI * g).cos())
                    .collect()
            }
        };
        let control_amp = match self.dynamics {
            Dynamics::AllenCahnControl { amplitude, .. } => Some(rng.gen_range(amplitude[0]..amplitude[1])),
            _ => None,
        };
        for _ in 0..self.burn_in {
            x = self.transition(&x, None, rng)?;
        }
        Ok((x, control_amp))
    }

    /// Control input `c_t` at step index `t` for a trajectory with amplitude `amp`.
    pub fn control_at(&self, amp: Option<f64>, t: usize) -> Option<Vec<f64>> {
        match (&self.dynamics, amp) {
            (Dynamics::AllenCahnControl { .. }, Some(a)) => Some(dynamics::allen_cahn_control(
                &dynamics::allen_cahn_grid(self.state_dim),
                a,
                t as f64 * self.dt,
            )),
            _ => None,
        }
    }

    /// Default initial filter ensemble law (the truth's initial law, or its
    /// climatology for systems that start after burn-in).
    pub fn default_prior(&self) -> GaussianPrior {
        let m = self.state_dim;
        match &self.dynamics {
            Dynamics::CircularMotion { .. } => GaussianPrior {
                mean: vec![1.0, 0.0],
                var: vec![0.25, 0.25],
            },
            Dynamics::Lorenz63 { .. } => GaussianPrior {
                mean: vec![0.0, 0.0, 25.8],
                var: vec![72.0, 93.0, 69.0],
            },
            Dynamics::Lorenz96 { .. } => GaussianPrior {
                mean: vec![2.34; m],
                var: vec![13.2; m],
            },
            Dynamics::AllenCahn { .. } | Dynamics::AllenCahnControl { .. } => {
                let base: Vec<f64> = dynamics::allen_cahn_grid(m)
                    .iter()
                    .map(|&g| g * g * (PI * g).cos())
                    .collect();
                GaussianPrior {
                    var: base.iter().map(|b| 0.0133 * b * b + 1e-4).collect(),
                    mean: base,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn presets_validate() {
        for spec in [
            SystemSpec::circular_motion(ObsOperator::Identity),
            SystemSpec::circular_motion(ObsOperator::CirclePolar),
            SystemSpec::lorenz63(ObsOperator::Lorenz63Nonlinear),
            SystemSpec::lorenz96(ObsOperator::Subsample { n: 20 }),
            SystemSpec::allen_cahn(),
            SystemSpec::allen_cahn_control(),
        ] {
            spec.validate().unwrap();
            let json = serde_json::to_string(&spec).unwrap();
            let back: SystemSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn rejects_inconsistent_specs() {
        let mut s = SystemSpec::circular_motion(ObsOperator::Identity);
        s.obs_noise = vec![0.4; 3];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = SystemSpec::lorenz96(ObsOperator::Identity);
        s.observation = ObsOperator::Subsample { n: 41 };
        s.obs_noise = vec![2.0; 41];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = SystemSpec::lorenz63(ObsOperator::Identity);
        s.scheme = Scheme::SemiImplicit;
        assert!(s.validate().is_err());
        assert!(serde_json::from_str::<SystemSpec>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn circular_motion_noise_variance() {
        let spec = SystemSpec::circular_motion(ObsOperator::Identity);
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let x = [0.4, -0.9];
        let mean = dynamics::rotate(&x, PI / 4.0);
        let mut ss = [0.0; 2];
        for _ in 0..n {
            let y = spec.transition(&x, None, &mut rng).unwrap();
            for j in 0..2 {
                ss[j] += (y[j] - mean[j]).powi(2);
            }
        }
        // Var of the sample variance of a Gaussian: 2σ⁴/n.
        let mc_sigma = (2.0 * 0.01f64.powi(2) / n as f64).sqrt();
        for s in ss {
            let var = s / n as f64;
            assert!((var - 0.01).abs() < 3.0 * mc_sigma, "var {var}");
        }
    }

    #[test]
    fn noise_free_circle_keeps_radius() {
        let mut spec = SystemSpec::circular_motion(ObsOperator::Identity);
        spec.process_noise = vec![0.0; 2];
        let mut rng = rng_from_seed(3);
        let mut x = vec![0.8, 0.6];
        for _ in 0..200 {
            x = spec.transition(&x, None, &mut rng).unwrap();
            assert!((x[0].hypot(x[1]) - 1.0).abs() < 1e-12);
        }
    }
}
