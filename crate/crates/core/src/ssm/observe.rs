use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Radius below which the polar observation map is undefined.
const POLAR_MIN_RADIUS: f64 = 1e-12;

/// Observation operators `h`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObsOperator {
    Identity,
    /// `(‖x‖, arcsin(x₁/‖x‖), arccos(x₂/‖x‖))` for 2-D states.
    CirclePolar,
    /// `(x + ½ sin x, y + cos z, y + z)` for Lorenz 63 states.
    Lorenz63Nonlinear,
    /// `n` components chosen uniformly without replacement at every step.
    Subsample { n: usize },
    /// Elementwise `arctan`.
    Arctan,
}

impl ObsOperator {
    pub fn output_dim(&self, state_dim: usize) -> usize {
        match self {
            ObsOperator::Identity | ObsOperator::Arctan => state_dim,
            ObsOperator::CirclePolar | ObsOperator::Lorenz63Nonlinear => 3,
            ObsOperator::Subsample { n } => *n,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        match self {
            ObsOperator::CirclePolar if state_dim != 2 => {
                Err(Error::Config("circle_polar observes 2-D states only".into()))
            }
            ObsOperator::Lorenz63Nonlinear if state_dim != 3 => {
                Err(Error::Config("lorenz63_nonlinear observes 3-D states only".into()))
            }
            ObsOperator::Subsample { n } if *n == 0 || *n > state_dim => Err(Error::Config(format!(
                "subsample n = {n} must lie in 1..={state_dim}"
            ))),
            _ => Ok(()),
        }
    }

    /// True when the operator draws fresh indices at every step.
    pub fn is_time_varying(&self) -> bool {
        matches!(self, ObsOperator::Subsample { .. })
    }

    /// Draws the observed indices for one step (sorted ascending).
    pub fn sample_indices<R: Rng + ?Sized>(&self, state_dim: usize, rng: &mut R) -> Option<Vec<usize>> {
        match self {
            ObsOperator::Subsample { n } => {
                let mut idx = rand::seq::index::sample(rng, state_dim, *n).into_vec();
                idx.sort_unstable();
                Some(idx)
            }
            _ => None,
        }
    }

    /// Noise-free `h(x)`; `idx` carries the recorded indices of a subsample step.
    pub fn apply(&self, x: &[f64], idx: Option<&[usize]>) -> Result<Vec<f64>> {
        match self {
            ObsOperator::Identity => Ok(x.to_vec()),
            ObsOperator::Arctan => Ok(x.iter().map(|v| v.atan()).collect()),
            ObsOperator::CirclePolar => {
                let r = x[0].hypot(x[1]);
                if r < POLAR_MIN_RADIUS {
                    return Err(Error::Domain(format!("circle_polar undefined at radius {r:e}")));
                }
                Ok(vec![r, (x[0] / r).clamp(-1.0, 1.0).asin(), (x[1] / r).clamp(-1.0, 1.0).acos()])
            }
            ObsOperator::Lorenz63Nonlinear => Ok(vec![x[0] + 0.5 * x[0].sin(), x[1] + x[2].cos(), x[1] + x[2]]),
            ObsOperator::Subsample { n } => {
                let idx = idx.ok_or_else(|| Error::Contract("subsample observation needs indices".into()))?;
                if idx.len() != *n {
                    return Err(Error::Dimension(format!("{} indices for subsample n = {n}", idx.len())));
                }
                idx.iter()
                    .map(|&i| {
                        x.get(i)
                            .copied()
                            .ok_or_else(|| Error::Dimension(format!("index {i} outside state of length {}", x.len())))
                    })
                    .collect()
            }
        }
    }

    /// `h(x) + η`, `η ~ N(0, diag(noise))`, returning the indices used.
    pub fn observe<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        noise: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, Option<Vec<usize>>)> {
        let idx = self.sample_indices(x.len(), rng);
        let mut y = self.apply(x, idx.as_deref())?;
        for (v, r) in y.iter_mut().zip(noise) {
            if *r > 0.0 {
                *v += r.sqrt() * standard_normal(rng);
            }
        }
        Ok((y, idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_and_polar() {
        let mut rng = rng_from_seed(0);
        let (y, idx) = ObsOperator::Identity.observe(&[1.0, 2.0], &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
        assert!(idx.is_none());
        let y = ObsOperator::CirclePolar.apply(&[1.0, 0.0], None).unwrap();
        assert_eq!(y[0], 1.0);
        assert!((y[1] - FRAC_PI_2).abs() < 1e-15 && (y[2] - FRAC_PI_2).abs() < 1e-15);
        assert!(matches!(ObsOperator::CirclePolar.apply(&[0.0, 0.0], None), Err(Error::Domain(_))));
    }

    #[test]
    fn full_subsample_is_identity() {
        let mut rng = rng_from_seed(5);
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 1.5).collect();
        let op = ObsOperator::Subsample { n: 10 };
        let (y, idx) = op.observe(&x, &[0.0; 10], &mut rng).unwrap();
        assert_eq!(idx.unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(y, x);
    }

    #[test]
    fn subsample_draws_distinct_indices_and_is_repeatable() {
        let mut rng = rng_from_seed(9);
        let op = ObsOperator::Subsample { n: 20 };
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        for _ in 0..50 {
            let idx = op.sample_indices(40, &mut rng).unwrap();
            let mut d = idx.clone();
            d.dedup();
            assert_eq!(d.len(), 20);
            let a = op.apply(&x, Some(&idx)).unwrap();
            let b = op.apply(&x, Some(&idx)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, idx.iter().map(|&i| i as f64).collect::<Vec<_>>());
        }
        assert!(matches!(op.validate(10), Err(Error::Config(_))));
    }
}
