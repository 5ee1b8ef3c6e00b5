use rand::Rng;

use super::enkf::{log_sum_exp, particle_logliks};
use super::{enkf_forecast, Ensemble, ObsModel, Transition};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::Tensor;

/// Bootstrap proposal: identical to the EnKF forecast.
pub fn pf_forecast(
    ens: &Ensemble,
    model: &dyn Transition,
    control: Option<&[f64]>,
    rng: &mut SimRng,
) -> Result<Ensemble> {
    enkf_forecast(ens, model, control, rng)
}

/// Normalised importance weights and the log-likelihood increment
/// `log (1/N) Σᵢ N(y; h(x̂ᵢ), R)`.
pub fn pf_weights(forecast: &Ensemble, y: &[f64], obs: ObsModel, idx: Option<&[usize]>) -> Result<(Vec<f64>, f64)> {
    let hx = obs.map_particles(&forecast.particles, idx)?;
    pf_weights_mapped(&hx, y, obs.noise)
}

pub fn pf_weights_mapped(hx: &Tensor, y: &[f64], r: &[f64]) -> Result<(Vec<f64>, f64)> {
    let l = particle_logliks(hx, y, r)?;
    let (lse, w) = log_sum_exp(&l);
    let inc = lse - (l.len() as f64).ln();
    if !inc.is_finite() {
        return Err(Error::Numeric(format!("all particle weights vanished (increment {inc})")));
    }
    Ok((w, inc))
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling indices for offset `u ∈ [0, 1)`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let pos = (u + i as f64) / n as f64;
        while pos > cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// Systematic resampling to `N` equally weighted particles.
pub fn pf_resample(particles: &Tensor, weights: &[f64], t: usize, rng: &mut SimRng) -> Result<Ensemble> {
    let n = particles.rows();
    if weights.len() != n || n == 0 {
        return Err(Error::Dimension(format!("{} weights for {n} particles", weights.len())));
    }
    let idx = systematic_indices(weights, rng.gen::<f64>());
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| particles.row(i).to_vec()).collect();
    Ok(Ensemble::uniform(Tensor::from_rows(&rows)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn systematic_counts_are_floor_or_ceil(raw in proptest::collection::vec(0.0f64..1.0, 1..40), u in 0.0f64..1.0) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9 * raw.len() as f64;
            let w: Vec<f64> = raw.iter().map(|v| (v + 1e-9) / s).collect();
            let n = w.len();
            let idx = systematic_indices(&w, u);
            prop_assert_eq!(idx.len(), n);
            prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
            for (i, wi) in w.iter().enumerate() {
                let c = idx.iter().filter(|&&j| j == i).count() as f64;
                let e = n as f64 * wi;
                prop_assert!(c >= e.floor() - 1.0 + 1e-9 - 1e-6 && c <= e.ceil() + 1e-6, "count {} expected {}", c, e);
                prop_assert!((c - e).abs() < 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn uniform_weights_keep_every_particle() {
        let w = vec![0.25; 4];
        assert_eq!(systematic_indices(&w, 0.5), vec![0, 1, 2, 3]);
        assert!((effective_sample_size(&w) - 4.0).abs() < 1e-12);
    }
}
