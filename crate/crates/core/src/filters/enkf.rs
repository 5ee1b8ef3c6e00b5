use nalgebra::{DMatrix, DVector};

use super::{Ensemble, ObsModel, Transition};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, SimRng};
use crate::tensor::Tensor;

/// Pushes every particle through `model`; the result has uniform weights
/// and time index `t + 1`.
pub fn enkf_forecast(
    ens: &Ensemble,
    model: &dyn Transition,
    control: Option<&[f64]>,
    rng: &mut SimRng,
) -> Result<Ensemble> {
    let next = model.propagate(&ens.particles, control, rng)?;
    if next.shape() != ens.particles.shape() {
        return Err(Error::Dimension(format!(
            "transition returned {:?} for particles {:?}",
            next.shape(),
            ens.particles.shape()
        )));
    }
    if let Some(i) = next.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("forecast particle {i} is not finite at t = {}", ens.t + 1)));
    }
    Ok(Ensemble::uniform(next, ens.t + 1))
}

/// Per-particle `log N(y; h(x̂ᵢ), R)` for precomputed `hx = h(x̂)`.
pub(crate) fn particle_logliks(hx: &Tensor, y: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    if hx.cols() != y.len() || r.len() != y.len() {
        return Err(Error::Dimension(format!(
            "observation of length {} against h(x) width {} and R of length {}",
            y.len(),
            hx.cols(),
            r.len()
        )));
    }
    if r.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("observation noise variances must be positive".into()));
    }
    let log_norm: f64 = -0.5 * r.iter().map(|v| (2.0 * std::f64::consts::PI * v).ln()).sum::<f64>();
    Ok(hx
        .row_iter()
        .map(|row| {
            let q: f64 = row.iter().zip(y).zip(r).map(|((h, yv), rv)| (yv - h) * (yv - h) / rv).sum();
            log_norm - 0.5 * q
        })
        .collect())
}

/// `log Σᵢ exp(lᵢ)` and the normalised weights `exp(lᵢ − lse)`.
pub(crate) fn log_sum_exp(l: &[f64]) -> (f64, Vec<f64>) {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (max, vec![f64::NAN; l.len()]);
    }
    let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    (max + s.ln(), e.into_iter().map(|v| v / s).collect())
}

/// `log (1/N) Σᵢ N(y; h(x̂ᵢ), R)` for precomputed `hx`.
pub fn log_mean_likelihood(hx: &Tensor, y: &[f64], r: &[f64]) -> Result<f64> {
    let l = particle_logliks(hx, y, r)?;
    let (lse, _) = log_sum_exp(&l);
    let inc = lse - (l.len() as f64).ln();
    if inc.is_nan() {
        return Err(Error::Numeric("log-likelihood increment is NaN".into()));
    }
    Ok(inc)
}

/// Ensemble estimate of `log p(y_t | y_{1:t−1})` from the forecast ensemble.
pub fn enkf_loglik_increment(
    forecast: &Ensemble,
    y: &[f64],
    obs: ObsModel,
    idx: Option<&[usize]>,
) -> Result<f64> {
    let hx = obs.map_particles(&forecast.particles, idx)?;
    log_mean_likelihood(&hx, y, obs.noise)
}

/// Stochastic EnKF analysis with perturbed observations.
pub fn enkf_analysis(
    forecast: &Ensemble,
    y: &[f64],
    obs: ObsModel,
    idx: Option<&[usize]>,
    rng: &mut SimRng,
) -> Result<Ensemble> {
    let hx = obs.map_particles(&forecast.particles, idx)?;
    enkf_analysis_mapped(forecast, &hx, y, obs.noise, rng)
}

/// Column means computed relative to the first row, so identical rows give
/// exactly zero anomalies.
fn anomalies(t: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (t.rows(), t.cols());
    let base = t.row(0).to_vec();
    let mut shift = vec![0.0; d];
    for row in t.row_iter() {
        for ((s, v), b) in shift.iter_mut().zip(row).zip(&base) {
            *s += v - b;
        }
    }
    shift.iter_mut().for_each(|s| *s /= n as f64);
    let mean: Vec<f64> = base.iter().zip(&shift).map(|(b, s)| b + s).collect();
    let a = DMatrix::from_fn(n, d, |i, j| (t.row(i)[j] - base[j]) - shift[j]);
    (mean, a)
}

/// EnKF analysis given the mapped forecast `hx = h(x̂)`.
pub fn enkf_analysis_mapped(
    forecast: &Ensemble,
    hx: &Tensor,
    y: &[f64],
    r: &[f64],
    rng: &mut SimRng,
) -> Result<Ensemble> {
    let n = forecast.size();
    let dy = y.len();
    if hx.rows() != n || hx.cols() != dy || r.len() != dy {
        return Err(Error::Dimension(format!(
            "h(x) is {:?}, observation {dy}, R {} for {n} particles",
            hx.shape(),
            r.len()
        )));
    }
    if n < 2 {
        return Err(Error::Config("EnKF analysis needs at least two particles".into()));
    }
    if r.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("observation noise variances must be positive".into()));
    }
    let (_, xa) = anomalies(&forecast.particles);
    let (_, ya) = anomalies(hx);
    let denom = (n - 1) as f64;
    let cxy = xa.transpose() * &ya / denom;
    let mut cyy = ya.transpose() * &ya / denom;
    for (j, rv) in r.iter().enumerate() {
        cyy[(j, j)] += rv;
    }
    let chol = cyy
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("innovation covariance not positive definite at t = {}", forecast.t)))?;
    // K = C_xy C_yy⁻¹, obtained as (C_yy⁻¹ C_xyᵀ)ᵀ.
    let gain = chol.solve(&cxy.transpose()).transpose();
    let sd: Vec<f64> = r.iter().map(|v| v.sqrt()).collect();
    let mut out = forecast.particles.clone();
    let mut innov = DVector::zeros(dy);
    for i in 0..n {
        let h = hx.row(i);
        for j in 0..dy {
            innov[j] = y[j] + sd[j] * standard_normal(rng) - h[j];
        }
        let delta = &gain * &innov;
        for (v, d) in out.row_mut(i).iter_mut().zip(delta.iter()) {
            *v += d;
        }
    }
    if let Some(i) = out.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("analysis particle {i} is not finite at t = {}", forecast.t)));
    }
    Ok(Ensemble::uniform(out, forecast.t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::ssm::ObsOperator;

    #[test]
    fn identical_particles_are_left_alone() {
        let p = Tensor::from_rows(&vec![vec![0.3, -1.1]; 8]).unwrap();
        let ens = Ensemble::uniform(p.clone(), 1);
        let mut rng = rng_from_seed(2);
        let obs = ObsModel {
            operator: &ObsOperator::Identity,
            noise: &[0.5, 0.5],
        };
        let out = enkf_analysis(&ens, &[4.0, 4.0], obs, None, &mut rng).unwrap();
        assert_eq!(out.particles, p);
    }

    #[test]
    fn log_mean_likelihood_single_particle() {
        let hx = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let v = log_mean_likelihood(&hx, &[1.5, 1.0], &[0.5, 2.0]).unwrap();
        let expect = -0.5 * ((2.0 * std::f64::consts::PI * 0.5f64).ln() + 0.25 / 0.5)
            - 0.5 * ((2.0 * std::f64::consts::PI * 2.0f64).ln() + 1.0 / 2.0);
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_tiny_likelihoods() {
        let (lse, w) = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((lse - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn analysis_moves_mean_towards_observation() {
        let mut rng = rng_from_seed(7);
        let rows: Vec<Vec<f64>> = (0..2000).map(|_| vec![standard_normal(&mut rng)]).collect();
        let ens = Ensemble::uniform(Tensor::from_rows(&rows).unwrap(), 1);
        let obs = ObsModel {
            operator: &ObsOperator::Identity,
            noise: &[1.0],
        };
        let out = enkf_analysis(&ens, &[2.0], obs, None, &mut rng).unwrap();
        // Prior N(0,1), R = 1: posterior N(1, 0.5).
        let m = out.mean()[0];
        let s = out.std()[0];
        assert!((m - 1.0).abs() < 0.1, "mean {m}");
        assert!((s * s - 0.5).abs() < 0.1, "var {}", s * s);
    }
}
