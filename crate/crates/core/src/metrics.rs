//! Evaluation metrics: analysis RMSE, CRPS, forecast RMSE, and the SNR sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{run_filter_with, FilterMethod, FilterModel, FilterOptions, FilterRun, ObsModel, Transition};
use crate::mdpenv::FilterEnv;
use crate::ppo::{train, TrainConfig, TrainOutput};
use crate::rng::{derive_seed, derived_rng, streams};
use crate::ssm::{generate_dataset, SystemSpec, Trajectory};
use crate::surrogate::{init_models, ActorSpec, CriticSpec};
use crate::tensor::Tensor;

/// `sqrt((1/(mT)) Σ_t ‖mean_t − x_t‖²)` for per-step estimates `means`.
pub fn rmse_from_means(means: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if means.is_empty() {
        return Err(Error::Contract("RMSE over zero steps".into()));
    }
    if means.len() != truth.len() {
        return Err(Error::Dimension(format!("{} estimates for {} truth states", means.len(), truth.len())));
    }
    let m = truth[0].len();
    let mut acc = 0.0;
    for (a, b) in means.iter().zip(truth) {
        if a.len() != m || b.len() != m {
            return Err(Error::Dimension(format!("state lengths {} and {} (expected {m})", a.len(), b.len())));
        }
        acc += a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    }
    Ok((acc / (m * means.len()) as f64).sqrt())
}

/// Analysis RMSE of posterior ensembles `[N, m]` against the truth, using
/// the plain particle mean at each step.
pub fn rmse_a(ensembles: &[Tensor], truth: &[Vec<f64>]) -> Result<f64> {
    let means: Vec<Vec<f64>> = ensembles.iter().map(Tensor::column_means).collect();
    rmse_from_means(&means, truth)
}

/// CRPS of a scalar ensemble against `truth`:
/// `(1/N) Σᵢ |xᵢ − x*| − (1/(2N²)) Σᵢ Σⱼ |xᵢ − xⱼ|`.
pub fn crps_ensemble(samples: &[f64], truth: f64) -> f64 {
    let n = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let abs: f64 = sorted.iter().map(|x| (x - truth).abs()).sum::<f64>() / n;
    // Σᵢ Σⱼ |xᵢ − xⱼ| = 2 Σ_k (2k − N + 1) x_(k) over the sorted sample.
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| (2.0 * k as f64 - n + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    (abs - pair / (2.0 * n * n)).max(0.0)
}

/// Mean CRPS over all steps and components.
pub fn crps(ensembles: &[Tensor], truth: &[Vec<f64>]) -> Result<f64> {
    if ensembles.is_empty() {
        return Err(Error::Contract("CRPS over zero steps".into()));
    }
    if ensembles.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} ensembles for {} truth states",
            ensembles.len(),
            truth.len()
        )));
    }
    let m = truth[0].len();
    let mut acc = 0.0;
    let mut column = Vec::new();
    for (ens, x) in ensembles.iter().zip(truth) {
        if ens.cols() != m || x.len() != m || ens.rows() == 0 {
            return Err(Error::Dimension(format!("ensemble {:?} against state of length {}", ens.shape(), x.len())));
        }
        for j in 0..m {
            column.clear();
            column.extend(ens.row_iter().map(|r| r[j]));
            acc += crps_ensemble(&column, x[j]);
        }
    }
    Ok(acc / (m * ensembles.len()) as f64)
}

/// Forecast RMSE at horizons `1..=horizon`: `P` initial conditions drawn like
/// test data, each propagated as an `N`-member ensemble under the surrogate
/// and (with independent noise) under the true model; ensemble means compared.
pub fn rmse_f(
    surrogate: &dyn Transition,
    truth: &SystemSpec,
    horizon: usize,
    p: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if horizon == 0 || p == 0 || n == 0 {
        return Err(Error::Config("rmse_f needs positive horizon, P and N".into()));
    }
    let m = truth.state_dim;
    let mut acc = vec![0.0; horizon];
    for k in 0..p {
        let mut rng = derived_rng(seed, streams::FORECAST, k as u64);
        let (x0, amp) = truth.sample_initial(&mut rng)?;
        let start = Tensor::from_rows(&vec![x0; n])?;
        let (mut a, mut b) = (start.clone(), start);
        for (t, slot) in acc.iter_mut().enumerate() {
            let c = truth.control_at(amp, t);
            a = surrogate.propagate(&a, c.as_deref(), &mut rng)?;
            b = truth.propagate(&b, c.as_deref(), &mut rng)?;
            let (ma, mb) = (a.column_means(), b.column_means());
            *slot += ma.iter().zip(&mb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        }
    }
    Ok(acc.into_iter().map(|s| (s / (m * p) as f64).sqrt()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub id: usize,
    #[serde(deserialize_with = "null_as_nan")]
    pub rmse_a: f64,
    /// NaN (`null` in JSON) for the Kalman filter.
    #[serde(deserialize_with = "null_as_nan")]
    pub crps: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub loglik: f64,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub method: String,
    pub n_particles: usize,
    pub seed: u64,
    pub snr_db: Option<f64>,
    pub trajectories: Vec<TrajectoryMetrics>,
    /// Means over trajectories (absent for an empty test set).
    pub rmse_a: Option<f64>,
    pub crps: Option<f64>,
    /// `(horizon, value)` pairs.
    #[serde(default)]
    pub rmse_f: Vec<(usize, f64)>,
}

impl EvalReport {
    /// Long-format rows `(metric, value)` of the aggregate metrics.
    pub fn aggregate_rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        if let Some(v) = self.rmse_a {
            rows.push(("rmse_a".to_string(), v));
        }
        if let Some(v) = self.crps {
            rows.push(("crps".to_string(), v));
        }
        for (h, v) in &self.rmse_f {
            rows.push((format!("rmse_f@{h}"), *v));
        }
        rows
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Companion CSV: `trajectory,metric,value`, one row per trajectory per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trajectory,metric,value\n");
        for t in &self.trajectories {
            out.push_str(&format!("{},rmse_a,{}\n", t.id, t.rmse_a));
            out.push_str(&format!("{},crps,{}\n", t.id, t.crps));
            out.push_str(&format!("{},loglik,{}\n", t.id, t.loglik));
        }
        for (metric, value) in self.aggregate_rows() {
            out.push_str(&format!("all,{metric},{value}\n"));
        }
        out
    }
}

/// Scores one filter run (kept ensembles required for CRPS) against the
/// trajectory's truth states `x_{1:T}`.
pub fn score_run(method: FilterMethod, run: &FilterRun, traj: &Trajectory) -> Result<TrajectoryMetrics> {
    let truth = traj
        .x
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("test trajectory {} has no truth states", traj.id)))?;
    let truth = &truth[1..=run.steps.len()];
    let means: Vec<Vec<f64>> = run.steps.iter().map(|s| s.mean.clone()).collect();
    let crps_v = match method {
        FilterMethod::Kf => f64::NAN,
        _ => {
            let ens: Vec<Tensor> = run.steps.iter().filter_map(|s| s.particles.clone()).collect();
            crps(&ens, truth)?
        }
    };
    Ok(TrajectoryMetrics {
        id: traj.id,
        rmse_a: rmse_from_means(&means, truth)?,
        crps: crps_v,
        loglik: run.loglik,
    })
}

/// Filters every test trajectory with `model` and scores the posteriors.
/// Trajectory `k` uses filter seed `derive_seed(seed, FILTER, k)`.
pub fn evaluate(
    method: FilterMethod,
    model: &FilterModel,
    test: &[Trajectory],
    n_particles: usize,
    seed: u64,
) -> Result<Vec<TrajectoryMetrics>> {
    let opts = FilterOptions { keep_ensembles: true };
    test.iter()
        .enumerate()
        .map(|(k, traj)| {
            let run = run_filter_with(method, model, traj, n_particles, derive_seed(seed, streams::FILTER, k as u64), opts)?;
            score_run(method, &run, traj)
        })
        .collect()
}

pub fn report(
    system: &SystemSpec,
    method: &str,
    n_particles: usize,
    seed: u64,
    snr_db: Option<f64>,
    trajectories: Vec<TrajectoryMetrics>,
) -> EvalReport {
    let mean = |f: fn(&TrajectoryMetrics) -> f64| {
        let vals: Vec<f64> = trajectories.iter().map(f).filter(|v| v.is_finite()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    EvalReport {
        system: system.name().to_string(),
        method: method.to_string(),
        n_particles,
        seed,
        snr_db,
        rmse_a: mean(|t| t.rmse_a),
        crps: mean(|t| t.crps),
        trajectories,
        rmse_f: Vec::new(),
    }
}

/// Settings shared by every level of an SNR sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub k_train: usize,
    pub t_train: usize,
    pub k_test: usize,
    pub t_test: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

/// For each SNR level: regenerate data, train a fresh surrogate, assimilate
/// the test set with it, and report.
pub fn snr_sweep(system: &SystemSpec, snr_db: &[f64], cfg: &SweepConfig) -> Result<Vec<EvalReport>> {
    let method = match cfg.train.backend {
        crate::mdpenv::Backend::Enkf => FilterMethod::Enkf,
        crate::mdpenv::Backend::Pf => FilterMethod::Pf,
    };
    snr_db
        .iter()
        .map(|&snr| {
            let spec = system.with_snr(snr, cfg.seed)?;
            let ds = generate_dataset(&spec, cfg.k_train, cfg.t_train, cfg.k_test, cfg.t_test, cfg.seed)?;
            let (actor, critic) = init_models(ActorSpec::for_system(&spec), CriticSpec::for_system(&spec), cfg.train.seed)?;
            let env = FilterEnv::for_system(&spec, cfg.train.backend, cfg.train.n_particles);
            let trained = train(&cfg.train, &env, &ds.train, actor, critic, &TrainOutput::default())?;
            let prior = spec.default_prior();
            let model = FilterModel {
                transition: &trained.actor,
                observation: ObsModel::of(&spec),
                prior: &prior,
                linear: None,
            };
            let metrics = evaluate(method, &model, &ds.test, cfg.train.n_particles, cfg.seed)?;
            Ok(report(&spec, &format!("ppo_{}", method_name(method)), cfg.train.n_particles, cfg.seed, Some(snr), metrics))
        })
        .collect()
}

pub fn method_name(m: FilterMethod) -> &'static str {
    match m {
        FilterMethod::Enkf => "enkf",
        FilterMethod::Pf => "pf",
        FilterMethod::Kf => "kf",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::ssm::ObsOperator;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rmse_hand_values() {
        assert_eq!(rmse_from_means(&[vec![3.0]], &[vec![1.0]]).unwrap(), 2.0);
        assert_eq!(rmse_from_means(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert!(matches!(rmse_from_means(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn rmse_a_matches_scalar_loop() {
        let mut rng = rng_from_seed(4);
        let (t, n, m) = (7, 5, 3);
        let ens: Vec<Tensor> = (0..t)
            .map(|_| Tensor::new(vec![n, m], (0..n * m).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap())
            .collect();
        let truth: Vec<Vec<f64>> = (0..t).map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let mut acc = 0.0;
        for s in 0..t {
            for j in 0..m {
                let mut mean = 0.0;
                for i in 0..n {
                    mean += ens[s].row(i)[j];
                }
                mean /= n as f64;
                acc += (mean - truth[s][j]).powi(2);
            }
        }
        let expect = (acc / (m * t) as f64).sqrt();
        assert!((rmse_a(&ens, &truth).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn crps_hand_values() {
        assert!((crps_ensemble(&[0.0, 1.0], 0.5) - 0.25).abs() < 1e-15);
        assert_eq!(crps_ensemble(&[1.7], -0.3), 2.0);
        assert_eq!(crps_ensemble(&[0.4, 0.4, 0.4], 0.4), 0.0);
    }

    proptest! {
        #[test]
        fn crps_bounded_by_mean_absolute_error(xs in proptest::collection::vec(-10.0f64..10.0, 1..30), t in -10.0f64..10.0) {
            let c = crps_ensemble(&xs, t);
            let mae = xs.iter().map(|x| (x - t).abs()).sum::<f64>() / xs.len() as f64;
            prop_assert!(c >= 0.0 && c <= mae + 1e-12);
        }

        #[test]
        fn rmse_a_is_translation_invariant(shift in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = rng_from_seed(seed);
            let ens: Vec<Tensor> = (0..4)
                .map(|_| Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let truth: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let moved: Vec<Tensor> = ens.iter().map(|e| e.map(|v| v + shift)).collect();
            let moved_truth: Vec<Vec<f64>> = truth.iter().map(|x| x.iter().map(|v| v + shift).collect()).collect();
            let a = rmse_a(&ens, &truth).unwrap();
            let b = rmse_a(&moved, &moved_truth).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_f_vanishes_for_noise_free_truth() {
        let mut spec = SystemSpec::circular_motion(ObsOperator::Identity);
        spec.process_noise = vec![0.0; 2];
        let v = rmse_f(&spec, &spec, 3, 20, 4, 1).unwrap();
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn empty_report() {
        let spec = SystemSpec::circular_motion(ObsOperator::Identity);
        let r = report(&spec, "enkf", 20, 0, None, Vec::new());
        assert!(r.rmse_a.is_none() && r.aggregate_rows().is_empty());
    }
}
