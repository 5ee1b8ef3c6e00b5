//! Scores filters on Lorenz 63 with the nonlinear observation operator:
//! RMSE-a and CRPS of EnKF and PF posteriors, and the RMSE-f of a
//! deliberately misspecified model against the true dynamics. The true
//! model has no process noise, so the particle filter collapses onto a few
//! resampled trajectories.

use rlda::filters::{FilterMethod, FilterModel, ObsModel};
use rlda::metrics::{crps_ensemble, evaluate, report, rmse_f};
use rlda::ssm::{generate_dataset, Dynamics, ObsOperator, SystemSpec};

fn main() -> rlda::Result<()> {
    let samples = [0.1, -0.3, 0.8, 0.4];
    println!("CRPS of {samples:?} at 0.0: {:.4}", crps_ensemble(&samples, 0.0));

    let spec = SystemSpec::lorenz63(ObsOperator::Lorenz63Nonlinear);
    let data = generate_dataset(&spec, 0, 0, 4, 300, 8)?;
    let prior = spec.default_prior();
    let model = FilterModel {
        transition: &spec,
        observation: ObsModel::of(&spec),
        prior: &prior,
        linear: None,
    };
    for (method, name) in [(FilterMethod::Enkf, "enkf"), (FilterMethod::Pf, "pf")] {
        for n in [20, 100, 1000] {
            let r = report(&spec, name, n, 2, None, evaluate(method, &model, &data.test, n, 2)?);
            println!(
                "{name:>5} N = {n:>3}: RMSE-a {:.4}, CRPS {:.4}",
                r.rmse_a.unwrap_or(f64::NAN),
                r.crps.unwrap_or(f64::NAN)
            );
        }
    }

    let mut wrong = spec.clone();
    if let Dynamics::Lorenz63 { rho, .. } = &mut wrong.dynamics {
        *rho = 26.0;
    }
    let errors = rmse_f(&wrong, &spec, 20, 10, 20, 5)?;
    for (lead, e) in errors.iter().enumerate().step_by(5) {
        println!("RMSE-f at lead {:>2} with rho = 26: {e:.4}", lead + 1);
    }
    Ok(())
}
