//! Allen–Cahn with a known exogenous forcing: the surrogate receives the
//! control at every step. Trains briefly and compares the filter with the
//! learned and the true model.

use rlda::filters::{FilterMethod, FilterModel, ObsModel};
use rlda::mdpenv::{Backend, FilterEnv};
use rlda::metrics::{evaluate, report};
use rlda::ppo::{train, TrainConfig, TrainOutput};
use rlda::ssm::{generate_dataset, SystemSpec};
use rlda::surrogate::{init_models, ActorSpec, CriticSpec};

fn main() -> rlda::Result<()> {
    env_logger::init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let spec = SystemSpec::allen_cahn_control();
    let data = generate_dataset(&spec, 4, 50, 2, 50, 6)?;
    let first = &data.test[0];
    let c = first.c.as_ref().map(|c| &c[0]).expect("controlled system stores controls");
    println!("state dim {}, control at t = 0 spans [{:.3}, {:.3}]", spec.state_dim, min(c), max(c));

    let cfg = TrainConfig {
        iterations,
        control: true,
        seed: 9,
        ..TrainConfig::default()
    };
    let (actor, critic) = init_models(ActorSpec::for_system(&spec), CriticSpec::for_system(&spec), cfg.seed)?;
    let env = FilterEnv::for_system(&spec, Backend::Enkf, cfg.n_particles);
    let trained = train(&cfg, &env, &data.train, actor, critic, &TrainOutput::default())?;
    println!("best return {:.1} at iteration {}", trained.best_return, trained.best_iteration);

    let prior = spec.default_prior();
    for (name, transition) in [
        ("learned", &trained.actor as &dyn rlda::filters::Transition),
        ("truth", &spec),
    ] {
        let model = FilterModel {
            transition,
            observation: ObsModel::of(&spec),
            prior: &prior,
            linear: None,
        };
        let r = report(&spec, name, cfg.n_particles, 1, None, evaluate(FilterMethod::Enkf, &model, &data.test, cfg.n_particles, 1)?);
        println!("{name:>8} model: RMSE-a {:.4}", r.rmse_a.unwrap_or(f64::NAN));
    }
    Ok(())
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
