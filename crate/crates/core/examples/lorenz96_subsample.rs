//! Lorenz 96 with 40 components of which 20, chosen afresh at every step,
//! are observed. Trains the periodic-convolution surrogate for a few
//! iterations and assimilates the test set with it.

use std::time::Instant;

use rlda::filters::{FilterMethod, FilterModel, ObsModel};
use rlda::mdpenv::{Backend, FilterEnv};
use rlda::metrics::{evaluate, report};
use rlda::ppo::{train, TrainConfig, TrainOutput};
use rlda::ssm::{generate_dataset, ObsOperator, SystemSpec};
use rlda::surrogate::{init_models, ActorSpec, CriticSpec};

fn main() -> rlda::Result<()> {
    env_logger::init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let spec = SystemSpec::lorenz96(ObsOperator::Subsample { n: 20 });
    let data = generate_dataset(&spec, 2, 100, 2, 100, 5)?;
    let cfg = TrainConfig {
        iterations,
        n_particles: 20,
        seed: 3,
        ..TrainConfig::default()
    };
    let (actor, critic) = init_models(ActorSpec::for_system(&spec), CriticSpec::for_system(&spec), cfg.seed)?;
    let count = |s: &rlda::diffmath::ParamStore| s.ids().map(|id| s.value(id).len()).sum::<usize>();
    println!("actor parameters {}, critic parameters {}", count(actor.store()), count(critic.store()));

    let env = FilterEnv::for_system(&spec, Backend::Enkf, cfg.n_particles);
    let start = Instant::now();
    let trained = train(&cfg, &env, &data.train, actor, critic, &TrainOutput::default())?;
    println!("{} iterations in {:.1}s, best return {:.1}", trained.log.len(), start.elapsed().as_secs_f64(), trained.best_return);

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
