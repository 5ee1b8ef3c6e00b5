//! Learns the rotation dynamics of the circular-motion benchmark with
//! PPO-EnKF, then assimilates held-out trajectories with the learned model
//! and with the true model for comparison.

use std::time::Instant;

use rlda::filters::{FilterMethod, FilterModel, ObsModel};
use rlda::mdpenv::{Backend, FilterEnv};
use rlda::metrics::{evaluate, report};
use rlda::ppo::{train, TrainConfig, TrainOutput};
use rlda::ssm::{generate_dataset, ObsOperator, SystemSpec};
use rlda::surrogate::{init_models, ActorSpec, CriticSpec};

fn main() -> rlda::Result<()> {
    env_logger::init();
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let spec = SystemSpec::circular_motion(ObsOperator::Identity);
    let data = generate_dataset(&spec, 20, 400, 10, 500, 7)?;

    let cfg = TrainConfig {
        iterations,
        seed: 1,
        ..TrainConfig::default()
    };
    let (actor, critic) = init_models(ActorSpec::for_system(&spec), CriticSpec::for_system(&spec), cfg.seed)?;
    let env = FilterEnv::for_system(&spec, Backend::Enkf, cfg.n_particles);

    let start = Instant::now();
    let trained = train(&cfg, &env, &data.train, actor, critic, &TrainOutput::default())?;
    let first = trained.log.first().map_or(f64::NAN, |r| r.mean_return);
    println!(
        "trained {} iterations in {:.1}s: return {:.1} -> best {:.1} (iteration {})",
        trained.log.len(),
        start.elapsed().as_secs_f64(),
        first,
        trained.best_return,
        trained.best_iteration
    );

    println!("learned variance {:?}", trained.actor.variance());
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
        let metrics = evaluate(FilterMethod::Enkf, &model, &data.test, 20, 3)?;
        let r = report(&spec, name, 20, 3, None, metrics);
        println!(
            "{name:>8} model: RMSE-a {:.4}, CRPS {:.4}",
            r.rmse_a.unwrap_or(f64::NAN),
            r.crps.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
