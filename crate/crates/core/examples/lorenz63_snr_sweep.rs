//! Sweeps the signal-to-noise ratio of Lorenz 63 observed through the
//! identity: at each level a surrogate is trained with PPO-EnKF and the test
//! set is assimilated with it and with the true model.

use rlda::filters::{FilterMethod, FilterModel, ObsModel};
use rlda::metrics::{evaluate, snr_sweep, SweepConfig};
use rlda::ppo::TrainConfig;
use rlda::ssm::{generate_dataset, ObsOperator, SystemSpec};

fn main() -> rlda::Result<()> {
    env_logger::init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let system = SystemSpec::lorenz63(ObsOperator::Identity);
    let levels = [10.0, 20.0, 30.0];
    let cfg = SweepConfig {
        k_train: 10,
        t_train: 200,
        k_test: 5,
        t_test: 200,
        seed: 4,
        train: TrainConfig {
            iterations,
            seed: 2,
            ..TrainConfig::default()
        },
    };

    let learned = snr_sweep(&system, &levels, &cfg)?;
    println!("{:>6} {:>12} {:>12} {:>12} {:>12}", "snr", "ppo rmse", "ppo crps", "truth rmse", "truth crps");
    for (snr, rep) in levels.iter().zip(&learned) {
        let spec = system.with_snr(*snr, cfg.seed)?;
        let data = generate_dataset(&spec, 0, 0, cfg.k_test, cfg.t_test, cfg.seed)?;
        let prior = spec.default_prior();
        let model = FilterModel {
            transition: &spec,
            observation: ObsModel::of(&spec),
            prior: &prior,
            linear: None,
        };
        let truth = rlda::metrics::report(
            &spec,
            "truth_enkf",
            cfg.train.n_particles,
            cfg.seed,
            Some(*snr),
            evaluate(FilterMethod::Enkf, &model, &data.test, cfg.train.n_particles, cfg.seed)?,
        );
        let f = |v: Option<f64>| v.unwrap_or(f64::NAN);
        println!(
            "{snr:>6} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
            f(rep.rmse_a),
            f(rep.crps),
            f(truth.rmse_a),
            f(truth.crps)
        );
    }
    Ok(())
}
