//! Compares the exact Kalman log-likelihood of a linear-Gaussian system with
//! the ensemble Kalman and particle filter estimates at several ensemble sizes.

use rlda::filters::{run_filter, FilterMethod, FilterModel, LinearGaussian, ObsModel};
use rlda::ssm::{generate_dataset, ObsOperator, SystemSpec};

fn main() -> rlda::Result<()> {
    let spec = SystemSpec::circular_motion(ObsOperator::Identity);
    let lin = LinearGaussian::from_system(&spec).expect("circular motion with identity observation is linear");
    let data = generate_dataset(&spec, 0, 0, 5, 200, 3)?;
    let prior = spec.default_prior();
    let model = FilterModel {
        transition: &spec,
        observation: ObsModel::of(&spec),
        prior: &prior,
        linear: Some(&lin),
    };

    println!("{:>4} {:>12} {:>12} {:>12}", "id", "kf", "enkf", "pf");
    for traj in &data.test {
        let kf = run_filter(FilterMethod::Kf, &model, traj, 0, 0)?.loglik;
        for n in [20, 200, 2000] {
            let enkf = run_filter(FilterMethod::Enkf, &model, traj, n, 1)?.loglik;
            let pf = run_filter(FilterMethod::Pf, &model, traj, n, 1)?.loglik;
            println!("{:>4} {kf:>12.3} {enkf:>12.3} {pf:>12.3}  (N = {n})", traj.id);
        }
    }
    Ok(())
}
