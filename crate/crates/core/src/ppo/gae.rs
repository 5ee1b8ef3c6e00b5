/// Generalised advantage estimates and value targets.
///
/// `dones[t]` marks the last step of an episode; the value after it is 0.
/// Returns `(advantages, targets)` with `targets = advantages + values`.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "GAE inputs differ in length");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        if dones[t] || t + 1 == n {
            next_adv = 0.0;
            next_value = 0.0;
        }
        let delta = rewards[t] + gamma * next_value - values[t];
        adv[t] = delta + gamma * lambda * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `A_t = Σ_{l ≥ 0} (γλ)^l δ_{t+l}` summed directly within the episode.
    fn brute_force(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + gamma * if t + 1 < n { v[t + 1] } else { 0.0 } - v[t])
            .collect();
        (0..n)
            .map(|t| (t..n).map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k]).sum())
            .collect()
    }

    #[test]
    fn zero_values_unit_parameters_give_reward_to_go() {
        let r = [1.0, 2.0, 3.0];
        let (a, _) = compute_gae(&r, &[0.0; 3], &[false, false, true], 1.0, 1.0);
        assert_eq!(a, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn lambda_zero_is_one_step_td() {
        let r = [0.5, -1.0, 2.0];
        let v = [0.1, 0.2, 0.3];
        let (a, _) = compute_gae(&r, &v, &[false, false, true], 1.0, 0.0);
        assert_eq!(a, vec![0.5 + 0.2 - 0.1, -1.0 + 0.3 - 0.2, 2.0 - 0.3]);
    }

    #[test]
    fn episodes_do_not_leak() {
        let (a, t) = compute_gae(&[1.0, 1.0, 5.0, 5.0], &[0.0; 4], &[false, true, false, true], 1.0, 1.0);
        assert_eq!(a, vec![2.0, 1.0, 10.0, 5.0]);
        assert_eq!(a, t);
    }

    proptest! {
        #[test]
        fn matches_direct_sum(
            rv in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..60),
            params in prop::sample::select(vec![(1.0, 0.9), (1.0, 0.0), (0.95, 0.9)]),
        ) {
            let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
            let mut dones = vec![false; r.len()];
            *dones.last_mut().unwrap() = true;
            let (a, _) = compute_gae(&r, &v, &dones, params.0, params.1);
            let b = brute_force(&r, &v, params.0, params.1);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
