use crate::diffmath::{Tape, Var};
use crate::error::{Error, Result};
use crate::mdpenv::StepRecord;
use crate::surrogate::{Actor, Critic};
use crate::tensor::Tensor;

fn stack<'a>(items: impl Iterator<Item = &'a Tensor>, rows_each: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut cols = 0;
    for t in items {
        if t.rows() != rows_each {
            return Err(Error::Dimension(format!("ensemble of {} particles, expected {rows_each}", t.rows())));
        }
        cols = t.cols();
        data.extend_from_slice(t.data());
        count += 1;
    }
    Tensor::new(vec![count * rows_each, cols], data)
}

/// Inputs of a minibatch laid out as `[B·N, ·]` tape nodes.
struct Batch {
    states: Var,
    actions: Var,
    controls: Option<Var>,
    n: usize,
}

fn load_batch(tape: &mut Tape, batch: &[&StepRecord]) -> Result<Batch> {
    let first = batch.first().ok_or_else(|| Error::Contract("empty minibatch".into()))?;
    let n = first.state.rows();
    let states = tape.input(stack(batch.iter().map(|r| &r.state), n)?);
    let actions = tape.input(stack(batch.iter().map(|r| &r.action), n)?);
    let controls = match &first.control {
        Some(c0) => {
            let mut data = Vec::with_capacity(batch.len() * n * c0.len());
            for r in batch {
                let c = r
                    .control
                    .as_ref()
                    .ok_or_else(|| Error::Contract("minibatch mixes controlled and uncontrolled steps".into()))?;
                for _ in 0..n {
                    data.extend_from_slice(c);
                }
            }
            Some(tape.input(Tensor::new(vec![batch.len() * n, c0.len()], data)?))
        }
        None => None,
    };
    Ok(Batch {
        states,
        actions,
        controls,
        n,
    })
}

/// Total log-density of each step's action under the current actor, `[B]`.
pub fn batch_log_prob(actor: &Actor, tape: &mut Tape, batch: &[&StepRecord]) -> Result<Var> {
    let b = load_batch(tape, batch)?;
    let per_particle = actor.log_prob_var(tape, b.states, b.controls, b.actions)?;
    tape.group_sum_rows(per_particle, b.n)
}

/// Clipped surrogate loss `−mean(min(ρA, clip(ρ, 1−ε, 1+ε)A))` with
/// `ρ = exp(log π_θ − log π_old)`.
pub fn actor_loss(
    actor: &Actor,
    tape: &mut Tape,
    batch: &[&StepRecord],
    advantages: &[f64],
    clip_eps: f64,
) -> Result<Var> {
    if advantages.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} advantages for {} steps",
            advantages.len(),
            batch.len()
        )));
    }
    let logp = batch_log_prob(actor, tape, batch)?;
    let old: Vec<f64> = batch.iter().map(|r| -r.logp).collect();
    let diff = tape.add_const(logp, &old)?;
    let ratio = tape.exp(diff);
    let unclipped = tape.mul_const(ratio, advantages)?;
    let clipped = tape.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let clipped = tape.mul_const(clipped, advantages)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let m = tape.mean(surrogate);
    Ok(tape.scale(m, -1.0))
}

/// `mean((target − V(s))²)`.
pub fn critic_loss(critic: &Critic, tape: &mut Tape, batch: &[&StepRecord], targets: &[f64]) -> Result<Var> {
    if targets.len() != batch.len() {
        return Err(Error::Dimension(format!("{} targets for {} steps", targets.len(), batch.len())));
    }
    let first = batch.first().ok_or_else(|| Error::Contract("empty minibatch".into()))?;
    let n = first.state.rows();
    let states = tape.input(stack(batch.iter().map(|r| &r.state), n)?);
    let d = first.obs.len();
    let mut odata = Vec::with_capacity(batch.len() * d);
    for r in batch {
        odata.extend_from_slice(&r.obs);
    }
    let obs = tape.input(Tensor::new(vec![batch.len(), d], odata)?);
    let v = critic.value_var(tape, states, n, obs)?;
    let neg: Vec<f64> = targets.iter().map(|t| -t).collect();
    let e = tape.add_const(v, &neg)?;
    let sq = tape.square(e);
    Ok(tape.mean(sq))
}
