//! Learnable models: the stochastic surrogate transition (actor) and the
//! permutation-invariant set critic.

mod actor;
mod critic;

use std::path::Path;

pub use actor::{Actor, ActorArch, ActorSpec, VARIANCE_FLOOR};
pub use critic::{Critic, CriticSpec, Pool};

use crate::diffmath::Checkpoint;
use crate::error::Result;
use crate::rng::{derived_rng, streams};

/// Fresh actor and critic drawn from the `INIT` stream of `seed`.
pub fn init_models(actor: ActorSpec, critic: CriticSpec, seed: u64) -> Result<(Actor, Critic)> {
    let mut rng = derived_rng(seed, streams::INIT, 0);
    let actor = Actor::new(actor, &mut rng)?;
    let critic = Critic::new(critic, &mut rng)?;
    Ok((actor, critic))
}

/// Writes actor (and critic, when given) into one checkpoint file.
pub fn save_models(path: &Path, actor: &Actor, critic: Option<&Critic>, extra: serde_json::Value) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    actor.export_into(&mut ckpt)?;
    if let Some(c) = critic {
        c.export_into(&mut ckpt)?;
    }
    if let serde_json::Value::Object(map) = extra {
        actor::meta_object(&mut ckpt).extend(map);
    }
    ckpt.save(path)
}

/// Reads the actor and, if present, the critic from a checkpoint file.
pub fn load_models(path: &Path) -> Result<(Actor, Option<Critic>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let actor = Actor::from_checkpoint(&ckpt)?;
    let critic = if ckpt.meta.get("critic").is_some() {
        Some(Critic::from_checkpoint(&ckpt)?)
    } else {
        None
    };
    Ok((actor, critic, ckpt))
}
