use rand::Rng;
use serde::{Deserialize, Serialize};

use super::actor::meta_object;
use crate::diffmath::{Activation, Checkpoint, Mlp, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::ssm::{Dynamics, SystemSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    Sum,
    Mean,
}

/// Set critic `V(s) = φ₃(pool_i φ₁(xᵢ) + φ₂(y[, c]))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSpec {
    pub state_dim: usize,
    pub obs_dim: usize,
    #[serde(default)]
    pub control_dim: usize,
    /// Observations arrive at varying indices: encode them as a length-`m`
    /// scatter plus a length-`m` mask instead of the raw `obs_dim` values.
    #[serde(default)]
    pub scatter_obs: bool,
    pub embed: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub pool: Pool,
}

impl CriticSpec {
    pub fn for_system(spec: &SystemSpec) -> Self {
        let (enc, head) = match spec.dynamics {
            Dynamics::CircularMotion { .. } | Dynamics::Lorenz63 { .. } => (32, 64),
            Dynamics::Lorenz96 { .. } => (60, 120),
            Dynamics::AllenCahn { .. } | Dynamics::AllenCahnControl { .. } => (75, 150),
        };
        CriticSpec {
            state_dim: spec.state_dim,
            obs_dim: spec.obs_dim(),
            control_dim: spec.control_dim(),
            scatter_obs: spec.observation.is_time_varying(),
            embed: enc,
            encoder_hidden: vec![enc],
            head_hidden: vec![head],
            activation: Activation::Tanh,
            pool: Pool::Sum,
        }
    }

    /// Width of the encoded observation (and control) input of `φ₂`.
    pub fn obs_input_dim(&self) -> usize {
        let y = if self.scatter_obs { 2 * self.state_dim } else { self.obs_dim };
        y + self.control_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.obs_dim == 0 || self.embed == 0 {
            return Err(Error::Config("critic dimensions must be positive".into()));
        }
        if self.encoder_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::Config("critic hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    spec: CriticSpec,
    store: ParamStore,
    particle_net: Mlp,
    obs_net: Mlp,
    head: Mlp,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(spec: CriticSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let act = spec.activation;
        let particle_net = Mlp::new(
            &mut store,
            "phi1",
            spec.state_dim,
            &spec.encoder_hidden,
            spec.embed,
            act,
            Activation::Identity,
            rng,
        )?;
        let obs_net = Mlp::new(
            &mut store,
            "phi2",
            spec.obs_input_dim(),
            &spec.encoder_hidden,
            spec.embed,
            act,
            Activation::Identity,
            rng,
        )?;
        let head = Mlp::new(&mut store, "phi3", spec.embed, &spec.head_hidden, 1, act, Activation::Identity, rng)?;
        Ok(Critic {
            spec,
            store,
            particle_net,
            obs_net,
            head,
        })
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Input row for `φ₂` built from `y_{t+1}` (its indices, if any) and `c_t`.
    pub fn encode_obs(&self, y: &[f64], idx: Option<&[usize]>, control: Option<&[f64]>) -> Result<Vec<f64>> {
        let s = &self.spec;
        if y.len() != s.obs_dim {
            return Err(Error::Config(format!("critic expects {} observations, got {}", s.obs_dim, y.len())));
        }
        let mut out = if s.scatter_obs {
            let idx = idx.ok_or_else(|| Error::Contract("scattered observations need indices".into()))?;
            let m = s.state_dim;
            let mut v = vec![0.0; 2 * m];
            for (&i, &yv) in idx.iter().zip(y) {
                if i >= m {
                    return Err(Error::Dimension(format!("observation index {i} outside state of length {m}")));
                }
                v[i] = yv;
                v[m + i] = 1.0;
            }
            v
        } else {
            y.to_vec()
        };
        match (s.control_dim, control) {
            (0, _) => {}
            (dc, Some(c)) if c.len() == dc => out.extend_from_slice(c),
            (dc, _) => return Err(Error::Config(format!("critic needs a control input of dimension {dc}"))),
        }
        Ok(out)
    }

    /// Values of `S` states on the tape: `particles: [S·N, m]`, `obs: [S, d]`.
    pub fn value_var(&self, tape: &mut Tape, particles: Var, n: usize, obs: Var) -> Result<Var> {
        let sp = tape.value(particles).shape().to_vec();
        let so = tape.value(obs).shape().to_vec();
        if sp.len() != 2 || sp[1] != self.spec.state_dim || n == 0 || !sp[0].is_multiple_of(n) {
            return Err(Error::Config(format!(
                "critic particles {sp:?} do not form groups of {n} states of dimension {}",
                self.spec.state_dim
            )));
        }
        let states = sp[0] / n;
        if so.len() != 2 || so[0] != states || so[1] != self.spec.obs_input_dim() {
            return Err(Error::Config(format!(
                "critic observation input {so:?}, expected [{states}, {}]",
                self.spec.obs_input_dim()
            )));
        }
        let e = self.particle_net.forward(tape, &self.store, particles)?;
        let mut pooled = tape.group_sum_rows(e, n)?;
        if self.spec.pool == Pool::Mean {
            pooled = tape.scale(pooled, 1.0 / n as f64);
        }
        let o = self.obs_net.forward(tape, &self.store, obs)?;
        let z = tape.add(pooled, o)?;
        let v = self.head.forward(tape, &self.store, z)?;
        tape.reshape(v, &[states])
    }

    /// Value of one state.
    pub fn value(&self, particles: &Tensor, obs: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.input(particles.clone());
        let o = tape.input(Tensor::new(vec![1, obs.len()], obs.to_vec())?);
        let v = self.value_var(&mut tape, p, particles.rows(), o)?;
        Ok(tape.value(v).data()[0])
    }

    pub fn export_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.store.export_into("critic.", ckpt);
        meta_object(ckpt).insert("critic".into(), serde_json::to_value(&self.spec)?);
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: CriticSpec = serde_json::from_value(
            ckpt.meta
                .get("critic")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint has no critic descriptor".into()))?,
        )?;
        let mut critic = Critic::new(spec, &mut rng_from_seed(0))?;
        critic.store.import_from("critic.", ckpt)?;
        Ok(critic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::ObsOperator;

    fn circle_critic() -> Critic {
        let spec = CriticSpec::for_system(&SystemSpec::circular_motion(ObsOperator::Identity));
        Critic::new(spec, &mut rng_from_seed(1)).unwrap()
    }

    #[test]
    fn permutation_invariant_and_sum_pooled() {
        let c = circle_critic();
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 * 0.3 - 1.0, (i as f64).cos()]).collect();
        let mut rev = rows.clone();
        rev.reverse();
        let y = [0.4, -0.2];
        let a = c.value(&Tensor::from_rows(&rows).unwrap(), &y).unwrap();
        let b = c.value(&Tensor::from_rows(&rev).unwrap(), &y).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let d = c.value(&Tensor::from_rows(&doubled).unwrap(), &y).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn mean_pool_ignores_duplication() {
        let mut spec = CriticSpec::for_system(&SystemSpec::circular_motion(ObsOperator::Identity));
        spec.pool = Pool::Mean;
        let c = Critic::new(spec, &mut rng_from_seed(2)).unwrap();
        let rows = vec![vec![0.1, 0.2], vec![-0.5, 0.9]];
        let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let a = c.value(&Tensor::from_rows(&rows).unwrap(), &[0.0, 1.0]).unwrap();
        let b = c.value(&Tensor::from_rows(&doubled).unwrap(), &[0.0, 1.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn scatter_encoding() {
        let spec = CriticSpec::for_system(&SystemSpec::lorenz96(ObsOperator::Subsample { n: 2 }));
        let c = Critic::new(spec, &mut rng_from_seed(3)).unwrap();
        let v = c.encode_obs(&[5.0, 6.0], Some(&[1, 39]), None).unwrap();
        assert_eq!(v.len(), 80);
        assert_eq!((v[1], v[39], v[41], v[79]), (5.0, 6.0, 1.0, 1.0));
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 4);
        assert!(c.encode_obs(&[5.0, 6.0], None, None).is_err());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let c = circle_critic();
        assert!(matches!(c.value(&Tensor::zeros(&[3, 5]), &[0.0, 0.0]), Err(Error::Config(_))));
        assert!(matches!(c.value(&Tensor::zeros(&[3, 2]), &[0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = circle_critic();
        let mut ckpt = Checkpoint::default();
        c.export_into(&mut ckpt).unwrap();
        let back = Critic::from_checkpoint(&Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap()).unwrap();
        let p = Tensor::from_rows(&[vec![0.3, 0.1], vec![1.3, -0.1]]).unwrap();
        assert_eq!(c.value(&p, &[1.0, 2.0]).unwrap().to_bits(), back.value(&p, &[1.0, 2.0]).unwrap().to_bits());
    }
}
