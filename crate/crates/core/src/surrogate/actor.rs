use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{softplus_inverse, Activation, Checkpoint, Mlp, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::filters::Transition;
use crate::rng::{rng_from_seed, standard_normal, SimRng};
use crate::ssm::{Dynamics, SystemSpec};
use crate::tensor::Tensor;

/// Lower bound applied to `softplus(β)`.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Channel plan of the periodic convolutional surrogate.
const CONV1_OUT: usize = 48;
const CONV2_OUT: usize = 17;
const CONV_KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActorArch {
    /// Fully connected: `hidden` widths with `activation`, linear output.
    Mlp { hidden: Vec<usize>, activation: Activation },
    /// Periodic conv (48 channels, k = 5) → bilinear split → conv (17, k = 5)
    /// + ReLU → conv (1, k = 1). Controls enter as a second input channel.
    PeriodicConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub state_dim: usize,
    #[serde(default)]
    pub control_dim: usize,
    pub arch: ActorArch,
    /// Predict `x + F(x)` instead of `F(x)`.
    #[serde(default)]
    pub residual: bool,
    /// Initial value of every `softplus(β_j)`.
    pub init_noise_var: f64,
}

impl ActorSpec {
    /// Default architecture for a benchmark system.
    pub fn for_system(spec: &SystemSpec) -> Self {
        let mlp = |w: usize| ActorArch::Mlp {
            hidden: vec![w; 3],
            activation: Activation::Tanh,
        };
        let circle = matches!(spec.dynamics, Dynamics::CircularMotion { .. });
        let arch = match spec.dynamics {
            Dynamics::CircularMotion { .. } | Dynamics::Lorenz63 { .. } => mlp(64),
            Dynamics::Lorenz96 { .. } => ActorArch::PeriodicConv,
            Dynamics::AllenCahn { .. } => mlp(100),
            Dynamics::AllenCahnControl { .. } => mlp(150),
        };
        ActorSpec {
            state_dim: spec.state_dim,
            control_dim: spec.control_dim(),
            arch,
            residual: circle,
            init_noise_var: if circle { 1.0 } else { 1e-2 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::Config("actor state_dim must be positive".into()));
        }
        if !(self.init_noise_var > 0.0 && self.init_noise_var.is_finite()) {
            return Err(Error::Config(format!("init_noise_var must be positive, got {}", self.init_noise_var)));
        }
        match &self.arch {
            ActorArch::Mlp { hidden, .. } if hidden.contains(&0) => {
                Err(Error::Config("actor hidden widths must be positive".into()))
            }
            ActorArch::PeriodicConv if self.control_dim != 0 && self.control_dim != self.state_dim => Err(
                Error::Config("periodic_conv needs control_dim equal to state_dim (or 0)".into()),
            ),
            ActorArch::PeriodicConv if self.state_dim < CONV_KERNEL => Err(Error::Config(format!(
                "periodic_conv needs state_dim ≥ {CONV_KERNEL}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Mlp(Mlp),
    Conv { layers: [(ParamId, ParamId); 3] },
}

/// Stochastic surrogate transition `x' = F(x[, c]) + ξ`, `ξ ~ N(0, diag(softplus(β)))`.
#[derive(Clone, Debug)]
pub struct Actor {
    spec: ActorSpec,
    store: ParamStore,
    net: Net,
    beta: ParamId,
}

fn conv_kernel<R: Rng + ?Sized>(rng: &mut R, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let a = (6.0 / ((c_in + c_out) * k) as f64).sqrt();
    let data = (0..c_out * c_in * k).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![c_out, c_in, k], data).expect("non-zero extents")
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(spec: ActorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let m = spec.state_dim;
        let mut store = ParamStore::new();
        let net = match &spec.arch {
            ActorArch::Mlp { hidden, activation } => Net::Mlp(Mlp::new(
                &mut store,
                "f",
                m + spec.control_dim,
                hidden,
                m,
                *activation,
                Activation::Identity,
                rng,
            )?),
            ActorArch::PeriodicConv => {
                let c_in = if spec.control_dim > 0 { 2 } else { 1 };
                let plan = [
                    (CONV1_OUT, c_in, CONV_KERNEL),
                    (CONV2_OUT, 2 * CONV1_OUT / 3, CONV_KERNEL),
                    (1, CONV2_OUT, 1),
                ];
                let mut ids = Vec::with_capacity(3);
                for (i, (o, c, k)) in plan.into_iter().enumerate() {
                    let w = store.insert(&format!("conv{}.w", i + 1), conv_kernel(rng, o, c, k))?;
                    let b = store.insert(&format!("conv{}.b", i + 1), Tensor::zeros(&[o]))?;
                    ids.push((w, b));
                }
                Net::Conv {
                    layers: [ids[0], ids[1], ids[2]],
                }
            }
        };
        let beta = store.insert("beta", Tensor::filled(&[m], softplus_inverse(spec.init_noise_var)))?;
        Ok(Actor { spec, store, net, beta })
    }

    pub fn spec(&self) -> &ActorSpec {
        &self.spec
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    fn check_inputs(&self, rows: usize, cols: usize, control: Option<(usize, usize)>) -> Result<()> {
        if cols != self.spec.state_dim {
            return Err(Error::Config(format!(
                "actor expects state dimension {}, got {cols}",
                self.spec.state_dim
            )));
        }
        match (self.spec.control_dim, control) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::Config("actor has no control input".into())),
            (dc, None) => Err(Error::Config(format!("actor needs a control input of dimension {dc}"))),
            (dc, Some((r, c))) if r != rows || c != dc => Err(Error::Config(format!(
                "control is [{r}, {c}], expected [{rows}, {dc}]"
            ))),
            _ => Ok(()),
        }
    }

    /// `F(x[, c])` on the tape for `x: [B, m]`, `control: [B, dc]`.
    pub fn mean_var(&self, tape: &mut Tape, x: Var, control: Option<Var>) -> Result<Var> {
        let sx = tape.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(Error::Config(format!("actor input must be [batch, m], got {sx:?}")));
        }
        let sc = control.map(|c| (tape.value(c).rows(), tape.value(c).cols()));
        self.check_inputs(sx[0], sx[1], sc)?;
        let (b, m) = (sx[0], sx[1]);
        let input = match control {
            Some(c) => tape.concat_cols(x, c)?,
            None => x,
        };
        let out = match &self.net {
            Net::Mlp(mlp) => mlp.forward(tape, &self.store, input)?,
            Net::Conv { layers } => {
                let c_in = if control.is_some() { 2 } else { 1 };
                let mut h = tape.reshape(input, &[b, c_in, m])?;
                for (i, (w, bias)) in layers.iter().enumerate() {
                    let wv = tape.param(&self.store, *w);
                    let bv = tape.param(&self.store, *bias);
                    h = tape.conv1d_periodic(h, wv, Some(bv))?;
                    match i {
                        0 => h = tape.bilinear_split(h)?,
                        1 => h = tape.relu(h),
                        _ => {}
                    }
                }
                tape.reshape(h, &[b, m])?
            }
        };
        if self.spec.residual {
            tape.add(x, out)
        } else {
            Ok(out)
        }
    }

    /// `max(softplus(β), floor)` as a `[m]` tape node.
    pub fn variance_var(&self, tape: &mut Tape) -> Var {
        let beta = tape.param(&self.store, self.beta);
        let v = tape.softplus(beta);
        tape.clamp_min(v, VARIANCE_FLOOR)
    }

    /// Per-row `log N(action; F(x[, c]), diag(softplus(β)))`, shape `[B]`.
    pub fn log_prob_var(&self, tape: &mut Tape, x: Var, control: Option<Var>, action: Var) -> Result<Var> {
        let mean = self.mean_var(tape, x, control)?;
        let var = self.variance_var(tape);
        tape.gaussian_logpdf(action, mean, var)
    }

    pub fn variance(&self) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = self.variance_var(&mut tape);
        tape.value(v).data().to_vec()
    }

    fn control_rows(&self, rows: usize, control: Option<&[f64]>) -> Result<Option<Tensor>> {
        match control {
            Some(c) if self.spec.control_dim > 0 => {
                let mut data = Vec::with_capacity(rows * c.len());
                for _ in 0..rows {
                    data.extend_from_slice(c);
                }
                Ok(Some(Tensor::new(vec![rows, c.len()], data)?))
            }
            _ => Ok(None),
        }
    }

    /// Deterministic `F(x[, c])` for every row of `x`, with one shared control
    /// (ignored by actors without a control input).
    pub fn mean(&self, x: &Tensor, control: Option<&[f64]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let cv = self.control_rows(x.rows(), control)?.map(|c| tape.input(c));
        let out = self.mean_var(&mut tape, xv, cv)?;
        Ok(tape.value(out).clone())
    }

    /// Draws `x̂ᵢ = F(xᵢ[, c]) + ξᵢ` and returns the per-particle log-densities.
    pub fn sample(&self, x: &Tensor, control: Option<&[f64]>, rng: &mut SimRng) -> Result<(Tensor, Vec<f64>)> {
        let mean = self.mean(x, control)?;
        let var = self.variance();
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let mut out = mean.clone();
        for i in 0..out.rows() {
            for (v, s) in out.row_mut(i).iter_mut().zip(&sd) {
                *v += s * standard_normal(rng);
            }
        }
        let mut tape = Tape::new();
        let a = tape.input(out.clone());
        let mv = tape.input(mean);
        let vv = tape.input(Tensor::vector(var));
        let lp = tape.gaussian_logpdf(a, mv, vv)?;
        Ok((out, tape.value(lp).data().to_vec()))
    }

    /// `Σᵢ log N(x̂ᵢ; F(xᵢ[, c]), diag(softplus(β)))`.
    pub fn log_prob(&self, x: &Tensor, control: Option<&[f64]>, action: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let cv = self.control_rows(x.rows(), control)?.map(|c| tape.input(c));
        let av = tape.input(action.clone());
        let lp = self.log_prob_var(&mut tape, xv, cv, av)?;
        Ok(tape.value(lp).sum())
    }

    pub fn export_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.store.export_into("actor.", ckpt);
        meta_object(ckpt).insert("actor".into(), serde_json::to_value(&self.spec)?);
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: ActorSpec = serde_json::from_value(
            ckpt.meta
                .get("actor")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint has no actor descriptor".into()))?,
        )?;
        let mut actor = Actor::new(spec, &mut rng_from_seed(0))?;
        actor.store.import_from("actor.", ckpt)?;
        Ok(actor)
    }
}

pub(crate) fn meta_object(ckpt: &mut Checkpoint) -> &mut serde_json::Map<String, serde_json::Value> {
    if !ckpt.meta.is_object() {
        ckpt.meta = serde_json::Value::Object(Default::default());
    }
    ckpt.meta.as_object_mut().expect("object")
}

impl Transition for Actor {
    fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    fn propagate(&self, particles: &Tensor, control: Option<&[f64]>, rng: &mut SimRng) -> Result<Tensor> {
        Ok(self.sample(particles, control, rng)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::gaussian_logpdf;
    use crate::ssm::ObsOperator;

    fn mlp_actor(seed: u64) -> Actor {
        let spec = ActorSpec::for_system(&SystemSpec::circular_motion(ObsOperator::Identity));
        Actor::new(spec, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn fresh_actor_is_sane_at_zero() {
        let a = mlp_actor(1);
        let out = a.mean(&Tensor::zeros(&[1, 2]), None).unwrap();
        assert!(out.is_finite() && out.norm() < 10.0);
        for v in a.variance() {
            assert!((v - a.spec().init_noise_var).abs() < 1e-14);
        }
    }

    #[test]
    fn sample_logprob_matches_density() {
        let a = mlp_actor(2);
        let mut rng = rng_from_seed(3);
        let x = Tensor::from_rows(&[vec![0.5, -0.2], vec![1.0, 1.0], vec![-0.3, 0.1]]).unwrap();
        let (xs, lp) = a.sample(&x, None, &mut rng).unwrap();
        let mean = a.mean(&x, None).unwrap();
        let var = a.variance();
        for i in 0..3 {
            let d = gaussian_logpdf(xs.row(i), mean.row(i), &var).unwrap();
            assert!((d - lp[i]).abs() < 1e-12);
        }
        let total = a.log_prob(&x, None, &xs).unwrap();
        assert!((total - lp.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn mode_logprob() {
        let a = mlp_actor(4);
        let x = Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap();
        let mean = a.mean(&x, None).unwrap();
        let lp = a.log_prob(&x, None, &mean).unwrap();
        let expect: f64 = a
            .variance()
            .iter()
            .map(|v| -0.5 * (2.0 * std::f64::consts::PI * v).ln())
            .sum();
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn vanishing_noise_returns_mean() {
        let mut a = mlp_actor(5);
        let beta = a.beta_id();
        a.store_mut().value_mut(beta).data_mut().iter_mut().for_each(|b| *b = -1e4);
        assert_eq!(a.variance(), vec![VARIANCE_FLOOR; 2]);
        let x = Tensor::from_rows(&[vec![0.3, 0.7], vec![-1.0, 0.2]]).unwrap();
        let (xs, lp) = a.sample(&x, None, &mut rng_from_seed(1)).unwrap();
        let mean = a.mean(&x, None).unwrap();
        for (u, v) in xs.data().iter().zip(mean.data()) {
            assert!((u - v).abs() < 1e-5);
        }
        assert!(lp.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sample_covariance_matches_softplus_beta() {
        let mut a = mlp_actor(6);
        let beta = a.beta_id();
        a.store_mut().value_mut(beta).data_mut().copy_from_slice(&[-1.0, 0.5]);
        let n = 100_000;
        let x = Tensor::from_rows(&vec![vec![0.2, -0.4]; n]).unwrap();
        let (xs, _) = a.sample(&x, None, &mut rng_from_seed(8)).unwrap();
        let mean = a.mean(&x.clone(), None).unwrap();
        let var = a.variance();
        for j in 0..2 {
            let s: f64 = (0..n).map(|i| (xs.row(i)[j] - mean.row(i)[j]).powi(2)).sum::<f64>() / n as f64;
            assert!((s / var[j] - 1.0).abs() < 0.03, "component {j}: {s} vs {}", var[j]);
        }
    }

    #[test]
    fn conv_actor_is_shift_equivariant() {
        let spec = ActorSpec::for_system(&SystemSpec::lorenz96(ObsOperator::Identity));
        let a = Actor::new(spec, &mut rng_from_seed(7)).unwrap();
        let x: Vec<f64> = (0..40).map(|j| (j as f64 * 0.37).sin() * 3.0 + 2.0).collect();
        let shifted: Vec<f64> = (0..40).map(|j| x[(j + 39) % 40]).collect();
        let out = a.mean(&Tensor::from_rows(&[x, shifted]).unwrap(), None).unwrap();
        for j in 0..40 {
            assert!((out.row(1)[j] - out.row(0)[(j + 39) % 40]).abs() < 1e-10);
        }
    }

    #[test]
    fn control_changes_output() {
        let spec = ActorSpec::for_system(&SystemSpec::allen_cahn_control());
        let a = Actor::new(spec, &mut rng_from_seed(9)).unwrap();
        let x = Tensor::from_rows(&[vec![0.1; 40]]).unwrap();
        let c0 = vec![0.0; 40];
        let mut c1 = c0.clone();
        c1[3] = 0.5;
        let o0 = a.mean(&x, Some(&c0)).unwrap();
        let o1 = a.mean(&x, Some(&c1)).unwrap();
        assert_ne!(o0, o1);
        assert!(matches!(a.mean(&x, None), Err(Error::Config(_))));
        assert!(matches!(a.mean(&Tensor::zeros(&[1, 3]), Some(&c0)), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let a = mlp_actor(10);
        let mut ckpt = Checkpoint::default();
        a.export_into(&mut ckpt).unwrap();
        let back = Actor::from_checkpoint(&Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap()).unwrap();
        let x = Tensor::from_rows(&[vec![0.123456789, -9.87654321]]).unwrap();
        assert_eq!(a.mean(&x, None).unwrap(), back.mean(&x, None).unwrap());
        assert_eq!(a.variance(), back.variance());
    }
}
