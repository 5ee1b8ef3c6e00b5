use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::FilterMethod;
use crate::ppo::TrainConfig;
use crate::ssm::{ObsOperator, SystemSpec};
use crate::surrogate::{ActorSpec, CriticSpec};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// Named benchmark configurations accepted by `--system` and by a string
/// `system` entry in the config file.
pub const PRESETS: &[&str] = &[
    "circle",
    "circle_polar",
    "lorenz63",
    "lorenz63_nonlinear",
    "lorenz96",
    "lorenz96_full",
    "allen_cahn",
    "allen_cahn_control",
];

pub fn preset(name: &str) -> Result<SystemSpec> {
    Ok(match name {
        "circle" => SystemSpec::circular_motion(ObsOperator::Identity),
        "circle_polar" => SystemSpec::circular_motion(ObsOperator::CirclePolar),
        "lorenz63" => SystemSpec::lorenz63(ObsOperator::Identity),
        "lorenz63_nonlinear" => SystemSpec::lorenz63(ObsOperator::Lorenz63Nonlinear),
        "lorenz96" => SystemSpec::lorenz96(ObsOperator::Subsample { n: 20 }),
        "lorenz96_full" => SystemSpec::lorenz96(ObsOperator::Identity),
        "allen_cahn" => SystemSpec::allen_cahn(),
        "allen_cahn_control" => SystemSpec::allen_cahn_control(),
        other => {
            return Err(Error::Config(format!(
                "unknown system preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemConfig {
    Preset(String),
    Spec(SystemSpec),
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::Preset("circle".into())
    }
}

impl SystemConfig {
    pub fn resolve(&self) -> Result<SystemSpec> {
        let spec = match self {
            SystemConfig::Preset(name) => preset(name)?,
            SystemConfig::Spec(spec) => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub k_train: usize,
    pub t_train: usize,
    pub k_test: usize,
    pub t_test: usize,
    pub seed: u64,
    /// Replaces the observation noise so that the data have this SNR.
    pub snr_db: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            k_train: 20,
            t_train: 400,
            k_test: 50,
            t_test: 500,
            seed: 0,
            snr_db: None,
        }
    }
}

/// Optional overrides of the per-system network defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub actor: Option<ActorSpec>,
    pub critic: Option<CriticSpec>,
    pub init_noise_var: Option<f64>,
    pub residual: Option<bool>,
}

impl ModelConfig {
    /// Actor and critic specs for `spec`; the control inputs follow `control`.
    pub fn resolve(&self, spec: &SystemSpec, control: bool) -> Result<(ActorSpec, CriticSpec)> {
        let dc = if control {
            if spec.control_dim() == 0 {
                return Err(Error::Config(format!("train.control set but {} has no control input", spec.name())));
            }
            spec.control_dim()
        } else {
            0
        };
        let mut actor = self.actor.clone().unwrap_or_else(|| ActorSpec::for_system(spec));
        let mut critic = self.critic.clone().unwrap_or_else(|| CriticSpec::for_system(spec));
        if let Some(v) = self.init_noise_var {
            actor.init_noise_var = v;
        }
        if let Some(r) = self.residual {
            actor.residual = r;
        }
        actor.control_dim = dc;
        critic.control_dim = dc;
        if actor.state_dim != spec.state_dim || critic.state_dim != spec.state_dim || critic.obs_dim != spec.obs_dim() {
            return Err(Error::Config(format!(
                "model dimensions do not match {} (state {}, observation {})",
                spec.name(),
                spec.state_dim,
                spec.obs_dim()
            )));
        }
        actor.validate()?;
        critic.validate()?;
        Ok((actor, critic))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub method: FilterMethod,
    pub n_particles: usize,
    pub seed: u64,
    /// Assimilate only the first `until` observations of each test trajectory.
    pub until: Option<usize>,
    pub forecast_horizon: usize,
    /// Largest lead time of the forecast RMSE; 0 skips it.
    pub rmse_f_horizon: usize,
    /// Initial conditions averaged by the forecast RMSE.
    pub rmse_f_initial: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            method: FilterMethod::Enkf,
            n_particles: 20,
            seed: 0,
            until: None,
            forecast_horizon: 50,
            rmse_f_horizon: 0,
            rmse_f_initial: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            data_dir: "data".into(),
            run_dir: "run".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks every section that does not need a dataset.
    pub fn validate(&self) -> Result<()> {
        self.system.resolve()?;
        self.train.validate()?;
        if let Some(a) = &self.model.actor {
            a.validate()?;
        }
        if let Some(c) = &self.model.critic {
            c.validate()?;
        }
        if self.eval.n_particles == 0 {
            return Err(Error::Config("eval.n_particles must be positive".into()));
        }
        if let Some(snr) = self.data.snr_db {
            if !snr.is_finite() {
                return Err(Error::Config("data.snr_db must be finite".into()));
            }
        }
        Ok(())
    }

    /// Writes the configuration with every default spelled out for the
    /// system actually used (the dataset's, once one exists).
    pub fn write_resolved(&self, dir: &Path, spec: &SystemSpec) -> Result<()> {
        let mut full = self.clone();
        full.system = SystemConfig::Spec(spec.clone());
        if let Ok((actor, critic)) = self.model.resolve(spec, self.train.control) {
            full.model.actor = Some(actor);
            full.model.critic = Some(critic);
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = serde_json::to_string_pretty(&full)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"iters": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": {"k": 3}}"#).is_err());
    }

    #[test]
    fn presets_and_full_specs_both_parse() {
        for name in PRESETS {
            let cfg: RunConfig = serde_json::from_str(&format!(r#"{{"system": "{name}"}}"#)).unwrap();
            cfg.system.resolve().unwrap();
        }
        let spec = preset("lorenz96").unwrap();
        let doc = serde_json::json!({ "system": spec });
        let cfg: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.system.resolve().unwrap(), spec);
        assert!(matches!(preset("lorenz"), Err(Error::Config(_))));
    }

    #[test]
    fn control_flag_needs_controlled_system() {
        let spec = preset("circle").unwrap();
        assert!(ModelConfig::default().resolve(&spec, true).is_err());
        let spec = preset("allen_cahn_control").unwrap();
        let (a, c) = ModelConfig::default().resolve(&spec, true).unwrap();
        assert_eq!((a.control_dim, c.control_dim), (40, 40));
        let (a, c) = ModelConfig::default().resolve(&spec, false).unwrap();
        assert_eq!((a.control_dim, c.control_dim), (0, 0));
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        cfg.write_resolved(dir.path(), &cfg.system.resolve().unwrap()).unwrap();
        let back = RunConfig::load(&dir.path().join(RESOLVED_CONFIG_FILE)).unwrap();
        back.validate().unwrap();
        assert_eq!(back.system.resolve().unwrap(), cfg.system.resolve().unwrap());
        assert_eq!(back.train, cfg.train);
    }
}
