//! Trajectory generation and the JSON Lines dataset format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SystemSpec;
use crate::error::{Error, Result};
use crate::rng::streams;

/// One trajectory. Index conventions: `y[t]` is `y_{t+1}`, `x[t]` is `x_t`
/// (so `x` has one more entry than `y`), `c[t]` is `c_t`, and `obs_idx[t]`
/// holds the components observed in `y[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub id: usize,
    pub y: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_idx: Option<Vec<Vec<usize>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.y.len();
        let bad = |what: &str, got: usize, want: usize| {
            Err(Error::Dimension(format!(
                "trajectory {}: {what} has {got} entries, expected {want}",
                self.id
            )))
        };
        if let Some(x) = &self.x {
            if x.len() != t + 1 {
                return bad("x", x.len(), t + 1);
            }
        }
        if let Some(c) = &self.c {
            if c.len() != t {
                return bad("c", c.len(), t);
            }
        }
        if let Some(i) = &self.obs_idx {
            if i.len() != t {
                return bad("obs_idx", i.len(), t);
            }
        }
        Ok(())
    }

    pub fn control(&self, t: usize) -> Option<&[f64]> {
        self.c.as_ref().map(|c| c[t].as_slice())
    }

    pub fn indices(&self, t: usize) -> Option<&[usize]> {
        self.obs_idx.as_ref().map(|i| i[t].as_slice())
    }

    /// Same trajectory restricted to the first `len` observations.
    pub fn truncated(&self, len: usize) -> Trajectory {
        let len = len.min(self.len());
        Trajectory {
            id: self.id,
            y: self.y[..len].to_vec(),
            x: self.x.as_ref().map(|x| x[..=len].to_vec()),
            c: self.c.as_ref().map(|c| c[..len].to_vec()),
            obs_idx: self.obs_idx.as_ref().map(|i| i[..len].to_vec()),
        }
    }

    /// Drops the states, as for training data.
    pub fn observations_only(mut self) -> Trajectory {
        self.x = None;
        self
    }
}

/// Sidecar header describing a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub system: SystemSpec,
    pub seed: u64,
    pub train_count: usize,
    pub train_length: usize,
    pub test_count: usize,
    pub test_length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub system: SystemSpec,
    pub seed: u64,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

pub const HEADER_FILE: &str = "header.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

/// Simulates one trajectory of `len` observations from its own seed.
pub fn simulate_trajectory(spec: &SystemSpec, id: usize, len: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = crate::rng::rng_from_seed(seed);
    let (mut x, amp) = spec.sample_initial(&mut rng)?;
    let mut xs = Vec::with_capacity(len + 1);
    let mut ys = Vec::with_capacity(len);
    let mut cs = amp.map(|_| Vec::with_capacity(len));
    let mut idxs = spec.observation.is_time_varying().then(|| Vec::with_capacity(len));
    xs.push(x.clone());
    for t in 0..len {
        let c = spec.control_at(amp, t);
        x = spec.transition(&x, c.as_deref(), &mut rng)?;
        let (y, idx) = spec.observation.observe(&x, &spec.obs_noise, &mut rng)?;
        if let (Some(cs), Some(c)) = (cs.as_mut(), c) {
            cs.push(c);
        }
        if let (Some(is), Some(i)) = (idxs.as_mut(), idx) {
            is.push(i);
        }
        xs.push(x.clone());
        ys.push(y);
    }
    Ok(Trajectory {
        id,
        y: ys,
        x: Some(xs),
        c: cs,
        obs_idx: idxs,
    })
}

/// Generates `k_train` observation-only training trajectories of length `t1`
/// and `k_test` full test trajectories of length `t2`. Output is a pure
/// function of `(spec, counts, seed)`.
pub fn generate_dataset(
    spec: &SystemSpec,
    k_train: usize,
    t1: usize,
    k_test: usize,
    t2: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if (k_train > 0 && t1 == 0) || (k_test > 0 && t2 == 0) {
        return Err(Error::Config("trajectory lengths must be positive".into()));
    }
    let train = (0..k_train)
        .map(|k| {
            let s = crate::rng::derive_seed(seed, streams::TRAIN_TRAJECTORY, k as u64);
            simulate_trajectory(spec, k, t1, s).map(Trajectory::observations_only)
        })
        .collect::<Result<Vec<_>>>()?;
    let test = (0..k_test)
        .map(|k| simulate_trajectory(spec, k, t2, crate::rng::derive_seed(seed, streams::TEST_TRAJECTORY, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        system: spec.clone(),
        seed,
        train,
        test,
    })
}

/// Observation-noise variance for a target SNR (dB):
/// `σ² = P_signal / 10^(snr_db/10)`, where `P_signal` is the mean squared
/// deviation of the noise-free observations from their per-component means.
pub fn snr_to_sigma(spec: &SystemSpec, snr_db: f64, clean_observations: &[Vec<f64>]) -> Result<Vec<f64>> {
    if clean_observations.is_empty() {
        return Err(Error::Contract("snr_to_sigma needs a non-empty signal sample".into()));
    }
    if !snr_db.is_finite() && snr_db != f64::INFINITY {
        return Err(Error::Config(format!("invalid SNR {snr_db}")));
    }
    let n = spec.obs_dim();
    if clean_observations.iter().any(|y| y.len() != n) {
        return Err(Error::Dimension(format!("signal sample rows must have length {n}")));
    }
    let count = clean_observations.len() as f64;
    let mut means = vec![0.0; n];
    for y in clean_observations {
        means.iter_mut().zip(y).for_each(|(m, v)| *m += v / count);
    }
    let power = clean_observations
        .iter()
        .flat_map(|y| y.iter().zip(&means).map(|(v, m)| (v - m) * (v - m)))
        .sum::<f64>()
        / (count * n as f64);
    let var = power / 10f64.powf(snr_db / 10.0);
    Ok(vec![var; n])
}

/// Length of the noise-free run used to measure signal power.
const SNR_SAMPLE_LEN: usize = 1000;

impl SystemSpec {
    /// Copy of `self` whose observation noise realises `snr_db`, measured on
    /// a noise-free observation run drawn from `seed`.
    pub fn with_snr(&self, snr_db: f64, seed: u64) -> Result<SystemSpec> {
        let mut clean = self.clone();
        clean.obs_noise = vec![0.0; self.obs_dim()];
        let traj = simulate_trajectory(&clean, 0, SNR_SAMPLE_LEN, crate::rng::derive_seed(seed, streams::SNR, 0))?;
        let mut out = self.clone();
        out.obs_noise = snr_to_sigma(self, snr_db, &traj.y)?;
        Ok(out)
    }
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            system: self.system.clone(),
            seed: self.seed,
            train_count: self.train.len(),
            train_length: self.train.first().map_or(0, Trajectory::len),
            test_count: self.test.len(),
            test_length: self.test.first().map_or(0, Trajectory::len),
        }
    }

    /// Writes `header.json`, `train.jsonl` and `test.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header_path = dir.join(HEADER_FILE);
        let header = serde_json::to_string_pretty(&self.header())?;
        std::fs::write(&header_path, header + "\n").map_err(|e| Error::io(&header_path, e))?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(TEST_FILE), &self.test)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join(HEADER_FILE);
        let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: DatasetHeader = serde_json::from_str(&text)?;
        header.system.validate()?;
        let train = read_jsonl(&dir.join(TRAIN_FILE))?;
        let test = read_jsonl(&dir.join(TEST_FILE))?;
        Ok(Dataset {
            system: header.system,
            seed: header.seed,
            train,
            test,
        })
    }
}

pub fn write_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::ObsOperator;

    #[test]
    fn circular_dataset_shapes() {
        let spec = SystemSpec::circular_motion(ObsOperator::Identity);
        let ds = generate_dataset(&spec, 20, 400, 50, 500, 1).unwrap();
        assert_eq!(ds.train.len(), 20);
        assert!(ds.train.iter().all(|t| t.len() == 400 && t.x.is_none()));
        assert_eq!(ds.test.len(), 50);
        assert!(ds.test.iter().all(|t| t.len() == 500 && t.x.as_ref().unwrap().len() == 501));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SystemSpec::lorenz96(ObsOperator::Subsample { n: 20 });
        let a = generate_dataset(&spec, 2, 30, 1, 30, 77).unwrap();
        let b = generate_dataset(&spec, 2, 30, 1, 30, 77).unwrap();
        assert_eq!(a, b);
        assert!(a.train.iter().all(|t| t.obs_idx.as_ref().unwrap().len() == 30));
        let c = generate_dataset(&spec, 2, 30, 1, 30, 78).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn allen_cahn_control_trajectories_carry_controls() {
        let spec = SystemSpec::allen_cahn_control();
        let ds = generate_dataset(&spec, 2, 200, 1, 200, 3).unwrap();
        for t in ds.train.iter().chain(&ds.test) {
            let c = t.c.as_ref().unwrap();
            assert_eq!(c.len(), 200);
            assert!(c.iter().all(|ct| ct.len() == 40));
            // c_0 = U_c sin(πx) with U_c in [0.4, 0.6]
            let peak = c[0].iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.35 && peak < 0.6);
        }
    }

    #[test]
    fn snr_formula() {
        let spec = SystemSpec::lorenz63(ObsOperator::Identity);
        // Components ±2 around zero: centered power 4.
        let sample = vec![vec![2.0, -2.0, 2.0], vec![-2.0, 2.0, -2.0]];
        let v = snr_to_sigma(&spec, 20.0, &sample).unwrap();
        assert!(v.iter().all(|&s| (s - 0.04).abs() < 1e-15));
        assert!(snr_to_sigma(&spec, 0.0, &sample).unwrap().iter().all(|&s| (s - 4.0).abs() < 1e-15));
        assert_eq!(snr_to_sigma(&spec, f64::INFINITY, &sample).unwrap(), vec![0.0; 3]);
        assert!(matches!(snr_to_sigma(&spec, 5.0, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn truncation_keeps_alignment() {
        let spec = SystemSpec::allen_cahn_control();
        let t = simulate_trajectory(&spec, 0, 10, 4).unwrap();
        let s = t.truncated(4);
        s.validate().unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.x.as_ref().unwrap()[4], t.x.as_ref().unwrap()[4]);
    }
}
