use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::Transition;
use crate::error::{Error, Result};
use crate::rng::{standard_normal, SimRng};
use crate::ssm::{Dynamics, GaussianPrior, ObsOperator, SystemSpec};
use crate::tensor::Tensor;

/// Linear-Gaussian state-space model `x' = A x + ξ`, `y = H x + η`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussian {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearGaussian {
    /// Diagonal `Q` and `R`, required when used as an ensemble transition.
    pub fn diagonal(a: DMatrix<f64>, q: &[f64], h: DMatrix<f64>, r: &[f64]) -> Self {
        LinearGaussian {
            a,
            q: DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            h,
            r: DMatrix::from_diagonal(&DVector::from_column_slice(r)),
        }
    }

    /// The linear-Gaussian form of a benchmark system, when it has one
    /// (circular motion observed through the identity).
    pub fn from_system(spec: &SystemSpec) -> Option<Self> {
        match (&spec.dynamics, &spec.observation) {
            (Dynamics::CircularMotion { angle }, ObsOperator::Identity) => {
                let (s, c) = angle.sin_cos();
                let a = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
                Some(LinearGaussian::diagonal(a, &spec.process_noise, DMatrix::identity(2, 2), &spec.obs_noise))
            }
            _ => None,
        }
    }

    pub fn simulate<R: Rng + ?Sized>(&self, x0: &[f64], len: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = self.a.nrows();
        let mut x = DVector::from_column_slice(x0);
        let (mut xs, mut ys) = (vec![x0.to_vec()], Vec::with_capacity(len));
        let qs: Vec<f64> = (0..m).map(|i| self.q[(i, i)].max(0.0).sqrt()).collect();
        let rs: Vec<f64> = (0..self.h.nrows()).map(|i| self.r[(i, i)].max(0.0).sqrt()).collect();
        for _ in 0..len {
            x = &self.a * &x;
            for i in 0..m {
                x[i] += qs[i] * standard_normal(rng);
            }
            let mut y = &self.h * &x;
            for (i, s) in rs.iter().enumerate() {
                y[i] += s * standard_normal(rng);
            }
            xs.push(x.iter().copied().collect());
            ys.push(y.iter().copied().collect());
        }
        (xs, ys)
    }
}

impl Transition for LinearGaussian {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn propagate(&self, particles: &Tensor, _control: Option<&[f64]>, rng: &mut SimRng) -> Result<Tensor> {
        let m = self.a.nrows();
        if particles.cols() != m {
            return Err(Error::Dimension(format!("particles of width {} for A of size {m}", particles.cols())));
        }
        let qs: Vec<f64> = (0..m).map(|i| self.q[(i, i)].max(0.0).sqrt()).collect();
        let mut out = Tensor::zeros(&[particles.rows(), m]);
        for (i, row) in particles.row_iter().enumerate() {
            let dst = out.row_mut(i);
            for r in 0..m {
                let mut s = 0.0;
                for c in 0..m {
                    s += self.a[(r, c)] * row[c];
                }
                dst[r] = s + qs[r] * standard_normal(rng);
            }
        }
        Ok(out)
    }
}

/// Exact Gaussian filtering belief `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl KalmanBelief {
    pub fn from_prior(prior: &GaussianPrior) -> Self {
        KalmanBelief {
            mean: DVector::from_column_slice(&prior.mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(&prior.var)),
        }
    }
}

pub fn kf_predict(belief: &KalmanBelief, a: &DMatrix<f64>, q: &DMatrix<f64>) -> KalmanBelief {
    KalmanBelief {
        mean: a * &belief.mean,
        cov: a * &belief.cov * a.transpose() + q,
    }
}

/// Update with `y`; also returns `log N(y; H m, H P Hᵀ + R)`.
pub fn kf_update(prior: &KalmanBelief, y: &[f64], h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(KalmanBelief, f64)> {
    if y.len() != h.nrows() {
        return Err(Error::Dimension(format!("observation of length {} for H with {} rows", y.len(), h.nrows())));
    }
    let innov = DVector::from_column_slice(y) - h * &prior.mean;
    let s = h * &prior.cov * h.transpose() + r;
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("innovation covariance not positive definite".into()))?;
    let z = chol.l().solve_lower_triangular(&innov).expect("Cholesky factor is invertible");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let n = y.len() as f64;
    let loglik = -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + z.norm_squared());
    let gain = chol.solve(&(h * &prior.cov)).transpose();
    let m = prior.mean.len();
    let ikh = DMatrix::identity(m, m) - &gain * h;
    let cov = &ikh * &prior.cov * ikh.transpose() + &gain * r * gain.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((
        KalmanBelief {
            mean: &prior.mean + &gain * innov,
            cov,
        },
        loglik,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_update_by_hand() {
        // Prior N(0, 1), H = 1, R = 1, y = 2: posterior N(1, 0.5), evidence N(2; 0, 2).
        let b = KalmanBelief {
            mean: DVector::from_element(1, 0.0),
            cov: DMatrix::from_element(1, 1, 1.0),
        };
        let one = DMatrix::from_element(1, 1, 1.0);
        let (post, ll) = kf_update(&b, &[2.0], &one, &one).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
        let expect = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 4.0 / 2.0);
        assert!((ll - expect).abs() < 1e-14);
    }

    #[test]
    fn predict_rotates_covariance() {
        let b = KalmanBelief {
            mean: DVector::from_column_slice(&[1.0, 0.0]),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 0.5])),
        };
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let p = kf_predict(&b, &a, &DMatrix::zeros(2, 2));
        assert_eq!(p.mean.as_slice(), &[0.0, 1.0]);
        assert!((p.cov[(0, 0)] - 0.5).abs() < 1e-15 && (p.cov[(1, 1)] - 2.0).abs() < 1e-15);
    }
}
