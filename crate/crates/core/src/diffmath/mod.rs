//! Minimal reverse-mode differentiation for the actor and critic networks.

mod layers;
mod params;
mod tape;

pub use layers::{dense_forward, glorot_uniform, Activation, Dense, Mlp};
pub use params::{Checkpoint, ManifestEntry, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, BILINEAR_CHANNELS};

use crate::error::{Error, Result};

/// `ln(1 + eˣ)` without overflow for large `|x|`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus_scalar`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Diagonal Gaussian log-density `log N(x; mean, diag(var))`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != var.len() {
        return Err(Error::Dimension(format!(
            "gaussian_logpdf: lengths {}, {}, {}",
            x.len(),
            mean.len(),
            var.len()
        )));
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        if !(*vi > 0.0) {
            return Err(Error::Domain(format!("gaussian_logpdf: non-positive variance {vi}")));
        }
        let e = xi - mi;
        acc += ln2pi + vi.ln() + e * e / vi;
    }
    Ok(-0.5 * acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_values() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus_scalar(50.0) - 50.0).abs() < 1e-15);
        assert!(softplus_scalar(-800.0) > 0.0 || softplus_scalar(-800.0) == 0.0);
        assert!(softplus_scalar(-30.0) > 0.0);
        assert_eq!(softplus_scalar(1000.0), 1000.0);
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-6, 1e-2, 0.5, 3.0, 40.0] {
            let x = softplus_inverse(y);
            assert!((softplus_scalar(x) - y).abs() / y < 1e-12, "y={y}");
        }
    }

    #[test]
    fn logpdf_standard_normal_mode() {
        let v = gaussian_logpdf(&[0.0], &[0.0], &[1.0]).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
        let s2 = 0.37;
        let v = gaussian_logpdf(&[1.5], &[1.5], &[s2]).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI * s2).ln()).abs() < 1e-15);
    }

    #[test]
    fn logpdf_domain_error() {
        assert!(matches!(gaussian_logpdf(&[0.0], &[0.0], &[-1.0]), Err(Error::Domain(_))));
    }
}
