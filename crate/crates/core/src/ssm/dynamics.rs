//! Noise-free one-step maps of the benchmark systems.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Rotation of a 2-vector by `angle`.
pub fn rotate(x: &[f64], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

pub fn lorenz63_drift(u: &[f64], sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    let (x, y, z) = (u[0], u[1], u[2]);
    [sigma * (y - x), x * (rho - z) - y, x * y - beta * z]
}

/// One explicit Euler step of the Lorenz 63 equations.
pub fn lorenz63_euler(u: &[f64], sigma: f64, rho: f64, beta: f64, dt: f64) -> Vec<f64> {
    let d = lorenz63_drift(u, sigma, rho, beta);
    u.iter().zip(d).map(|(ui, di)| ui + dt * di).collect()
}

/// One classical RK4 step of the Lorenz 63 equations.
pub fn lorenz63_rk4(u: &[f64], sigma: f64, rho: f64, beta: f64, dt: f64) -> Vec<f64> {
    rk4(u, dt, |v, out| out.copy_from_slice(&lorenz63_drift(v, sigma, rho, beta)))
}

/// `dx_j/dt = x_{j−1}(x_{j+1} − x_{j−2}) − x_j + F` with cyclic indices.
pub fn lorenz96_drift(x: &[f64], forcing: f64, out: &mut [f64]) {
    let m = x.len();
    for j in 0..m {
        let jm1 = (j + m - 1) % m;
        let jm2 = (j + m - 2) % m;
        let jp1 = (j + 1) % m;
        out[j] = x[jm1] * (x[jp1] - x[jm2]) - x[j] + forcing;
    }
}

pub fn lorenz96_rk4(x: &[f64], forcing: f64, dt: f64) -> Vec<f64> {
    rk4(x, dt, |v, out| lorenz96_drift(v, forcing, out))
}

pub fn lorenz96_euler(x: &[f64], forcing: f64, dt: f64) -> Vec<f64> {
    let mut d = vec![0.0; x.len()];
    lorenz96_drift(x, forcing, &mut d);
    x.iter().zip(&d).map(|(a, b)| a + dt * b).collect()
}

fn rk4(x: &[f64], dt: f64, f: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    let m = x.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut tmp = vec![0.0; m];
    f(x, &mut k1);
    for j in 0..m {
        tmp[j] = x[j] + 0.5 * dt * k1[j];
    }
    f(&tmp, &mut k2);
    for j in 0..m {
        tmp[j] = x[j] + 0.5 * dt * k2[j];
    }
    f(&tmp, &mut k3);
    for j in 0..m {
        tmp[j] = x[j] + dt * k3[j];
    }
    f(&tmp, &mut k4);
    (0..m)
        .map(|j| x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
        .collect()
}

/// Grid points `x_j = −1 + 2j/len` of the periodic domain `[−1, 1)`.
pub fn allen_cahn_grid(len: usize) -> Vec<f64> {
    (0..len).map(|j| -1.0 + 2.0 * j as f64 / len as f64).collect()
}

/// Semi-implicit Allen–Cahn step on the periodic grid.
///
/// Solves `(I − dt·ε²·L) u' = u + dt·[μ(u − u³) + a]` where `L` is the
/// periodic second difference over spacing `2/len`. The solve is carried out
/// for the correction `u' − rhs`, which is exactly zero for constant `rhs`.
pub fn allen_cahn_step(u: &[f64], control: Option<&[f64]>, epsilon: f64, mu: f64, dt: f64) -> Result<Vec<f64>> {
    let n = u.len();
    if n < 3 {
        return Err(Error::Config(format!("Allen–Cahn grid needs at least 3 points, got {n}")));
    }
    if let Some(a) = control {
        if a.len() != n {
            return Err(Error::Dimension(format!("control length {} vs grid {n}", a.len())));
        }
    }
    let rhs: Vec<f64> = (0..n)
        .map(|j| {
            let uj = u[j];
            let a = control.map_or(0.0, |c| c[j]);
            uj + dt * (mu * (uj - uj * uj * uj) + a)
        })
        .collect();
    let dx = 2.0 / n as f64;
    let r = dt * epsilon * epsilon / (dx * dx);
    let lap: Vec<f64> = (0..n)
        .map(|j| r * (rhs[(j + n - 1) % n] - 2.0 * rhs[j] + rhs[(j + 1) % n]))
        .collect();
    if lap.iter().all(|&v| v == 0.0) {
        return Ok(rhs);
    }
    let delta = solve_cyclic_tridiagonal(-r, 1.0 + 2.0 * r, -r, &lap)?;
    Ok(rhs.iter().zip(&delta).map(|(a, b)| a + b).collect())
}

/// Solves the constant-coefficient periodic tridiagonal system with
/// sub-diagonal `lo`, diagonal `diag`, super-diagonal `up` and matching
/// corner entries (Sherman–Morrison on top of the Thomas algorithm).
fn solve_cyclic_tridiagonal(lo: f64, diag: f64, up: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    let (alpha, beta) = (lo, up); // bottom-left and top-right corners
    let gamma = -diag;
    let mut b = vec![diag; n];
    b[0] = diag - gamma;
    b[n - 1] = diag - alpha * beta / gamma;
    let x = thomas(lo, &b, up, rhs)?;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = thomas(lo, &b, up, &u)?;
    let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    Ok(x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect())
}

fn thomas(lo: f64, diag: &[f64], up: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::Numeric("singular tridiagonal system".into()));
    }
    c[0] = up / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lo * c[i - 1];
        if denom == 0.0 {
            return Err(Error::Numeric("singular tridiagonal system".into()));
        }
        c[i] = up / denom;
        d[i] = (rhs[i] - lo * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

/// Distributed control `a(x, t) = amplitude·sin(πx)·cos(πt)` on the grid.
pub fn allen_cahn_control(grid: &[f64], amplitude: f64, time: f64) -> Vec<f64> {
    grid.iter().map(|&x| amplitude * (PI * x).sin() * (PI * time).cos()).collect()
}
