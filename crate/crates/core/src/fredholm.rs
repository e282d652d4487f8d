//! Discrete Fredholm equation for the efficient weight function.
//!
//! On the event grid the kernel factors as `K = P L P` where `P` is the
//! diagonal of `P(0, t_k)` and `L` is the min-kernel of the rescaled
//! `C_n` jumps, whose inverse is tridiagonal. The equation
//! `(I + K B) psi = K r` therefore reduces to `psi = P g^{-1} P r` with
//! `g = L^{-1} + P B P` symmetric tridiagonal, solved in `O(m)`.
//! The right-hand side weights `rho_{-Gamma-dot}` by the jumps `N.(dt)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::transform::TransformEstimate;

/// Relative threshold under which `rho_{-Gamma-dot}` is treated as zero.
pub const RHO_ZERO_TOL: f64 = 1e-14;

/// Symmetric tridiagonal system `g` with the right-hand side ingredients.
#[derive(Debug, Clone)]
pub struct FredholmSystem {
    pub g_diag: Vec<f64>,
    /// `g_{i,i+1}`, length `m - 1`.
    pub g_off: Vec<f64>,
    /// `m x d` plug-in `rho_{-Gamma-dot}` at the grid times.
    pub rho: DMatrix<f64>,
    /// Magnitude of the terms cancelling in `rho_{-Gamma-dot}`.
    pub rho_scale: f64,
    pub p_diag: Vec<f64>,
    /// `N.(dt_k)`.
    pub dn: Vec<f64>,
    pub b_jumps: Vec<f64>,
}

/// `g` from the rescaled jumps `c_i = P_i^2 / C_i` and `b_i = P_i^2 B_i`.
pub fn tridiagonal_from_jumps(c: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = c.len();
    let diag = (0..m).map(|i| if i + 1 < m { c[i] + c[i + 1] + b[i] } else { c[i] + b[i] }).collect();
    let off = (0..m.saturating_sub(1)).map(|i| -c[i + 1]).collect();
    (diag, off)
}

pub fn build_system(est: &TransformEstimate) -> Result<FredholmSystem> {
    let m = est.m();
    let d = est.dim();
    let p = &est.prodint.from_origin;
    let mut c = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for k in 0..m {
        let cj = est.cb.c_jumps[k];
        if !(cj > 0.0) {
            return Err(Error::ZeroCJump { index: k });
        }
        c.push(p[k] * p[k] / cj);
        b.push(p[k] * p[k] * est.cb.b_jumps[k]);
    }
    let (g_diag, g_off) = tridiagonal_from_jumps(&c, &b);
    let mut rho = DMatrix::zeros(m, d);
    let mut rho_scale: f64 = 0.0;
    for k in 0..m {
        for j in 0..d {
            let raw = est.cb.rho[(k, j)];
            let shift = est.cb.v[k] * est.gamma_dot[(k, j)];
            rho[(k, j)] = raw + shift;
            rho_scale = rho_scale.max(raw.abs() + shift.abs());
        }
    }
    Ok(FredholmSystem {
        g_diag,
        g_off,
        rho,
        rho_scale,
        p_diag: p.clone(),
        dn: (0..m).map(|k| est.dn(k)).collect(),
        b_jumps: est.cb.b_jumps.clone(),
    })
}

/// Solves `g X = rhs` for symmetric tridiagonal `g` by `LDL'` elimination.
pub fn solve_symmetric_tridiagonal(diag: &[f64], off: &[f64], rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = diag.len();
    if rhs.nrows() != m || off.len() != m.saturating_sub(1) {
        return Err(Error::DimensionMismatch { expected: m, found: rhs.nrows() });
    }
    let mut pivots = Vec::with_capacity(m);
    let mut lower = Vec::with_capacity(m.saturating_sub(1));
    for i in 0..m {
        let piv = if i == 0 { diag[0] } else { diag[i] - lower[i - 1] * off[i - 1] };
        if !(piv > 0.0) || !piv.is_finite() {
            return Err(Error::NotPositiveDefinite { index: i, pivot: piv });
        }
        pivots.push(piv);
        if i + 1 < m {
            lower.push(off[i] / piv);
        }
    }
    let mut x = rhs.clone();
    for col in 0..x.ncols() {
        for i in 1..m {
            let prev = x[(i - 1, col)];
            x[(i, col)] -= lower[i - 1] * prev;
        }
        for i in 0..m {
            x[(i, col)] /= pivots[i];
        }
        for i in (0..m.saturating_sub(1)).rev() {
            let next = x[(i + 1, col)];
            x[(i, col)] -= lower[i] * next;
        }
    }
    Ok(x)
}

/// Solution `psi = phi + Gamma-dot` of the discrete Fredholm equation.
#[derive(Debug, Clone)]
pub struct FredholmSolution {
    /// `m x d`.
    pub psi: DMatrix<f64>,
    /// `m x d`, `phi = psi - Gamma-dot`.
    pub phi: DMatrix<f64>,
    pub system: FredholmSystem,
    /// True when `rho_{-Gamma-dot}` or `B_n` vanished and `psi = 0` was set.
    pub degenerate: bool,
}

impl FredholmSolution {
    /// Dense `g`, for diagnostics.
    pub fn g_matrix(&self) -> DMatrix<f64> {
        let m = self.system.g_diag.len();
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                self.system.g_diag[i]
            } else if j == i + 1 {
                self.system.g_off[i]
            } else if i == j + 1 {
                self.system.g_off[j]
            } else {
                0.0
            }
        })
    }
}

/// Right-hand side `P (rho o N.(dt))`.
fn weighted_rhs(system: &FredholmSystem) -> DMatrix<f64> {
    let mut r = system.rho.clone();
    for k in 0..r.nrows() {
        let w = system.p_diag[k] * system.dn[k];
        r.row_mut(k).scale_mut(w);
    }
    r
}

pub fn solve_phi(system: FredholmSystem, gamma_dot: &DMatrix<f64>) -> Result<FredholmSolution> {
    let (m, d) = gamma_dot.shape();
    let rho_max = system.rho.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let no_b = system.b_jumps.iter().all(|&b| b == 0.0);
    let degenerate = no_b || rho_max < RHO_ZERO_TOL * system.rho_scale.max(f64::MIN_POSITIVE) || rho_max == 0.0;
    let psi = if degenerate {
        DMatrix::zeros(m, d)
    } else {
        let y = solve_symmetric_tridiagonal(&system.g_diag, &system.g_off, &weighted_rhs(&system))?;
        let mut psi = y;
        for k in 0..m {
            psi.row_mut(k).scale_mut(system.p_diag[k]);
        }
        psi
    };
    let phi = &psi - gamma_dot;
    Ok(FredholmSolution { psi, phi, system, degenerate })
}

/// Builds and solves the system at the estimate's `theta`.
pub fn solve(est: &TransformEstimate) -> Result<FredholmSolution> {
    solve_phi(build_system(est)?, &est.gamma_dot)
}

/// Max-norm of `(I + K B) psi - K (rho o N.(dt))` with the dense kernel.
pub fn fredholm_residual(solution: &FredholmSolution, est: &TransformEstimate) -> f64 {
    let k = est.kernel_matrix();
    let m = est.m();
    let mut kb = k.clone();
    for j in 0..m {
        kb.column_mut(j).scale_mut(solution.system.b_jumps[j]);
    }
    let mut rho_dn = solution.system.rho.clone();
    for j in 0..m {
        rho_dn.row_mut(j).scale_mut(solution.system.dn[j]);
    }
    let lhs = &solution.psi + kb * &solution.psi;
    let rhs = k * rho_dn;
    (lhs - rhs).iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}
