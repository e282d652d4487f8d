//! Score equation, Fisher scoring and plug-in information matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::HazardFamily;
use crate::fredholm::{self, FredholmSolution};
use crate::sample::{EventGrid, SurvivalSample};
use crate::transform::{self, TransformEstimate};

/// Choice of the weight function `phi` in the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    /// Solution of the Fredholm equation.
    #[default]
    Efficient,
    /// `phi = -Gamma-dot`, the modified partial-likelihood score.
    MinusGammaDot,
    /// `phi = 0`.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub tolerance: f64,
    pub max_iter: usize,
    pub phi_mode: PhiMode,
    pub max_halvings: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { tolerance: 1e-8, max_iter: 50, phi_mode: PhiMode::Efficient, max_halvings: 10 }
    }
}

/// A sample, its event grid and a hazard family.
pub struct SurvivalModel<'a> {
    pub sample: &'a SurvivalSample,
    pub grid: EventGrid,
    pub family: &'a dyn HazardFamily,
}

impl<'a> SurvivalModel<'a> {
    pub fn new(sample: &'a SurvivalSample, family: &'a dyn HazardFamily, tau: Option<f64>) -> Result<Self> {
        let grid = EventGrid::new(sample, tau)?;
        if grid.is_empty() {
            return Err(Error::InvalidInput("no uncensored observation on [0, tau]".into()));
        }
        Ok(SurvivalModel { sample, grid, family })
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn dim(&self) -> usize {
        self.sample.dim()
    }

    pub fn transform(&self, theta: &[f64]) -> Result<TransformEstimate> {
        transform::transform(self.sample, &self.grid, self.family, theta)
    }

    /// Transform and weight function at `theta`.
    pub fn state(&self, theta: &[f64], mode: PhiMode) -> Result<(TransformEstimate, FredholmSolution)> {
        let est = self.transform(theta)?;
        let sol = weight_function(&est, mode)?;
        Ok((est, sol))
    }

    /// `U_n(theta)` with `phi` chosen by `mode`.
    pub fn score(&self, theta: &[f64], mode: PhiMode) -> Result<DVector<f64>> {
        let (est, sol) = self.state(theta, mode)?;
        Ok(score(&est, &sol.phi))
    }
}

/// Weight function for the given mode, packaged like a Fredholm solution.
pub fn weight_function(est: &TransformEstimate, mode: PhiMode) -> Result<FredholmSolution> {
    let system = fredholm::build_system(est)?;
    match mode {
        PhiMode::Efficient => fredholm::solve_phi(system, &est.gamma_dot),
        PhiMode::MinusGammaDot => {
            let (m, d) = est.gamma_dot.shape();
            Ok(FredholmSolution { psi: DMatrix::zeros(m, d), phi: -est.gamma_dot.clone(), system, degenerate: true })
        }
        PhiMode::Zero => {
            let (m, d) = est.gamma_dot.shape();
            Ok(FredholmSolution { psi: est.gamma_dot.clone(), phi: DMatrix::zeros(m, d), system, degenerate: true })
        }
    }
}

/// `U_n = n^-1 sum_i int [b_1i - b_2i phi] dN_i` with `b_1 = ldot - Sdot/S`
/// and `b_2 = l' - S'/S` at `Gamma(t-)`.
pub fn score(est: &TransformEstimate, phi: &DMatrix<f64>) -> DVector<f64> {
    let d = est.dim();
    let mut u = DVector::zeros(d);
    for (k, agg) in est.path.aggregates.iter().enumerate() {
        let dn = est.dn(k);
        let b2 = agg.fail_l_x - dn * agg.s_prime / agg.s;
        for j in 0..d {
            let b1 = agg.fail_l_theta[j] - dn * agg.s_dot[j] / agg.s;
            u[j] += b1 - b2 * phi[(k, j)];
        }
    }
    u
}

#[derive(Debug, Clone)]
pub struct Covariances {
    pub sigma1: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// `m x d` plug-in `rho_phi = rho - v phi`.
    pub rho_phi: DMatrix<f64>,
}

/// Plug-in `Sigma_1n`, `Sigma_2n` and their sum.
pub fn covariance_matrices(est: &TransformEstimate, phi: &DMatrix<f64>) -> Covariances {
    let m = est.m();
    let d = est.dim();
    let mut sigma1 = DMatrix::zeros(d, d);
    let mut rho_phi = DMatrix::zeros(m, d);
    for k in 0..m {
        let dn = est.dn(k);
        let v = est.cb.v[k];
        let rho = est.cb.rho.row(k).transpose();
        let ph = phi.row(k).transpose();
        let vphi = &est.cb.v_bar[k] + &ph * ph.transpose() * v - &rho * ph.transpose() - &ph * rho.transpose();
        sigma1 += vphi * dn;
        rho_phi.set_row(k, &(rho - ph * v).transpose());
    }
    // K = P L P with L the min-kernel of C_j / P_j^2: the double sum
    // collapses to sum_j C_j / P_j^2 a_j a_j' with a_j = sum_{k >= j} P_k rho_phi_k dN_k.
    let p = &est.prodint.from_origin;
    let mut sigma2 = DMatrix::zeros(d, d);
    let mut tail = DVector::<f64>::zeros(d);
    for j in (0..m).rev() {
        tail += rho_phi.row(j).transpose() * (p[j] * est.dn(j));
        let w = est.cb.c_jumps[j] / (p[j] * p[j]);
        sigma2 += &tail * tail.transpose() * w;
    }
    let sigma1 = (&sigma1 + sigma1.transpose()) * 0.5;
    let sigma2 = (&sigma2 + sigma2.transpose()) * 0.5;
    let sigma = &sigma1 + &sigma2;
    Covariances { sigma1, sigma2, sigma, rho_phi }
}

/// Uncentered second moment `sum_k N.(dt_k) max_j M_jj / S`, the size
/// `Sigma_n` is compared against when judging singularity.
fn information_scale(est: &TransformEstimate) -> f64 {
    est.path
        .aggregates
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let mx = (0..a.m_theta_theta.nrows()).fold(0.0_f64, |acc, j| acc.max(a.m_theta_theta[(j, j)]));
            est.dn(k) * mx / a.s
        })
        .sum()
}

/// Converged (or last) state of the scoring iteration.
#[derive(Debug, Clone)]
pub struct ScoreFit {
    pub theta_hat: Vec<f64>,
    pub score: DVector<f64>,
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub phi_mode: PhiMode,
    pub sigma1: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_inv: DMatrix<f64>,
    /// `sqrt(diag(Sigma_n^-1) / n)`; only for the efficient weight.
    pub se: Option<Vec<f64>>,
    pub rho_phi: DMatrix<f64>,
    pub transform: TransformEstimate,
    pub phi: FredholmSolution,
    pub n: usize,
}

impl ScoreFit {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations,
                score_norm: self.score_norm,
                theta: self.theta_hat.clone(),
            })
        }
    }

    /// Two-sided Wald p-values.
    pub fn p_values(&self) -> Option<Vec<f64>> {
        let se = self.se.as_ref()?;
        Some(self.theta_hat.iter().zip(se).map(|(t, s)| 2.0 * normal_upper_tail((t / s).abs())).collect())
    }
}

pub(crate) fn normal_upper_tail(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// Inverse of a symmetric matrix, rejecting (near-)singular input.
pub fn symmetric_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetric_inverse_scaled(a, 0.0)
}

/// As [`symmetric_inverse`], with eigenvalues below `1e-12 * max(scale, |lambda|_max)`
/// treated as zero.
pub fn symmetric_inverse_scaled(a: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::InvalidInput("empty matrix".into()))?;
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if !(lmin.abs() > 1e-12 * lmax.max(scale).max(1e-300)) {
        return Err(Error::SingularInformation {
            eigenvalue: lmin,
            direction: eig.eigenvectors.column(imin).iter().copied().collect(),
        });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

struct Evaluation {
    theta: Vec<f64>,
    est: TransformEstimate,
    sol: FredholmSolution,
    u: DVector<f64>,
    norm: f64,
}

fn evaluate(model: &SurvivalModel<'_>, theta: &[f64], mode: PhiMode) -> Result<Evaluation> {
    let (est, sol) = model.state(theta, mode)?;
    let u = score(&est, &sol.phi);
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score"));
    }
    let norm = inf_norm(&u);
    Ok(Evaluation { theta: theta.to_vec(), est, sol, u, norm })
}

/// Central-difference Jacobian of `-U_n`.
pub fn numerical_information(model: &SurvivalModel<'_>, theta: &[f64], mode: PhiMode) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let mut j = DMatrix::zeros(d, d);
    for c in 0..d {
        let h = 1e-5 * theta[c].abs().max(1.0);
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[c] += h;
        dn[c] -= h;
        let du = model.score(&up, mode)? - model.score(&dn, mode)?;
        j.set_column(c, &(-du / (2.0 * h)));
    }
    Ok(j)
}

fn try_step(
    model: &SurvivalModel<'_>,
    cur: &Evaluation,
    step: &DVector<f64>,
    mode: PhiMode,
    halvings: usize,
) -> Option<Evaluation> {
    let mut scale = 1.0;
    for _ in 0..=halvings {
        let cand: Vec<f64> = cur.theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
        if let Ok(ev) = evaluate(model, &cand, mode) {
            if ev.norm < cur.norm {
                return Some(ev);
            }
        }
        scale *= 0.5;
    }
    None
}

fn scoring(
    model: &SurvivalModel<'_>,
    theta0: &[f64],
    config: &FitConfig,
    mode: PhiMode,
) -> Result<(Evaluation, usize, bool)> {
    let mut cur = evaluate(model, theta0, mode)?;
    let mut iterations = 0;
    while iterations < config.max_iter {
        if cur.norm < config.tolerance {
            return Ok((cur, iterations, true));
        }
        iterations += 1;
        let cov = covariance_matrices(&cur.est, &cur.sol.phi);
        let fisher_step = symmetric_inverse(&cov.sigma).ok().map(|inv| inv * &cur.u);
        let next = fisher_step.and_then(|s| try_step(model, &cur, &s, mode, config.max_halvings)).or_else(|| {
            let info = numerical_information(model, &cur.theta, mode).ok()?;
            let step = info.lu().solve(&cur.u)?;
            try_step(model, &cur, &step, mode, config.max_halvings)
        });
        match next {
            Some(ev) => cur = ev,
            None => break,
        }
    }
    let ok = cur.norm < config.tolerance;
    Ok((cur, iterations, ok))
}

/// Solves `U_n(theta) = 0` by Fisher scoring with `Sigma_n` as the scoring
/// matrix, step halving, and a numerical-Jacobian Newton fallback.
///
/// Without `theta0` the iteration is warm-started from the root of the
/// score with `phi = -Gamma-dot`, itself started at zero.
pub fn fit(model: &SurvivalModel<'_>, theta0: Option<&[f64]>, config: &FitConfig) -> Result<ScoreFit> {
    let d = model.dim();
    let start = match theta0 {
        Some(t) => {
            if t.len() != d {
                return Err(Error::DimensionMismatch { expected: d, found: t.len() });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("theta0"));
            }
            t.to_vec()
        }
        None if config.phi_mode == PhiMode::Efficient => {
            let zero = vec![0.0; d];
            let warm = FitConfig { tolerance: config.tolerance.max(1e-6), ..*config };
            match scoring(model, &zero, &warm, PhiMode::MinusGammaDot) {
                Ok((ev, _, _)) => ev.theta,
                Err(_) => zero,
            }
        }
        None => vec![0.0; d],
    };
    let (ev, iterations, converged) = scoring(model, &start, config, config.phi_mode)?;
    let cov = covariance_matrices(&ev.est, &ev.sol.phi);
    let sigma_inv = symmetric_inverse_scaled(&cov.sigma, information_scale(&ev.est))?;
    let se = (config.phi_mode == PhiMode::Efficient)
        .then(|| (0..d).map(|j| (sigma_inv[(j, j)].max(0.0) / model.n() as f64).sqrt()).collect());
    Ok(ScoreFit {
        theta_hat: ev.theta,
        score_norm: ev.norm,
        score: ev.u,
        iterations,
        converged,
        phi_mode: config.phi_mode,
        sigma1: cov.sigma1,
        sigma2: cov.sigma2,
        sigma: cov.sigma,
        sigma_inv,
        se,
        rho_phi: cov.rho_phi,
        transform: ev.est,
        phi: ev.sol,
        n: model.n(),
    })
}
