//! Sample transformation `Gamma_{n theta}` and the quantities derived from
//! its risk-set aggregates.
//!
//! Everything is computed jump by jump over the event grid. At grid time
//! `t_k` the family is evaluated at `x = Gamma(t_k-)`, the value entering
//! the recursion `Gamma(t_k) = Gamma(t_k-) + N.(dt_k) / S(Gamma(t_k-), t_k)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::family::HazardFamily;
use crate::sample::{step_index, EventGrid, SurvivalSample};

/// Risk-set averages at one grid time, all scaled by `1/n`.
#[derive(Debug, Clone)]
pub struct RiskAggregates {
    /// `S = n^-1 sum Y_i alpha_i`.
    pub s: f64,
    /// `S' = n^-1 sum Y_i alpha_i'` (derivative in `x`).
    pub s_prime: f64,
    /// `S-dot = n^-1 sum Y_i alpha-dot_i` (derivative in `theta`).
    pub s_dot: DVector<f64>,
    /// `n^-1 sum Y_i alpha_i ldot_i ldot_i'`.
    pub m_theta_theta: DMatrix<f64>,
    /// `n^-1 sum Y_i alpha_i l_i'^2`.
    pub m_xx: f64,
    /// `n^-1 sum Y_i alpha_i ldot_i l_i'`.
    pub m_theta_x: DVector<f64>,
    /// `n^-1 sum` over failures at this time of `ldot_i`.
    pub fail_l_theta: DVector<f64>,
    /// `n^-1 sum` over failures at this time of `l_i'`.
    pub fail_l_x: f64,
}

/// Step function `Gamma_{n theta}` with the aggregates met along the way.
#[derive(Debug, Clone)]
pub struct GammaPath {
    pub theta: Vec<f64>,
    pub grid: EventGrid,
    /// `Gamma(t_k)`, right-continuous values.
    pub gamma: Vec<f64>,
    /// `Gamma(t_k-)`.
    pub gamma_minus: Vec<f64>,
    pub aggregates: Vec<RiskAggregates>,
}

impl GammaPath {
    pub fn m(&self) -> usize {
        self.gamma.len()
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `C_n(dt_k) = N.(dt_k) / S^2`.
    pub fn c_jump(&self, k: usize) -> f64 {
        let s = self.aggregates[k].s;
        self.grid.dn(k) / (s * s)
    }

    /// Right-continuous evaluation, zero before the first event.
    pub fn gamma_at(&self, t: f64) -> f64 {
        step_index(&self.grid.times, t).map_or(0.0, |k| self.gamma[k])
    }
}

/// Solves the sample Volterra recursion for `Gamma_{n theta}`.
pub fn solve_gamma(
    sample: &SurvivalSample,
    grid: &EventGrid,
    family: &dyn HazardFamily,
    theta: &[f64],
) -> Result<GammaPath> {
    let eta = sample.linear_predictors(theta)?;
    let d = sample.dim();
    let n = grid.n as f64;
    let recs = sample.records();
    let m = grid.len();

    let mut gamma = Vec::with_capacity(m);
    let mut gamma_minus = Vec::with_capacity(m);
    let mut aggregates = Vec::with_capacity(m);
    let mut current = 0.0;

    for k in 0..m {
        let x = current;
        let mut s = 0.0;
        let mut s_prime = 0.0;
        let mut m_xx = 0.0;
        let mut s_dot = DVector::zeros(d);
        let mut m_theta_x = DVector::zeros(d);
        let mut m_theta_theta = DMatrix::zeros(d, d);
        for &i in grid.risk_set(k) {
            let t = family.terms_at(x, eta[i]);
            let z = recs[i].z.as_slice();
            let a = t.alpha;
            s += a;
            s_prime += a * t.l_x;
            m_xx += a * t.l_x * t.l_x;
            let w_dot = a * t.l_eta;
            let w_cross = w_dot * t.l_x;
            let w_outer = w_dot * t.l_eta;
            for p in 0..d {
                s_dot[p] += w_dot * z[p];
                m_theta_x[p] += w_cross * z[p];
                for q in 0..=p {
                    m_theta_theta[(p, q)] += w_outer * z[p] * z[q];
                }
            }
        }
        for p in 0..d {
            for q in 0..p {
                m_theta_theta[(q, p)] = m_theta_theta[(p, q)];
            }
        }
        let mut fail_l_theta = DVector::zeros(d);
        let mut fail_l_x = 0.0;
        for &i in &grid.failures[k] {
            let t = family.terms_at(x, eta[i]);
            let z = recs[i].z.as_slice();
            for p in 0..d {
                fail_l_theta[p] += t.l_eta * z[p];
            }
            fail_l_x += t.l_x;
        }
        let s = s / n;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::EstimationDomain { time: grid.times[k] });
        }
        let agg = RiskAggregates {
            s,
            s_prime: s_prime / n,
            s_dot: s_dot / n,
            m_theta_theta: m_theta_theta / n,
            m_xx: m_xx / n,
            m_theta_x: m_theta_x / n,
            fail_l_theta: fail_l_theta / n,
            fail_l_x: fail_l_x / n,
        };
        gamma_minus.push(x);
        current = x + grid.dn(k) / s;
        gamma.push(current);
        aggregates.push(agg);
    }

    Ok(GammaPath { theta: theta.to_vec(), grid: grid.clone(), gamma, gamma_minus, aggregates })
}

/// `Gamma-dot_{n theta}` at the grid times as an `m x d` matrix.
pub fn solve_gamma_dot(path: &GammaPath) -> DMatrix<f64> {
    let d = path.dim();
    let mut out = DMatrix::zeros(path.m(), d);
    let mut prev = DVector::<f64>::zeros(d);
    for (k, agg) in path.aggregates.iter().enumerate() {
        let c = path.c_jump(k);
        let next = &prev - (&agg.s_dot + &prev * agg.s_prime) * c;
        out.set_row(k, &next.transpose());
        prev = next;
    }
    out
}

/// Product-integral factors `1 - S'(Gamma(w-), w) C_n(dw)` over the grid.
#[derive(Debug, Clone)]
pub struct ProductIntegral {
    pub factors: Vec<f64>,
    /// `P(0, t_k)`, including the factor at `t_k`.
    pub from_origin: Vec<f64>,
}

impl ProductIntegral {
    /// `P(t_u, t_t) = prod_{u < w <= t}` for grid indices `u <= t`.
    pub fn between(&self, u: usize, t: usize) -> f64 {
        self.factors[u + 1..=t].iter().product()
    }

    /// `P(0, t)` for an arbitrary time `t` on the grid's time axis.
    pub fn from_origin_at(&self, times: &[f64], t: f64) -> f64 {
        step_index(times, t).map_or(1.0, |k| self.from_origin[k])
    }
}

pub fn product_integral(path: &GammaPath) -> Result<ProductIntegral> {
    let mut factors = Vec::with_capacity(path.m());
    let mut from_origin = Vec::with_capacity(path.m());
    let mut acc = 1.0;
    for (k, agg) in path.aggregates.iter().enumerate() {
        let f = 1.0 - agg.s_prime * path.c_jump(k);
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::ProductIntegralSingular { time: path.grid.times[k], factor: f });
        }
        acc *= f;
        factors.push(f);
        from_origin.push(acc);
    }
    Ok(ProductIntegral { factors, from_origin })
}

/// Jumps of `C_n`, `B_n` and the plug-in conditional (co)variances
/// `v-bar`, `v`, `rho` at the grid times.
#[derive(Debug, Clone)]
pub struct CbTerms {
    pub c_jumps: Vec<f64>,
    pub b_jumps: Vec<f64>,
    pub v: Vec<f64>,
    /// `m x d`.
    pub rho: DMatrix<f64>,
    pub v_bar: Vec<DMatrix<f64>>,
}

pub fn accumulate_cb(path: &GammaPath) -> CbTerms {
    let m = path.m();
    let d = path.dim();
    let mut c_jumps = Vec::with_capacity(m);
    let mut b_jumps = Vec::with_capacity(m);
    let mut v = Vec::with_capacity(m);
    let mut rho = DMatrix::zeros(m, d);
    let mut v_bar = Vec::with_capacity(m);
    for (k, agg) in path.aggregates.iter().enumerate() {
        let s = agg.s;
        let mean_dot = &agg.s_dot / s;
        let mean_prime = agg.s_prime / s;
        let vk = (agg.m_xx / s - mean_prime * mean_prime).max(0.0);
        let rho_k = &agg.m_theta_x / s - &mean_dot * mean_prime;
        let vbar_k = &agg.m_theta_theta / s - &mean_dot * mean_dot.transpose();
        c_jumps.push(path.c_jump(k));
        b_jumps.push(vk * path.grid.dn(k));
        v.push(vk);
        rho.set_row(k, &rho_k.transpose());
        v_bar.push(vbar_k);
    }
    CbTerms { c_jumps, b_jumps, v, rho, v_bar }
}

/// All transformation quantities at a fixed `theta`.
#[derive(Debug, Clone)]
pub struct TransformEstimate {
    pub path: GammaPath,
    /// `m x d`.
    pub gamma_dot: DMatrix<f64>,
    pub prodint: ProductIntegral,
    pub cb: CbTerms,
}

impl TransformEstimate {
    pub fn event_times(&self) -> &[f64] {
        &self.path.grid.times
    }

    pub fn gamma(&self) -> &[f64] {
        &self.path.gamma
    }

    pub fn m(&self) -> usize {
        self.path.m()
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    pub fn dn(&self, k: usize) -> f64 {
        self.path.grid.dn(k)
    }

    /// `K_n(t_i, t_j) = sum_{u <= min} C_n(du) P(u, t_i) P(u, t_j)`.
    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        let p = &self.prodint.from_origin;
        let lo = i.min(j);
        let acc: f64 = (0..=lo).map(|u| self.cb.c_jumps[u] / (p[u] * p[u])).sum();
        p[i] * p[j] * acc
    }

    /// Dense `m x m` kernel matrix. Quadratic in `m`; tests and diagnostics only.
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        let m = self.m();
        let p = &self.prodint.from_origin;
        let mut cum = Vec::with_capacity(m);
        let mut acc = 0.0;
        for u in 0..m {
            acc += self.cb.c_jumps[u] / (p[u] * p[u]);
            cum.push(acc);
        }
        DMatrix::from_fn(m, m, |i, j| p[i] * p[j] * cum[i.min(j)])
    }

    /// Diagonal `K_n(t_k, t_k)` for every grid index.
    pub fn kernel_diagonal(&self) -> Vec<f64> {
        let p = &self.prodint.from_origin;
        let mut acc = 0.0;
        (0..self.m())
            .map(|k| {
                acc += self.cb.c_jumps[k] / (p[k] * p[k]);
                p[k] * p[k] * acc
            })
            .collect()
    }
}

/// Runs the recursion, its derivative, the product integral and the
/// `C_n`/`B_n` accumulation at `theta`.
pub fn transform(
    sample: &SurvivalSample,
    grid: &EventGrid,
    family: &dyn HazardFamily,
    theta: &[f64],
) -> Result<TransformEstimate> {
    let path = solve_gamma(sample, grid, family, theta)?;
    let gamma_dot = solve_gamma_dot(&path);
    let prodint = product_integral(&path)?;
    let cb = accumulate_cb(&path);
    Ok(TransformEstimate { path, gamma_dot, prodint, cb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use approx::assert_relative_eq;

    fn two_point(z: [f64; 2]) -> (SurvivalSample, EventGrid) {
        let s = SurvivalSample::from_columns(&[1.0, 2.0], &[true, true], vec![vec![z[0]], vec![z[1]]]).unwrap();
        let g = EventGrid::new(&s, Some(2.0)).unwrap();
        (s, g)
    }

    #[test]
    fn ph_two_point_is_nelson_aalen() {
        let (s, g) = two_point([0.0, 1.0]);
        let p = solve_gamma(&s, &g, &Family::ProportionalHazards, &[0.0]).unwrap();
        assert_relative_eq!(p.gamma[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.gamma[1], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn po_two_point_hand_recursion() {
        let (s, g) = two_point([0.0, 1.0]);
        let p = solve_gamma(&s, &g, &Family::ProportionalOdds, &[0.0]).unwrap();
        assert_relative_eq!(p.gamma[0], 0.5, epsilon = 1e-15);
        // jump_2 = (1/2) / ((1/2) * 1/(1 + 1/2))
        assert_relative_eq!(p.gamma[1], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn no_events_before_tau_gives_zero_transform() {
        let s = SurvivalSample::from_columns(&[1.0, 2.0, 3.0], &[false, false, true], vec![vec![0.3]; 3]).unwrap();
        let g = EventGrid::new(&s, Some(2.5)).unwrap();
        let p = solve_gamma(&s, &g, &Family::ProportionalOdds, &[0.7]).unwrap();
        assert!(p.gamma.is_empty());
        assert_eq!(p.gamma_at(2.4), 0.0);
    }

    #[test]
    fn ph_gamma_dot_two_point() {
        let (s, g) = two_point([0.0, 1.0]);
        let est = transform(&s, &g, &Family::ProportionalHazards, &[0.0]).unwrap();
        // -(zbar_1) * (1/2) / 1^2 with zbar_1 = 1/2
        assert_relative_eq!(est.gamma_dot[(0, 0)], -0.25, epsilon = 1e-15);
    }

    #[test]
    fn gamma_dot_vanishes_without_covariate_signal() {
        let s = SurvivalSample::from_columns(&[1.0, 2.0, 4.0], &[true, false, true], vec![vec![0.0]; 3]).unwrap();
        let g = EventGrid::new(&s, Some(4.0)).unwrap();
        let est = transform(&s, &g, &Family::ProportionalHazards, &[0.3]).unwrap();
        assert!(est.gamma_dot.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ph_product_integral_is_one() {
        let (s, g) = two_point([0.5, -1.0]);
        let est = transform(&s, &g, &Family::ProportionalHazards, &[0.8]).unwrap();
        assert!(est.prodint.from_origin.iter().all(|&p| p == 1.0));
        assert!(est.cb.b_jumps.iter().all(|&b| b == 0.0));
        assert!(est.cb.v.iter().all(|&v| v == 0.0));
        assert!(est.cb.rho.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn po_two_point_product_integral_by_hand() {
        let (s, g) = two_point([0.0, 1.0]);
        let est = transform(&s, &g, &Family::ProportionalOdds, &[0.0]).unwrap();
        // t=1: x=0, alpha'=-1 for both, S'=-1, S=1, C=1/2 -> factor 1.5
        // t=2: x=1/2, risk set {2}, alpha'=-1/(1.5)^2, S'=-(4/9)/2, S=(2/3)/2, C=(1/2)/(1/9)
        let f1 = 1.0 + 1.0 * 0.5;
        let f2 = 1.0 + (4.0 / 9.0 / 2.0) * (0.5 / (1.0 / 9.0));
        assert_relative_eq!(est.prodint.from_origin[0], f1, epsilon = 1e-14);
        assert_relative_eq!(est.prodint.from_origin[1], f1 * f2, epsilon = 1e-14);
        // risk set of size one at t=2 has no spread in l'
        assert_relative_eq!(est.cb.v[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_covariates_give_zero_v_bar() {
        let s = SurvivalSample::from_columns(&[1.0, 2.0, 3.0, 4.0], &[true, true, false, true], vec![vec![0.4]; 4])
            .unwrap();
        let g = EventGrid::new(&s, Some(4.0)).unwrap();
        let est = transform(&s, &g, &Family::ProportionalOdds, &[1.2]).unwrap();
        for vb in &est.cb.v_bar {
            assert!(vb[(0, 0)].abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_forms_agree() {
        let s = SurvivalSample::from_columns(
            &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            &[true, true, false, true, true, true],
            vec![vec![0.1], vec![-0.4], vec![0.9], vec![0.2], vec![-1.0], vec![0.5]],
        )
        .unwrap();
        let g = EventGrid::new(&s, Some(2.5)).unwrap();
        let est = transform(&s, &g, &Family::ProportionalOdds, &[0.6]).unwrap();
        let k = est.kernel_matrix();
        let diag = est.kernel_diagonal();
        for i in 0..est.m() {
            assert_relative_eq!(diag[i], k[(i, i)], max_relative = 1e-13);
            for j in 0..est.m() {
                let direct: f64 = (0..=i.min(j))
                    .map(|u| est.cb.c_jumps[u] * est.prodint.between(u, i) * est.prodint.between(u, j))
                    .sum();
                assert_relative_eq!(k[(i, j)], direct, max_relative = 1e-12);
                assert_relative_eq!(est.kernel(i, j), direct, max_relative = 1e-12);
            }
        }
    }
}
