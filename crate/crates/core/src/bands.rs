//! Gaussian-multiplier simulation of the limit of the grouped cdf process
//! and the simultaneous quantile bands it calibrates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{ScoreFit, SurvivalModel};
use crate::grouped::{
    intervals_with_critical, step_quantile_index, GroupCurves, Partition, ProbabilityTransform, QuantileCurve,
};

/// Independent standard normal deviates for one multiplier replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierDraw {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
    pub stream: u64,
}

impl MultiplierDraw {
    /// Deviates of replicate `stream` under `seed`. Each replicate owns its
    /// own ChaCha stream, so draws do not depend on evaluation order.
    pub fn generate(seed: u64, stream: u64, n: usize, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut normals = |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let v1 = normals(n);
        let v2 = normals(n);
        let v3 = normals(d);
        MultiplierDraw { v1, v2, v3, stream }
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        MultiplierDraw { v1: vec![0.0; n], v2: vec![0.0; n], v3: vec![0.0; d], stream: 0 }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * c).collect();
        MultiplierDraw { v1: s(&self.v1), v2: s(&self.v2), v3: s(&self.v3), stream: self.stream }
    }
}

/// Symmetric PSD square root; negative eigenvalues are clipped at zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix square root input"));
    }
    let eig = SymmetricEigen::new(a.clone());
    let clipped = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    if clipped > 0 {
        log::warn!("{clipped} negative eigenvalue(s) clipped in the square root of Sigma_1");
    }
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let s = &eig.eigenvectors * root * eig.eigenvectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Read-only ingredients shared by every multiplier replicate.
#[derive(Debug, Clone)]
pub struct MultiplierContext {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    /// `P(0, t_k)`.
    p: Vec<f64>,
    /// `S(Gamma(t_k-))` per grid time.
    s: Vec<f64>,
    failures: Vec<Vec<usize>>,
    dn: Vec<f64>,
    rho_phi: DMatrix<f64>,
    sigma1_sqrt: DMatrix<f64>,
    groups: Vec<GroupContext>,
}

#[derive(Debug, Clone)]
struct GroupContext {
    members: Vec<usize>,
    pi_hat: f64,
    /// `F(Gamma(t_k) | Z_i)` for members, row-major `m x |D|`.
    f_ind: Vec<f64>,
    f_hat: Vec<f64>,
    psi1: Vec<f64>,
    /// `Sigma^-1 psi_2(t_k)`, `m x d`.
    h: DMatrix<f64>,
}

impl MultiplierContext {
    pub fn new(model: &SurvivalModel<'_>, fit: &ScoreFit, curves: &GroupCurves, partition: &Partition) -> Result<Self> {
        if partition.assignment.len() != model.n() {
            return Err(Error::DimensionMismatch { expected: model.n(), found: partition.assignment.len() });
        }
        let est = &fit.transform;
        let m = est.m();
        let d = model.dim();
        let eta = model.sample.linear_predictors(&fit.theta_hat)?;
        let gamma = est.gamma();
        let groups = curves
            .groups
            .iter()
            .enumerate()
            .map(|(g, curve)| {
                let members: Vec<usize> = partition.members(g).collect();
                let mut f_ind = Vec::with_capacity(m * members.len());
                for &x in gamma {
                    f_ind.extend(members.iter().map(|&i| model.family.cdf_at(x, eta[i])));
                }
                let h = (&fit.sigma_inv * curve.psi2.transpose()).transpose();
                GroupContext {
                    members,
                    pi_hat: curve.pi_hat,
                    f_ind,
                    f_hat: curve.f_hat.clone(),
                    psi1: curve.psi1.clone(),
                    h,
                }
            })
            .collect();
        Ok(MultiplierContext {
            n: model.n(),
            d,
            m,
            p: est.prodint.from_origin.clone(),
            s: est.path.aggregates.iter().map(|a| a.s).collect(),
            failures: est.path.grid.failures.clone(),
            dn: (0..m).map(|k| est.dn(k)).collect(),
            rho_phi: fit.rho_phi.clone(),
            sigma1_sqrt: psd_sqrt(&fit.sigma1)?,
            groups,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups.len()
    }

    /// `W_0#(t_k) = n^-1/2 sum_i V_2i 1(X_i <= t_k, delta_i = 1) P(X_i, t_k) / S(Gamma(X_i-))`.
    pub fn w0(&self, draw: &MultiplierDraw) -> Vec<f64> {
        let scale = 1.0 / (self.n as f64).sqrt();
        let mut acc = 0.0;
        (0..self.m)
            .map(|k| {
                let jump: f64 = self.failures[k].iter().map(|&i| draw.v2[i]).sum();
                acc += jump / (self.s[k] * self.p[k]);
                self.p[k] * scale * acc
            })
            .collect()
    }

    /// The three components `(W_1#, W_2#, W_3#)` for every group on the grid.
    pub fn components(&self, draw: &MultiplierDraw) -> Vec<[Vec<f64>; 3]> {
        let w0 = self.w0(draw);
        let mut a = DVector::<f64>::zeros(self.d);
        for k in 0..self.m {
            a += self.rho_phi.row(k).transpose() * (w0[k] * self.dn[k]);
        }
        let v3 = DVector::from_column_slice(&draw.v3);
        let b = &self.sigma1_sqrt * v3;
        let root_n = (self.n as f64).sqrt();
        self.groups
            .iter()
            .map(|g| {
                let size = g.members.len();
                let v1: Vec<f64> = g.members.iter().map(|&i| draw.v1[i]).collect();
                let v1_sum: f64 = v1.iter().sum();
                let pre = 1.0 / (root_n * g.pi_hat);
                let mut w1 = Vec::with_capacity(self.m);
                let mut w2 = Vec::with_capacity(self.m);
                let mut w3 = Vec::with_capacity(self.m);
                for k in 0..self.m {
                    let row = &g.f_ind[k * size..(k + 1) * size];
                    let weighted: f64 = row.iter().zip(&v1).map(|(f, v)| f * v).sum();
                    w1.push(pre * (weighted - g.f_hat[k] * v1_sum));
                    let h = g.h.row(k).transpose();
                    w2.push(w0[k] * g.psi1[k] - a.dot(&h));
                    w3.push(b.dot(&h));
                }
                [w1, w2, w3]
            })
            .collect()
    }

    /// `W#(t_k, D) = W_1# + W_2# + W_3#`.
    pub fn process(&self, draw: &MultiplierDraw) -> Vec<Vec<f64>> {
        self.components(draw)
            .into_iter()
            .map(|[w1, w2, w3]| (0..self.m).map(|k| w1[k] + w2[k] + w3[k]).collect())
            .collect()
    }
}

/// Convenience wrapper building the context for a single draw.
pub fn multiplier_process(
    model: &SurvivalModel<'_>,
    fit: &ScoreFit,
    curves: &GroupCurves,
    partition: &Partition,
    draw: &MultiplierDraw,
) -> Result<Vec<Vec<f64>>> {
    Ok(MultiplierContext::new(model, fit, curves, partition)?.process(draw))
}

/// Grid indices of `[Q_D(p1), Q_D(p2)]` with a positive `v_D`, per group.
pub fn sup_ranges(curves: &GroupCurves, p1: f64, p2: f64) -> Vec<Vec<usize>> {
    curves
        .groups
        .iter()
        .map(|g| {
            let Some(lo) = step_quantile_index(&g.f_hat, p1) else {
                log::warn!(
                    "group {}: p = {p1} exceeds the estimated cdf at tau; group left out of the supremum",
                    g.label
                );
                return Vec::new();
            };
            let hi = step_quantile_index(&g.f_hat, p2).unwrap_or_else(|| {
                log::warn!("group {}: p = {p2} exceeds the estimated cdf at tau; supremum truncated at tau", g.label);
                g.f_hat.len() - 1
            });
            let range: Vec<usize> = (lo..=hi).filter(|&k| g.v_hat[k] > 0.0).collect();
            let dropped = hi + 1 - lo - range.len();
            if dropped > 0 {
                log::warn!("group {}: {dropped} grid point(s) with zero variance excluded from the supremum", g.label);
            }
            range
        })
        .collect()
}

/// Order statistic `ceil(m (1 - alpha))` of the replicate suprema.
pub fn empirical_quantile(sups: &[f64], alpha: f64) -> f64 {
    let mut sorted = sups.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let idx = ((m as f64) * (1.0 - alpha)).ceil() as usize;
    sorted[idx.clamp(1, m) - 1]
}

/// Multiplier settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub alpha: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub replicates: usize,
    pub seed: u64,
    pub transform: ProbabilityTransform,
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig {
            alpha: 0.05,
            p_min: 0.25,
            p_max: 0.75,
            replicates: 1000,
            seed: 20240601,
            transform: ProbabilityTransform::LogMinusLog,
        }
    }
}

impl BandConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(0.0 < self.p_min && self.p_min <= self.p_max && self.p_max < 1.0) {
            return Err(Error::InvalidInput(format!(
                "p-range [{}, {}] must satisfy 0 < p_min <= p_max < 1",
                self.p_min, self.p_max
            )));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidInput("at least one multiplier replicate is required".into()));
        }
        Ok(())
    }
}

/// Critical value with the replicate suprema it was taken from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalValue {
    pub u_star: f64,
    pub replicate_sups: Vec<f64>,
}

/// `U# = sup |W#(t,D)| / v_D(t)` over the sup ranges, one per replicate,
/// and its empirical `(1 - alpha)` quantile.
pub fn critical_value(ctx: &MultiplierContext, curves: &GroupCurves, config: &BandConfig) -> Result<CriticalValue> {
    config.validate()?;
    if config.replicates < 100 {
        log::warn!("only {} multiplier replicates; the critical value is coarse", config.replicates);
    }
    let ranges = sup_ranges(curves, config.p_min, config.p_max);
    if ranges.iter().all(|r| r.is_empty()) {
        return Err(Error::InvalidInput("no grid point with positive variance inside the p-range".into()));
    }
    let replicate_sups: Vec<f64> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let draw = MultiplierDraw::generate(config.seed, r, ctx.n, ctx.d);
            let w = ctx.process(&draw);
            ranges
                .iter()
                .zip(&w)
                .zip(&curves.groups)
                .flat_map(|((range, wg), g)| range.iter().map(move |&k| wg[k].abs() / g.v_hat[k]))
                .fold(0.0_f64, f64::max)
        })
        .collect();
    Ok(CriticalValue { u_star: empirical_quantile(&replicate_sups, config.alpha), replicate_sups })
}

/// Simultaneous bands with their calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub alpha: f64,
    pub m: usize,
    pub seed: u64,
    pub u_star: f64,
    pub replicate_sups: Vec<f64>,
    pub transform: ProbabilityTransform,
    pub bands: Vec<QuantileCurve>,
}

/// Bands `[Q_D(g(p-)), Q_D(g(p+))]` with the multiplier critical value.
pub fn bands_with_critical(
    curves: &GroupCurves,
    p_grid: &[f64],
    u_star: f64,
    transform: ProbabilityTransform,
) -> Vec<QuantileCurve> {
    curves
        .groups
        .iter()
        .map(|g| intervals_with_critical(&curves.times, curves.n, g, p_grid, u_star, transform))
        .collect()
}

pub fn simultaneous_bands(
    model: &SurvivalModel<'_>,
    fit: &ScoreFit,
    curves: &GroupCurves,
    partition: &Partition,
    p_grid: &[f64],
    config: &BandConfig,
) -> Result<BandResult> {
    let ctx = MultiplierContext::new(model, fit, curves, partition)?;
    let cv = critical_value(&ctx, curves, config)?;
    Ok(BandResult {
        alpha: config.alpha,
        m: config.replicates,
        seed: config.seed,
        u_star: cv.u_star,
        bands: bands_with_critical(curves, p_grid, cv.u_star, config.transform),
        replicate_sups: cv.replicate_sups,
        transform: config.transform,
    })
}
