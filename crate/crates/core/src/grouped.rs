//! Grouped conditional distribution functions, their plug-in variance and
//! the conditional quantiles they induce.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::{ScoreFit, SurvivalModel};
use crate::family::Covariate;
use crate::sample::step_index;

pub type GroupPredicate<'a> = &'a dyn Fn(&Covariate) -> bool;

/// Finite partition of the sample into labelled groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<String>,
    /// Group index of every subject.
    pub assignment: Vec<usize>,
}

impl Partition {
    pub fn new(labels: Vec<String>, assignment: Vec<usize>) -> Result<Self> {
        let mut counts = vec![0usize; labels.len()];
        for &g in &assignment {
            let slot = counts.get_mut(g).ok_or_else(|| Error::InvalidInput(format!("group index {g} out of range")))?;
            *slot += 1;
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyGroup(labels[j].clone()));
        }
        Ok(Partition { labels, assignment })
    }

    /// One group containing every subject.
    pub fn whole(n: usize) -> Self {
        Partition { labels: vec!["all".into()], assignment: vec![0; n] }
    }

    /// Assigns each subject through a predicate over its covariate; subjects
    /// matching no group are rejected.
    pub fn from_predicates(covariates: &[&Covariate], groups: &[(String, GroupPredicate<'_>)]) -> Result<Self> {
        let assignment = covariates
            .iter()
            .enumerate()
            .map(|(i, z)| {
                groups
                    .iter()
                    .position(|(_, f)| f(z))
                    .ok_or_else(|| Error::InvalidInput(format!("subject {i} belongs to no group")))
            })
            .collect::<Result<Vec<_>>>()?;
        Partition::new(groups.iter().map(|(l, _)| l.clone()).collect(), assignment)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.labels.len()];
        for &g in &self.assignment {
            c[g] += 1;
        }
        c
    }

    pub fn members(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment.iter().enumerate().filter(move |(_, &g)| g == group).map(|(i, _)| i)
    }
}

/// Curves of one group on the event grid.
#[derive(Debug, Clone)]
pub struct GroupCurve {
    pub label: String,
    pub pi_hat: f64,
    pub f_hat: Vec<f64>,
    pub psi1: Vec<f64>,
    /// `m x d`.
    pub psi2: DMatrix<f64>,
    /// Pointwise standard deviation of the limit of `sqrt(n)(F_D-hat - F_D)`.
    pub v_hat: Vec<f64>,
    /// Grid points where a negative plug-in variance was clamped to zero.
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct GroupCurves {
    pub times: Vec<f64>,
    pub n: usize,
    pub groups: Vec<GroupCurve>,
}

impl GroupCurves {
    pub fn clamped_total(&self) -> usize {
        self.groups.iter().map(|g| g.clamped).sum()
    }
}

fn check_partition(model: &SurvivalModel<'_>, partition: &Partition) -> Result<()> {
    if partition.assignment.len() != model.n() {
        return Err(Error::DimensionMismatch { expected: model.n(), found: partition.assignment.len() });
    }
    Ok(())
}

/// `F_D-hat(t_k)` for every group.
pub fn group_cdf(model: &SurvivalModel<'_>, fit: &ScoreFit, partition: &Partition) -> Result<Vec<Vec<f64>>> {
    check_partition(model, partition)?;
    let eta = model.sample.linear_predictors(&fit.theta_hat)?;
    let gamma = fit.transform.gamma();
    Ok((0..partition.len())
        .map(|g| {
            let members: Vec<usize> = partition.members(g).collect();
            let count = members.len() as f64;
            gamma
                .iter()
                .map(|&x| members.iter().map(|&i| model.family.cdf_at(x, eta[i])).sum::<f64>() / count)
                .collect()
        })
        .collect())
}

/// `psi_1-hat` (group-average density) and `psi_2-hat` on the grid.
pub fn auxiliary_functions(
    model: &SurvivalModel<'_>,
    fit: &ScoreFit,
    partition: &Partition,
) -> Result<Vec<(Vec<f64>, DMatrix<f64>)>> {
    check_partition(model, partition)?;
    let eta = model.sample.linear_predictors(&fit.theta_hat)?;
    let recs = model.sample.records();
    let gamma = fit.transform.gamma();
    let gdot = &fit.transform.gamma_dot;
    let d = model.dim();
    let m = gamma.len();
    Ok((0..partition.len())
        .map(|g| {
            let members: Vec<usize> = partition.members(g).collect();
            let count = members.len() as f64;
            let mut psi1 = vec![0.0; m];
            let mut psi2 = DMatrix::zeros(m, d);
            for (k, &x) in gamma.iter().enumerate() {
                let mut dens = 0.0;
                let mut fdot = DVector::<f64>::zeros(d);
                for &i in &members {
                    dens += model.family.density_at(x, eta[i]);
                    let ge = model.family.cdf_eta_at(x, eta[i]);
                    for (j, zj) in recs[i].z.as_slice().iter().enumerate() {
                        fdot[j] += ge * zj;
                    }
                }
                psi1[k] = dens / count;
                for j in 0..d {
                    psi2[(k, j)] = psi1[k] * gdot[(k, j)] + fdot[j] / count;
                }
            }
            (psi1, psi2)
        })
        .collect())
}

/// Grouped cdfs, auxiliary functions and the plug-in standard deviation.
///
/// `v_D(t)^2 = var W_1 + K(t,t) psi_1^2 - 2 psi_1 psi_2' Sigma^-1 (phi + Gamma-dot)(t)
/// + psi_2' Sigma^-1 psi_2`, with
/// `var W_1 = pi^-2 n^-1 sum_{i in D} F_i^2 - pi^-1 F_D^2`.
pub fn group_curves(model: &SurvivalModel<'_>, fit: &ScoreFit, partition: &Partition) -> Result<GroupCurves> {
    let cdfs = group_cdf(model, fit, partition)?;
    let aux = auxiliary_functions(model, fit, partition)?;
    let eta = model.sample.linear_predictors(&fit.theta_hat)?;
    let gamma = fit.transform.gamma();
    let kdiag = fit.transform.kernel_diagonal();
    let psi_n = &fit.phi.psi;
    let n = model.n() as f64;
    let m = gamma.len();
    let mut groups = Vec::with_capacity(partition.len());
    for (g, (f_hat, (psi1, psi2))) in cdfs.into_iter().zip(aux).enumerate() {
        let members: Vec<usize> = partition.members(g).collect();
        let pi_hat = members.len() as f64 / n;
        let mut v_hat = Vec::with_capacity(m);
        let mut clamped = 0;
        for k in 0..m {
            let x = gamma[k];
            let sq: f64 = members.iter().map(|&i| model.family.cdf_at(x, eta[i]).powi(2)).sum();
            let var1 = sq / (n * pi_hat * pi_hat) - f_hat[k] * f_hat[k] / pi_hat;
            let p2 = psi2.row(k).transpose();
            let sinv_p2 = &fit.sigma_inv * &p2;
            let cross = psi_n.row(k).transpose().dot(&sinv_p2);
            let var2 = kdiag[k] * psi1[k] * psi1[k] - 2.0 * psi1[k] * cross + p2.dot(&sinv_p2);
            let total = var1 + var2;
            if total < 0.0 {
                clamped += 1;
                v_hat.push(0.0);
            } else {
                v_hat.push(total.sqrt());
            }
        }
        if clamped > 0 {
            log::warn!("group {}: {clamped} negative plug-in variances clamped to zero", partition.labels[g]);
        }
        groups.push(GroupCurve { label: partition.labels[g].clone(), pi_hat, f_hat, psi1, psi2, v_hat, clamped });
    }
    Ok(GroupCurves { times: fit.transform.event_times().to_vec(), n: model.n(), groups })
}

/// `inf{t : F(t) >= p}` for a right-continuous step function on `times`;
/// `None` when `p` exceeds the last value.
pub fn step_quantile(times: &[f64], values: &[f64], p: f64) -> Option<f64> {
    step_quantile_index(values, p).map(|k| times[k])
}

pub fn step_quantile_index(values: &[f64], p: f64) -> Option<usize> {
    let k = values.partition_point(|&v| v < p);
    (k < values.len()).then_some(k)
}

/// Step-function lookup `F(t)` (zero before the first grid time).
pub fn step_value(times: &[f64], values: &[f64], t: f64) -> f64 {
    step_index(times, t).map_or(0.0, |k| values[k])
}

/// Monotone cdf `g` on the real line used to map probabilities before
/// forming intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityTransform {
    /// `g(x) = 1 - exp(-e^x)`, `g^-1(p) = log(-log(1-p))`.
    #[default]
    LogMinusLog,
    /// `g(x) = 1 / (1 + e^-x)`.
    Logit,
}

impl ProbabilityTransform {
    pub fn forward(&self, x: f64) -> f64 {
        match self {
            ProbabilityTransform::LogMinusLog => -(-x.exp()).exp_m1(),
            ProbabilityTransform::Logit => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn inverse(&self, p: f64) -> f64 {
        match self {
            ProbabilityTransform::LogMinusLog => (-(-p).ln_1p()).ln(),
            ProbabilityTransform::Logit => (p / (1.0 - p)).ln(),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ProbabilityTransform::LogMinusLog => (x - x.exp()).exp(),
            ProbabilityTransform::Logit => {
                let e = (-x.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
        }
    }
}

impl std::str::FromStr for ProbabilityTransform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_minus_log" | "loglog" | "cloglog" => Ok(ProbabilityTransform::LogMinusLog),
            "logit" => Ok(ProbabilityTransform::Logit),
            other => Err(Error::InvalidInput(format!("unknown transform '{other}'"))),
        }
    }
}

/// Upper `alpha/2` point of the standard normal distribution.
pub fn normal_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0,1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// Default probability grid: 101 points on `[0.25, 0.75]`.
pub fn default_p_grid() -> Vec<f64> {
    p_grid(0.25, 0.75, 101)
}

pub fn p_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Quantile estimate with its interval at one probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    pub p: f64,
    pub estimate: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// The mapped upper probability exceeded `F_D-hat(tau)`; `upper` is the
    /// last attainable time and the interval is open to the right.
    pub upper_clipped: bool,
}

impl QuantilePoint {
    pub fn out_of_range(&self) -> bool {
        self.estimate.is_none()
    }

    /// Whether `[lower, upper]` contains `q`, with a clipped upper end
    /// treated as unbounded.
    pub fn covers(&self, q: f64) -> bool {
        match (self.lower, self.upper) {
            (Some(lo), Some(hi)) => lo <= q && (q <= hi || self.upper_clipped),
            _ => false,
        }
    }
}

/// Quantile curve of one group over a probability grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    pub label: String,
    pub points: Vec<QuantilePoint>,
}

/// Point estimates `Q_D-hat(p) = inf{t : F_D-hat(t) >= p}`.
pub fn quantile_curve(times: &[f64], curve: &GroupCurve, p_grid: &[f64]) -> QuantileCurve {
    QuantileCurve {
        label: curve.label.clone(),
        points: p_grid
            .iter()
            .map(|&p| QuantilePoint {
                p,
                estimate: step_quantile(times, &curve.f_hat, p),
                lower: None,
                upper: None,
                upper_clipped: false,
            })
            .collect(),
    }
}

/// Intervals `[Q(g(p-)), Q(g(p+))]` with
/// `p+- = g^-1(p) +- n^-1/2 v(Q(p)) crit / g'(g^-1(p))`.
pub fn intervals_with_critical(
    times: &[f64],
    n: usize,
    curve: &GroupCurve,
    p_grid: &[f64],
    critical: f64,
    transform: ProbabilityTransform,
) -> QuantileCurve {
    let f_max = curve.f_hat.last().copied().unwrap_or(0.0);
    let points = p_grid
        .iter()
        .map(|&p| {
            let Some(k) = step_quantile_index(&curve.f_hat, p) else {
                return QuantilePoint { p, estimate: None, lower: None, upper: None, upper_clipped: false };
            };
            let gi = transform.inverse(p);
            let radius = curve.v_hat[k] * critical / ((n as f64).sqrt() * transform.derivative(gi));
            let p_lo = transform.forward(gi - radius);
            let p_hi = transform.forward(gi + radius);
            let lower = step_quantile(times, &curve.f_hat, p_lo.min(p));
            let (upper, clipped) = match step_quantile(times, &curve.f_hat, p_hi.max(p)) {
                Some(u) => (Some(u), false),
                None => (step_quantile(times, &curve.f_hat, f_max), true),
            };
            QuantilePoint { p, estimate: Some(times[k]), lower, upper, upper_clipped: clipped }
        })
        .collect();
    QuantileCurve { label: curve.label.clone(), points }
}

/// Pointwise `100(1-alpha)%` intervals based on the transformation `g`.
pub fn pointwise_ci(
    curves: &GroupCurves,
    p_grid: &[f64],
    alpha: f64,
    transform: ProbabilityTransform,
) -> Result<Vec<QuantileCurve>> {
    let z = normal_critical(alpha)?;
    Ok(curves
        .groups
        .iter()
        .map(|g| intervals_with_critical(&curves.times, curves.n, g, p_grid, z, transform))
        .collect())
}
