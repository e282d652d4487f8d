//! Synthetic censored samples from transformation models and Monte Carlo
//! coverage experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::{bands_with_critical, critical_value, BandConfig, MultiplierContext};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitConfig, SurvivalModel};
use crate::family::{Covariate, Family, HazardFamily};
use crate::grouped::{group_curves, normal_critical, p_grid, pointwise_ci, Partition, ProbabilityTransform};
use crate::sample::{Record, SurvivalSample};

/// True transformation `Gamma_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformationSpec {
    Identity,
    /// `Gamma_0(t) = t^r`.
    Power {
        r: f64,
    },
}

impl TransformationSpec {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TransformationSpec::Identity => t,
            TransformationSpec::Power { r } => t.powf(r),
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match *self {
            TransformationSpec::Identity => y,
            TransformationSpec::Power { r } => y.powf(1.0 / r),
        }
    }
}

/// Law of one covariate component; components are drawn independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentLaw {
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    Uniform { lower: f64, upper: f64 },
}

impl ComponentLaw {
    fn validate(&self) -> Result<()> {
        match self {
            ComponentLaw::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::InvalidInput("discrete law needs matching values and probs".into()));
                }
                if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput("discrete probabilities must be nonnegative and sum to 1".into()));
                }
            }
            ComponentLaw::Uniform { lower, upper } => {
                if !(lower.is_finite() && upper.is_finite() && lower < upper) {
                    return Err(Error::InvalidInput(format!("invalid uniform range [{lower}, {upper}]")));
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ComponentLaw::Discrete { values, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().expect("validated")
            }
            ComponentLaw::Uniform { lower, upper } => lower + (upper - lower) * rng.random::<f64>(),
        }
    }

    /// Quadrature nodes and weights restricted to `[lo, hi]`, weights
    /// summing to the probability of the restriction.
    fn nodes(&self, lo: f64, hi: f64, points: usize) -> Vec<(f64, f64)> {
        match self {
            ComponentLaw::Discrete { values, probs } => values
                .iter()
                .zip(probs)
                .filter(|(v, p)| **v >= lo && **v <= hi && **p > 0.0)
                .map(|(v, p)| (*v, *p))
                .collect(),
            ComponentLaw::Uniform { lower, upper } => {
                let a = lower.max(lo);
                let b = upper.min(hi);
                if a >= b {
                    return Vec::new();
                }
                let w = (b - a) / (upper - lower) / points as f64;
                (0..points).map(|k| (a + (b - a) * (k as f64 + 0.5) / points as f64, w)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CensoringLaw {
    None,
    Uniform { upper: f64 },
    Exponential { rate: f64 },
}

/// Group of subjects whose covariate component lies in `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGroup {
    pub label: String,
    pub component: usize,
    pub lower: f64,
    pub upper: f64,
}

impl SimGroup {
    fn contains(&self, z: &Covariate) -> bool {
        let v = z.as_slice()[self.component];
        v >= self.lower && v <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub family: Family,
    pub theta0: Vec<f64>,
    pub gamma0: TransformationSpec,
    pub covariates: Vec<ComponentLaw>,
    pub censoring: CensoringLaw,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    /// Groups defining the quantile targets; the whole sample when empty.
    #[serde(default)]
    pub groups: Vec<SimGroup>,
}

const QUADRATURE_POINTS: usize = 200;

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.theta0.len() != self.covariates.len() {
            return Err(Error::DimensionMismatch { expected: self.covariates.len(), found: self.theta0.len() });
        }
        if self.theta0.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("theta0"));
        }
        for law in &self.covariates {
            law.validate()?;
        }
        if let TransformationSpec::Power { r } = self.gamma0 {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidInput(format!("power transformation needs r > 0, got {r}")));
            }
        }
        match self.censoring {
            CensoringLaw::Uniform { upper } if !(upper > 0.0) => {
                return Err(Error::InvalidInput("uniform censoring needs a positive upper limit".into()))
            }
            CensoringLaw::Exponential { rate } if !(rate > 0.0) => {
                return Err(Error::InvalidInput("exponential censoring needs a positive rate".into()))
            }
            _ => {}
        }
        if self.n < 2 {
            return Err(Error::InvalidInput("n must be at least 2".into()));
        }
        for g in &self.groups {
            if g.component >= self.covariates.len() {
                return Err(Error::InvalidInput(format!("group {} refers to a missing component", g.label)));
            }
        }
        let uniform = self.covariates.iter().filter(|c| matches!(c, ComponentLaw::Uniform { .. })).count();
        if uniform > 2 {
            return Err(Error::InvalidInput("closed-form targets support at most two uniform components".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.theta0.len()
    }

    pub fn partition(&self, sample: &SurvivalSample) -> Result<Partition> {
        if self.groups.is_empty() {
            return Ok(Partition::whole(sample.len()));
        }
        let assignment = sample
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.groups
                    .iter()
                    .position(|g| g.contains(&r.z))
                    .ok_or_else(|| Error::InvalidInput(format!("simulated subject {i} belongs to no group")))
            })
            .collect::<Result<Vec<_>>>()?;
        Partition::new(self.groups.iter().map(|g| g.label.clone()).collect(), assignment)
    }

    /// Covariate support points with probabilities, restricted to a group.
    fn support(&self, group: Option<&SimGroup>) -> Vec<(Vec<f64>, f64)> {
        let mut out = vec![(Vec::new(), 1.0)];
        for (j, law) in self.covariates.iter().enumerate() {
            let (lo, hi) = match group {
                Some(g) if g.component == j => (g.lower, g.upper),
                _ => (f64::NEG_INFINITY, f64::INFINITY),
            };
            let nodes = law.nodes(lo, hi, QUADRATURE_POINTS);
            out = out
                .into_iter()
                .flat_map(|(z, w)| {
                    nodes.iter().map(move |&(v, wv)| {
                        let mut z2 = z.clone();
                        z2.push(v);
                        (z2, w * wv)
                    })
                })
                .collect();
        }
        out
    }

    /// `F(t | z) = G(Gamma_0(t) e^{theta_0' z})`.
    pub fn true_conditional_cdf(&self, t: f64, z: &[f64]) -> f64 {
        let eta = crate::family::dot(&self.theta0, z);
        self.family.cdf_at(self.gamma0.eval(t), eta)
    }

    /// `Q(p | z) = Gamma_0^-1(e^{-theta_0' z} G^-1(p))`.
    pub fn true_conditional_quantile(&self, p: f64, z: &[f64]) -> f64 {
        let eta = crate::family::dot(&self.theta0, z);
        self.gamma0.inverse(self.family.inverse_cdf_at(p, eta))
    }

    /// Closed-form `F_D(t) = E[F(t | Z) | Z in D]`.
    pub fn true_group_cdf(&self, t: f64, group: Option<&SimGroup>) -> f64 {
        let support = self.support(group);
        let mass: f64 = support.iter().map(|(_, w)| w).sum();
        support.iter().map(|(z, w)| w * self.true_conditional_cdf(t, z)).sum::<f64>() / mass
    }

    /// `Q_D(p)` by bisection on the continuous, increasing `F_D`.
    pub fn true_group_quantile(&self, p: f64, group: Option<&SimGroup>) -> f64 {
        let mut hi = 1.0;
        while self.true_group_cdf(hi, group) < p {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.true_group_cdf(mid, group) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Checks the quantile invariance identities on the closed-form
    /// conditional quantiles: `Gamma_0(Q(p1|z)) / Gamma_0(Q(p2|z)) =
    /// G^-1(p1) / G^-1(p2)` and `Gamma_0(Q(p|z1)) / Gamma_0(Q(p|z2)) =
    /// e^{-theta' z1} / e^{-theta' z2}`.
    pub fn check_quantile_identities(&self) -> Result<()> {
        let support = self.support(None);
        let z1 = &support[0].0;
        let z2 = &support[support.len() - 1].0;
        let g = |p| self.family.baseline_inverse(p);
        let bisect = |p: f64, z: &[f64]| {
            let (mut lo, mut hi) = (0.0, 1.0);
            while self.true_conditional_cdf(hi, z) < p {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if self.true_conditional_cdf(mid, z) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        for (p1, p2) in [(0.25, 0.5), (0.5, 0.75), (0.1, 0.9)] {
            let lhs = self.gamma0.eval(bisect(p1, z1)) / self.gamma0.eval(bisect(p2, z1));
            let rhs = g(p1) / g(p2);
            if (lhs - rhs).abs() > 1e-8 * rhs.abs() {
                return Err(Error::InvalidInput(format!("quantile ratio identity fails: {lhs} vs {rhs}")));
            }
        }
        let p = 0.5;
        let lhs = self.gamma0.eval(bisect(p, z1)) / self.gamma0.eval(bisect(p, z2));
        let eta1 = crate::family::dot(&self.theta0, z1);
        let eta2 = crate::family::dot(&self.theta0, z2);
        let rhs = (eta2 - eta1).exp();
        if (lhs - rhs).abs() > 1e-8 * rhs.abs() {
            return Err(Error::InvalidInput(format!("covariate shift identity fails: {lhs} vs {rhs}")));
        }
        Ok(())
    }
}

/// Draws replicate `replicate` of the scenario.
pub fn generate(scenario: &SimScenario, replicate: u64) -> Result<SurvivalSample> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(replicate);
    let mut records = Vec::with_capacity(scenario.n);
    for _ in 0..scenario.n {
        let z: Vec<f64> = scenario.covariates.iter().map(|law| law.sample(&mut rng)).collect();
        let u: f64 = rng.random();
        let t = scenario.true_conditional_quantile(u, &z);
        let c = match scenario.censoring {
            CensoringLaw::None => f64::INFINITY,
            CensoringLaw::Uniform { upper } => upper * rng.random::<f64>(),
            CensoringLaw::Exponential { rate } => Exp::new(rate).expect("validated rate").sample(&mut rng),
        };
        let event = t <= c;
        records.push(Record { time: t.min(c), event, z: Covariate::new(z)? });
    }
    if !records.iter().any(|r| r.event) {
        log::warn!("replicate {replicate}: every observation is censored");
        return SurvivalSample::without_event_check(records);
    }
    SurvivalSample::new(records)
}

/// What a coverage run tracks besides `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTargets {
    /// Probabilities at which pointwise quantile intervals are scored.
    pub p_points: Vec<f64>,
    pub alpha: f64,
    /// Simultaneous band over `[p_min, p_max]`; `None` skips the multiplier step.
    pub band: Option<BandTarget>,
    #[serde(default)]
    pub transform: ProbabilityTransform,
    #[serde(default)]
    pub fit: FitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandTarget {
    pub p_min: f64,
    pub p_max: f64,
    pub grid_points: usize,
    pub replicates: usize,
}

impl Default for CoverageTargets {
    fn default() -> Self {
        CoverageTargets {
            p_points: vec![0.5],
            alpha: 0.05,
            band: Some(BandTarget { p_min: 0.25, p_max: 0.75, grid_points: 101, replicates: 500 }),
            transform: ProbabilityTransform::LogMinusLog,
            fit: FitConfig::default(),
        }
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    /// `[group][p_point]` estimate (`None` out of range).
    pub quantiles: Vec<Vec<Option<f64>>>,
    /// `[group][p_point]` pointwise coverage.
    pub pointwise_covers: Vec<Vec<bool>>,
    pub band_covers: Option<bool>,
    /// `[group][p_point]` coverage of the simultaneous band at the pointwise targets.
    pub band_point_covers: Option<Vec<Vec<bool>>>,
    pub u_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSummary {
    pub component: usize,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub group: String,
    pub p: f64,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    pub out_of_range: usize,
    pub pointwise_coverage: f64,
    /// Coverage of the same target by the simultaneous band.
    pub band_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub replications: usize,
    pub converged: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub non_convergence_rate: f64,
    pub theta: Vec<ThetaSummary>,
    pub quantiles: Vec<QuantileSummary>,
    pub band_coverage: Option<f64>,
    pub mean_u_star: Option<f64>,
    pub outcomes: Vec<ReplicateOutcome>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Multiplier seed of a replicate, decorrelated from the data stream.
fn band_seed(seed: u64, replicate: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ replicate.wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Fits one replicate and scores its intervals against the closed-form truth.
pub fn run_replicate(
    scenario: &SimScenario,
    targets: &CoverageTargets,
    truths: &[Vec<f64>],
    band_truth: &[Vec<f64>],
    replicate: u64,
) -> Result<ReplicateOutcome> {
    let sample = generate(scenario, replicate)?;
    let model = SurvivalModel::new(&sample, &scenario.family, None)?;
    let f = fit(&model, None, &targets.fit)?.require_converged()?;
    let partition = scenario.partition(&sample)?;
    let curves = group_curves(&model, &f, &partition)?;
    let pw = pointwise_ci(&curves, &targets.p_points, targets.alpha, targets.transform)?;
    let quantiles = pw.iter().map(|c| c.points.iter().map(|pt| pt.estimate).collect()).collect();
    let pointwise_covers =
        pw.iter().zip(truths).map(|(c, tr)| c.points.iter().zip(tr).map(|(pt, &q)| pt.covers(q)).collect()).collect();
    let (band_covers, band_point_covers, u_star) = match &targets.band {
        None => (None, None, None),
        Some(bt) => {
            let grid = p_grid(bt.p_min, bt.p_max, bt.grid_points);
            let config = BandConfig {
                alpha: targets.alpha,
                p_min: bt.p_min,
                p_max: bt.p_max,
                replicates: bt.replicates,
                seed: band_seed(scenario.seed, replicate),
                transform: targets.transform,
            };
            let ctx = MultiplierContext::new(&model, &f, &curves, &partition)?;
            let cv = critical_value(&ctx, &curves, &config)?;
            let bands = bands_with_critical(&curves, &grid, cv.u_star, targets.transform);
            let covers =
                bands.iter().zip(band_truth).all(|(b, tr)| b.points.iter().zip(tr).all(|(pt, &q)| pt.covers(q)));
            let at_points = bands_with_critical(&curves, &targets.p_points, cv.u_star, targets.transform)
                .iter()
                .zip(truths)
                .map(|(c, tr)| c.points.iter().zip(tr).map(|(pt, &q)| pt.covers(q)).collect())
                .collect();
            (Some(covers), Some(at_points), Some(cv.u_star))
        }
    };
    Ok(ReplicateOutcome {
        replicate,
        se: f.se.clone().unwrap_or_default(),
        theta_hat: f.theta_hat,
        quantiles,
        pointwise_covers,
        band_covers,
        band_point_covers,
        u_star,
    })
}

/// Runs every replicate in parallel; failed fits are counted and excluded
/// from the coverage denominators.
pub fn run_coverage(scenario: &SimScenario, targets: &CoverageTargets) -> Result<CoverageReport> {
    scenario.validate()?;
    scenario.check_quantile_identities()?;
    normal_critical(targets.alpha)?;
    if scenario.replications < 50 {
        log::warn!("{} replications; coverage estimates are coarse", scenario.replications);
    }
    let groups: Vec<Option<&SimGroup>> =
        if scenario.groups.is_empty() { vec![None] } else { scenario.groups.iter().map(Some).collect() };
    let labels: Vec<String> = groups.iter().map(|g| g.map_or("all".to_string(), |g| g.label.clone())).collect();
    let truths: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| targets.p_points.iter().map(|&p| scenario.true_group_quantile(p, *g)).collect())
        .collect();
    let band_truth: Vec<Vec<f64>> = match &targets.band {
        Some(bt) => groups
            .iter()
            .map(|g| {
                p_grid(bt.p_min, bt.p_max, bt.grid_points)
                    .iter()
                    .map(|&p| scenario.true_group_quantile(p, *g))
                    .collect()
            })
            .collect(),
        None => Vec::new(),
    };
    let results: Vec<Result<ReplicateOutcome>> = (0..scenario.replications as u64)
        .into_par_iter()
        .map(|r| run_replicate(scenario, targets, &truths, &band_truth, r))
        .collect();
    let mut outcomes = Vec::new();
    let mut failure_messages = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => failure_messages.push(format!("replicate {r}: {e}")),
        }
    }
    let converged = outcomes.len();
    let z = normal_critical(targets.alpha)?;
    let theta = (0..scenario.dim())
        .map(|j| {
            let est: Vec<f64> = outcomes.iter().map(|o| o.theta_hat[j]).collect();
            let se: Vec<f64> = outcomes.iter().filter_map(|o| o.se.get(j).copied()).collect();
            let (mean, sd) = mean_sd(&est);
            let truth = scenario.theta0[j];
            let covered = outcomes
                .iter()
                .filter(|o| o.se.get(j).is_some_and(|s| (o.theta_hat[j] - truth).abs() <= z * s))
                .count();
            ThetaSummary {
                component: j,
                truth,
                bias: mean - truth,
                sd,
                mean_se: mean_sd(&se).0,
                coverage: covered as f64 / converged.max(1) as f64,
            }
        })
        .collect();
    let mut quantiles = Vec::new();
    for (g, label) in labels.iter().enumerate() {
        for (k, &p) in targets.p_points.iter().enumerate() {
            let est: Vec<f64> = outcomes.iter().filter_map(|o| o.quantiles[g][k]).collect();
            let (mean, sd) = mean_sd(&est);
            let covered = outcomes.iter().filter(|o| o.pointwise_covers[g][k]).count();
            let band_covered =
                outcomes.iter().filter(|o| o.band_point_covers.as_ref().is_some_and(|b| b[g][k])).count();
            quantiles.push(QuantileSummary {
                group: label.clone(),
                p,
                truth: truths[g][k],
                bias: mean - truths[g][k],
                sd,
                out_of_range: converged - est.len(),
                pointwise_coverage: covered as f64 / converged.max(1) as f64,
                band_coverage: targets.band.as_ref().map(|_| band_covered as f64 / converged.max(1) as f64),
            });
        }
    }
    let band_coverage = targets
        .band
        .as_ref()
        .map(|_| outcomes.iter().filter(|o| o.band_covers == Some(true)).count() as f64 / converged.max(1) as f64);
    let mean_u_star =
        targets.band.as_ref().map(|_| mean_sd(&outcomes.iter().filter_map(|o| o.u_star).collect::<Vec<_>>()).0);
    let failures = failure_messages.len();
    Ok(CoverageReport {
        replications: scenario.replications,
        converged,
        failures,
        failure_messages,
        non_convergence_rate: failures as f64 / scenario.replications.max(1) as f64,
        theta,
        quantiles,
        band_coverage,
        mean_u_star,
        outcomes,
    })
}
