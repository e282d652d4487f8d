//! Parametric hazard families of the transformation model.
//!
//! A family describes the conditional hazard rate `alpha(x, theta, z)` on the
//! transformed time scale `x = Gamma(t)`. All shipped families are
//! single-index models: they depend on `(theta, z)` only through the linear
//! predictor `eta = theta' z`, so derivatives in `theta` are `z` times the
//! derivative in `eta`. The solvers work with the index form directly and
//! never allocate per evaluation.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest linear predictor magnitude passed to `exp`.
pub const ETA_CLAMP: f64 = 700.0;

static CLAMP_EVENTS: AtomicUsize = AtomicUsize::new(0);

/// Number of times a linear predictor has been clamped in this process.
pub fn clamp_events() -> usize {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// `exp(eta)` with the exponent clamped to `[-ETA_CLAMP, ETA_CLAMP]`.
pub fn exp_clamped(eta: f64) -> f64 {
    if eta.abs() > ETA_CLAMP {
        if CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed) == 0 {
            log::warn!("linear predictor {eta} clamped to +/-{ETA_CLAMP}; covariates may be unbounded");
        }
        eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp()
    } else {
        eta.exp()
    }
}

/// Covariate vector of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Covariate(pub Vec<f64>);

impl Covariate {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariate"));
        }
        Ok(Covariate(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Linear predictor `theta' z`.
    pub fn linear_predictor(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.0.len() {
            return Err(Error::DimensionMismatch { expected: self.0.len(), found: theta.len() });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta"));
        }
        Ok(dot(theta, &self.0))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-hazard and its derivatives in `x` and in the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexTerms {
    pub alpha: f64,
    pub l: f64,
    pub l_x: f64,
    pub l_eta: f64,
    pub l_xx: f64,
    pub l_x_eta: f64,
    pub l_eta_eta: f64,
}

/// A conditional hazard family `alpha(x, eta)` with `eta = theta' z`.
///
/// Implementors supply the log-hazard derivatives, the induced conditional
/// cdf with its `x` and `eta` derivatives, and the inverse cdf used to
/// generate data and compute model quantiles.
pub trait HazardFamily: Send + Sync {
    fn name(&self) -> &str;

    fn hazard_at(&self, x: f64, eta: f64) -> f64 {
        self.terms_at(x, eta).alpha
    }

    fn terms_at(&self, x: f64, eta: f64) -> IndexTerms;

    /// `F(x | eta) = 1 - exp(-int_0^x alpha(u, eta) du)`.
    fn cdf_at(&self, x: f64, eta: f64) -> f64;

    /// `dF/dx`.
    fn density_at(&self, x: f64, eta: f64) -> f64;

    /// `dF/d eta`.
    fn cdf_eta_at(&self, x: f64, eta: f64) -> f64;

    /// Solves `F(x | eta) = p` for `x`.
    fn inverse_cdf_at(&self, p: f64, eta: f64) -> f64;

    /// Baseline inverse `G^{-1}(p)`, i.e. the inverse cdf at `eta = 0`.
    fn baseline_inverse(&self, p: f64) -> f64 {
        self.inverse_cdf_at(p, 0.0)
    }
}

/// Baseline distribution `G` of a scale regression model
/// `F(x | eta) = G(x e^eta)`.
pub trait ScaleBaseline: Send + Sync {
    fn name(&self) -> &str;
    /// Baseline hazard `G'/(1-G)`.
    fn hazard(&self, y: f64) -> f64;
    /// `d/dy log hazard`.
    fn log_hazard_slope(&self, y: f64) -> f64;
    /// `d^2/dy^2 log hazard`.
    fn log_hazard_curvature(&self, y: f64) -> f64;
    fn cdf(&self, y: f64) -> f64;
    fn density(&self, y: f64) -> f64;
    fn quantile(&self, p: f64) -> f64;
}

/// Scale regression model built from a baseline distribution.
#[derive(Debug, Clone, Copy)]
pub struct ScaleModel<B>(pub B);

impl<B: ScaleBaseline> HazardFamily for ScaleModel<B> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn terms_at(&self, x: f64, eta: f64) -> IndexTerms {
        let e = exp_clamped(eta);
        let y = x * e;
        let h = self.0.hazard(y);
        let k = self.0.log_hazard_slope(y);
        let kp = self.0.log_hazard_curvature(y);
        IndexTerms {
            alpha: e * h,
            l: eta + h.ln(),
            l_x: e * k,
            l_eta: 1.0 + y * k,
            l_xx: e * e * kp,
            l_x_eta: e * (k + y * kp),
            l_eta_eta: y * k + y * y * kp,
        }
    }

    fn cdf_at(&self, x: f64, eta: f64) -> f64 {
        self.0.cdf(x * exp_clamped(eta))
    }

    fn density_at(&self, x: f64, eta: f64) -> f64 {
        let e = exp_clamped(eta);
        e * self.0.density(x * e)
    }

    fn cdf_eta_at(&self, x: f64, eta: f64) -> f64 {
        let y = x * exp_clamped(eta);
        y * self.0.density(y)
    }

    fn inverse_cdf_at(&self, p: f64, eta: f64) -> f64 {
        self.0.quantile(p) / exp_clamped(eta)
    }

    fn baseline_inverse(&self, p: f64) -> f64 {
        self.0.quantile(p)
    }
}

/// Unit exponential baseline: proportional hazards.
#[derive(Debug, Clone, Copy, Default)]
pub struct Exponential;

impl ScaleBaseline for Exponential {
    fn name(&self) -> &str {
        "proportional_hazards"
    }
    fn hazard(&self, _y: f64) -> f64 {
        1.0
    }
    fn log_hazard_slope(&self, _y: f64) -> f64 {
        0.0
    }
    fn log_hazard_curvature(&self, _y: f64) -> f64 {
        0.0
    }
    fn cdf(&self, y: f64) -> f64 {
        -(-y).exp_m1()
    }
    fn density(&self, y: f64) -> f64 {
        (-y).exp()
    }
    fn quantile(&self, p: f64) -> f64 {
        -(-p).ln_1p()
    }
}

/// Standard log-logistic baseline: proportional odds.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogLogistic;

impl ScaleBaseline for LogLogistic {
    fn name(&self) -> &str {
        "proportional_odds"
    }
    fn hazard(&self, y: f64) -> f64 {
        1.0 / (1.0 + y)
    }
    fn log_hazard_slope(&self, y: f64) -> f64 {
        -1.0 / (1.0 + y)
    }
    fn log_hazard_curvature(&self, y: f64) -> f64 {
        1.0 / ((1.0 + y) * (1.0 + y))
    }
    fn cdf(&self, y: f64) -> f64 {
        y / (1.0 + y)
    }
    fn density(&self, y: f64) -> f64 {
        1.0 / ((1.0 + y) * (1.0 + y))
    }
    fn quantile(&self, p: f64) -> f64 {
        p / (1.0 - p)
    }
}

/// Gamma frailty with fixed frailty variance `c > 0`:
/// `G(y) = 1 - (1 + c y)^(-1/c)`. `c = 1` is the proportional odds model and
/// `c -> 0` recovers proportional hazards.
#[derive(Debug, Clone, Copy)]
pub struct GammaFrailty {
    pub variance: f64,
}

impl ScaleBaseline for GammaFrailty {
    fn name(&self) -> &str {
        "gamma_frailty"
    }
    fn hazard(&self, y: f64) -> f64 {
        1.0 / (1.0 + self.variance * y)
    }
    fn log_hazard_slope(&self, y: f64) -> f64 {
        -self.variance / (1.0 + self.variance * y)
    }
    fn log_hazard_curvature(&self, y: f64) -> f64 {
        let c = self.variance;
        c * c / ((1.0 + c * y) * (1.0 + c * y))
    }
    fn cdf(&self, y: f64) -> f64 {
        let c = self.variance;
        -(-(c * y).ln_1p() / c).exp_m1()
    }
    fn density(&self, y: f64) -> f64 {
        let c = self.variance;
        (-(1.0 / c + 1.0) * (c * y).ln_1p()).exp()
    }
    fn quantile(&self, p: f64) -> f64 {
        let c = self.variance;
        (-c * (-p).ln_1p()).exp_m1() / c
    }
}

/// Built-in families selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(alias = "ph")]
    ProportionalHazards,
    #[serde(alias = "po")]
    ProportionalOdds,
}

impl Family {
    pub fn id(&self) -> &'static str {
        match self {
            Family::ProportionalHazards => "ph",
            Family::ProportionalOdds => "po",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ph" | "proportional_hazards" | "cox" => Ok(Family::ProportionalHazards),
            "po" | "proportional_odds" => Ok(Family::ProportionalOdds),
            other => Err(Error::InvalidInput(format!("unknown family '{other}'"))),
        }
    }
}

const PH: ScaleModel<Exponential> = ScaleModel(Exponential);
const PO: ScaleModel<LogLogistic> = ScaleModel(LogLogistic);

impl HazardFamily for Family {
    fn name(&self) -> &str {
        match self {
            Family::ProportionalHazards => PH.name(),
            Family::ProportionalOdds => PO.name(),
        }
    }
    fn terms_at(&self, x: f64, eta: f64) -> IndexTerms {
        match self {
            Family::ProportionalHazards => PH.terms_at(x, eta),
            Family::ProportionalOdds => PO.terms_at(x, eta),
        }
    }
    fn hazard_at(&self, x: f64, eta: f64) -> f64 {
        match self {
            Family::ProportionalHazards => exp_clamped(eta),
            Family::ProportionalOdds => {
                let e = exp_clamped(eta);
                e / (1.0 + e * x)
            }
        }
    }
    fn cdf_at(&self, x: f64, eta: f64) -> f64 {
        match self {
            Family::ProportionalHazards => PH.cdf_at(x, eta),
            Family::ProportionalOdds => PO.cdf_at(x, eta),
        }
    }
    fn density_at(&self, x: f64, eta: f64) -> f64 {
        match self {
            Family::ProportionalHazards => PH.density_at(x, eta),
            Family::ProportionalOdds => PO.density_at(x, eta),
        }
    }
    fn cdf_eta_at(&self, x: f64, eta: f64) -> f64 {
        match self {
            Family::ProportionalHazards => PH.cdf_eta_at(x, eta),
            Family::ProportionalOdds => PO.cdf_eta_at(x, eta),
        }
    }
    fn inverse_cdf_at(&self, p: f64, eta: f64) -> f64 {
        match self {
            Family::ProportionalHazards => PH.inverse_cdf_at(p, eta),
            Family::ProportionalOdds => PO.inverse_cdf_at(p, eta),
        }
    }
}

/// Full log-hazard derivatives at `(x, theta, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogHazardDerivatives {
    pub l: f64,
    pub l_x: f64,
    pub l_theta: Vec<f64>,
    pub l_xx: f64,
    pub l_theta_x: Vec<f64>,
    pub l_theta_theta: DMatrix<f64>,
}

fn check_x(x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite("x"));
    }
    if x < 0.0 {
        return Err(Error::InvalidInput(format!("x must be nonnegative, got {x}")));
    }
    Ok(())
}

/// Hazard rate `alpha(x, theta, z)`.
pub fn hazard(family: &dyn HazardFamily, x: f64, theta: &[f64], z: &Covariate) -> Result<f64> {
    check_x(x)?;
    let eta = z.linear_predictor(theta)?;
    Ok(family.hazard_at(x, eta))
}

pub fn log_hazard_derivatives(
    family: &dyn HazardFamily,
    x: f64,
    theta: &[f64],
    z: &Covariate,
) -> Result<LogHazardDerivatives> {
    check_x(x)?;
    let eta = z.linear_predictor(theta)?;
    let t = family.terms_at(x, eta);
    let zs = z.as_slice();
    let d = zs.len();
    Ok(LogHazardDerivatives {
        l: t.l,
        l_x: t.l_x,
        l_theta: zs.iter().map(|v| v * t.l_eta).collect(),
        l_xx: t.l_xx,
        l_theta_x: zs.iter().map(|v| v * t.l_x_eta).collect(),
        l_theta_theta: DMatrix::from_fn(d, d, |a, b| zs[a] * zs[b] * t.l_eta_eta),
    })
}

/// Conditional cdf `F(x, theta | z)`.
pub fn conditional_cdf(family: &dyn HazardFamily, x: f64, theta: &[f64], z: &Covariate) -> Result<f64> {
    check_x(x)?;
    let eta = z.linear_predictor(theta)?;
    Ok(family.cdf_at(x, eta))
}

/// Conditional density `dF/dx`.
pub fn conditional_density(family: &dyn HazardFamily, x: f64, theta: &[f64], z: &Covariate) -> Result<f64> {
    check_x(x)?;
    let eta = z.linear_predictor(theta)?;
    Ok(family.density_at(x, eta))
}

/// `dF/dtheta`.
pub fn cdf_theta(family: &dyn HazardFamily, x: f64, theta: &[f64], z: &Covariate) -> Result<Vec<f64>> {
    check_x(x)?;
    let eta = z.linear_predictor(theta)?;
    let g = family.cdf_eta_at(x, eta);
    Ok(z.as_slice().iter().map(|v| v * g).collect())
}

/// `G^{-1}(p)` for `p` in (0, 1).
pub fn baseline_quantile(family: &dyn HazardFamily, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("probability must lie in (0,1), got {p}")));
    }
    Ok(family.baseline_inverse(p))
}
