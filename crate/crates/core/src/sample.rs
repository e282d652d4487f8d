//! Right-censored samples and the event-time grid they induce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Covariate;

/// One observation `(X, delta, Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub time: f64,
    pub event: bool,
    pub z: Covariate,
}

/// Right-censored observations with a common covariate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSample {
    records: Vec<Record>,
    dim: usize,
}

impl SurvivalSample {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let sample = SurvivalSample::without_event_check(records)?;
        if !sample.records.iter().any(|r| r.event) {
            return Err(Error::InvalidInput("sample has no uncensored observation".into()));
        }
        Ok(sample)
    }

    /// Validates like [`SurvivalSample::new`] but accepts a fully censored
    /// sample, which cannot be fitted.
    pub fn without_event_check(records: Vec<Record>) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::InvalidInput("sample is empty".into()))?;
        let dim = first.z.dim();
        for (i, r) in records.iter().enumerate() {
            if !r.time.is_finite() {
                return Err(Error::NonFinite("observation time"));
            }
            if r.time < 0.0 {
                return Err(Error::InvalidInput(format!("observation {i} has negative time {}", r.time)));
            }
            if r.z.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: r.z.dim() });
            }
            if r.z.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("covariate"));
            }
        }
        Ok(SurvivalSample { records, dim })
    }

    /// Builds a sample from parallel columns.
    pub fn from_columns(times: &[f64], events: &[bool], covariates: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != events.len() || times.len() != covariates.len() {
            return Err(Error::InvalidInput("column lengths differ".into()));
        }
        let records = times
            .iter()
            .zip(events)
            .zip(covariates)
            .map(|((&time, &event), z)| Ok(Record { time, event, z: Covariate::new(z)? }))
            .collect::<Result<Vec<_>>>()?;
        SurvivalSample::new(records)
    }

    /// Rejects covariates whose Euclidean norm exceeds `bound`.
    pub fn check_covariate_bound(&self, bound: f64) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.z.norm() > bound {
                return Err(Error::InvalidInput(format!(
                    "covariate of observation {i} has norm {} above the bound {bound}",
                    r.z.norm()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn max_time(&self) -> f64 {
        self.records.iter().map(|r| r.time).fold(0.0, f64::max)
    }

    /// Returns a copy with covariate column `j` negated.
    pub fn negate_covariate(&self, j: usize) -> SurvivalSample {
        let mut out = self.clone();
        for r in &mut out.records {
            r.z.0[j] = -r.z.0[j];
        }
        out
    }

    /// Linear predictors `theta' Z_i`.
    pub fn linear_predictors(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: theta.len() });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta"));
        }
        Ok(self.records.iter().map(|r| crate::family::dot(theta, r.z.as_slice())).collect())
    }

    /// Default truncation horizon: the largest uncensored time whose risk
    /// set still holds at least two subjects (the largest uncensored time if
    /// no such time exists).
    pub fn default_tau(&self) -> f64 {
        let mut times: Vec<f64> = self.records.iter().filter(|r| r.event).map(|r| r.time).collect();
        times.sort_by(f64::total_cmp);
        let Some(&last) = times.last() else {
            return self.max_time();
        };
        times.iter().rev().copied().find(|&t| self.records.iter().filter(|r| r.time >= t).count() >= 2).unwrap_or(last)
    }
}

/// Distinct uncensored times on `[0, tau]` with their risk sets.
///
/// Risk sets use `Y(t) = 1(X >= t)`: censored subjects tied with an event
/// time are at risk there. Tied uncensored times aggregate into one jump.
#[derive(Debug, Clone)]
pub struct EventGrid {
    pub n: usize,
    pub tau: f64,
    /// Subject indices sorted by observation time.
    pub order: Vec<usize>,
    pub times: Vec<f64>,
    /// Number of failures at each grid time.
    pub deaths: Vec<usize>,
    /// Position in `order` of the first subject at risk at each grid time.
    pub risk_start: Vec<usize>,
    /// Subjects failing at each grid time.
    pub failures: Vec<Vec<usize>>,
}

impl EventGrid {
    pub fn new(sample: &SurvivalSample, tau: Option<f64>) -> Result<Self> {
        let tau = match tau {
            Some(t) => {
                if !t.is_finite() || t <= 0.0 {
                    return Err(Error::InvalidInput(format!("tau must be positive, got {t}")));
                }
                if t > sample.max_time() {
                    return Err(Error::InvalidInput(format!(
                        "tau {t} exceeds the largest observation time {}",
                        sample.max_time()
                    )));
                }
                t
            }
            None => sample.default_tau(),
        };
        let recs = sample.records();
        let mut order: Vec<usize> = (0..recs.len()).collect();
        order.sort_by(|&a, &b| recs[a].time.total_cmp(&recs[b].time));

        let mut times = Vec::new();
        let mut deaths = Vec::new();
        let mut risk_start = Vec::new();
        let mut failures: Vec<Vec<usize>> = Vec::new();
        let mut pos = 0;
        while pos < order.len() {
            let t = recs[order[pos]].time;
            if t > tau {
                break;
            }
            let mut end = pos;
            let mut failing = Vec::new();
            while end < order.len() && recs[order[end]].time == t {
                if recs[order[end]].event {
                    failing.push(order[end]);
                }
                end += 1;
            }
            if !failing.is_empty() {
                times.push(t);
                deaths.push(failing.len());
                risk_start.push(pos);
                failures.push(failing);
            }
            pos = end;
        }
        Ok(EventGrid { n: recs.len(), tau, order, times, deaths, risk_start, failures })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of subjects at risk at grid index `k`.
    pub fn at_risk(&self, k: usize) -> usize {
        self.n - self.risk_start[k]
    }

    /// Jump `N.(dt_k) = d_k / n`.
    pub fn dn(&self, k: usize) -> f64 {
        self.deaths[k] as f64 / self.n as f64
    }

    /// Subjects at risk at grid index `k`.
    pub fn risk_set(&self, k: usize) -> &[usize] {
        &self.order[self.risk_start[k]..]
    }

    /// Index of the last grid time `<= t`, if any (right-continuous lookup).
    pub fn locate(&self, t: f64) -> Option<usize> {
        step_index(&self.times, t)
    }
}

/// Index of the last element of the sorted `times` that is `<= t`.
pub fn step_index(times: &[f64], t: f64) -> Option<usize> {
    let k = times.partition_point(|&s| s <= t);
    k.checked_sub(1)
}
