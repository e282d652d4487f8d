//! Semiparametric transformation models for right-censored data: joint
//! estimation of the regression parameter and the transformation, grouped
//! conditional quantiles with pointwise and simultaneous confidence bands.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bands;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod family;
pub mod fredholm;
pub mod grouped;
pub mod io;
pub mod sample;
pub mod sim;
pub mod transform;

pub use error::{Error, Result};
pub use estimator::{fit, FitConfig, PhiMode, ScoreFit, SurvivalModel};
pub use family::{Covariate, Family, HazardFamily};
pub use grouped::{group_curves, GroupCurves, Partition, ProbabilityTransform, QuantileCurve};
pub use sample::{EventGrid, Record, SurvivalSample};
