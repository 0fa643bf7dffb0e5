//! Random-intercept linear mixed models fitted by profiled REML.
//!
//! The model is `y = Xβ + Zb + ε` with one random intercept per cluster,
//! `b ~ N(0, σ²_b)`, `ε ~ N(0, σ²_e)`. With `θ = σ²_b / σ²_e` the marginal
//! covariance of cluster `j` is `σ²_e (I + θ 11ᵀ)`, whose inverse and
//! determinant are closed-form. The REML criterion therefore depends on the
//! data only through per-cluster sums ([`ClusterStats`]), and profiling out
//! `β` and `σ²_e` leaves a one-dimensional search over `θ`.

mod deviance;
mod fit;
mod linalg;
pub mod normal;
mod optimize;
mod spec;
mod stats;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

pub use deviance::{profiled_reml_deviance, reml_gradient, ThetaEval};
pub use fit::{fit_reml, fit_stats, LmmFit, FitOptions, THETA_MAX};
pub use normal::wald_p;
pub use optimize::{brent_minimize, Minimum};
pub use spec::{accumulate_stats, Dimension, LmmSpec, ReferenceLevels, Response, Term};
pub use stats::{ClusterStats, StatsTable};

/// Real scalar the fitting code is generic over.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Sum + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Display + Sum + Send + Sync + 'static {}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmmError {
    #[error("need more observations than fixed effects ({n} <= {p})")]
    TooFewObservations { n: u64, p: usize },
    #[error("need at least two clusters, found {0}")]
    TooFewClusters(usize),
    #[error("column {0} is constant; the fixed-effects design is rank deficient")]
    ConstantColumn(String),
    #[error("fixed-effects design is rank deficient")]
    RankDeficient,
    #[error("non-finite value in design or response")]
    NonFinite,
    #[error("row has {got} columns, expected {expected}")]
    ColumnCount { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    Spec(String),
    #[error("theta must be finite and >= 0, got {0}")]
    BadTheta(f64),
}
