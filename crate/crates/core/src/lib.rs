//! Homogeneity-bias auditing for generative-model sampling sweeps.
//!
//! The pipeline generates stories per facial stimulus and hyperparameter
//! setting ([`genclient`]), persists them ([`store`]), embeds them
//! ([`embed`]), turns every within-condition story pair into a cosine
//! observation standardized per setting ([`simengine`]), and fits
//! random-intercept mixed models by profiled REML ([`lmm`], [`analysis`]).
//! [`report`] renders tables and drives the staged pipeline.
//!
//! The model-fitting code is generic over the floating-point type; the
//! aliases below pin the common instantiations.

pub mod analysis;
pub mod config;
pub mod design;
pub mod embed;
pub mod genclient;
pub mod http;
pub mod lmm;
pub mod report;
pub mod seed;
pub mod simengine;
pub mod store;

pub use design::{validate_design, Condition, Gender, GenerationKey, Knob, Race, Setting, Stimulus, StudyDesign, StudyPlan, SweepSpec};
pub use lmm::{Dimension, LmmSpec, Scalar};
pub use simengine::{PairId, SimilarityObservation};

pub type LmmFit64 = lmm::LmmFit<f64>;
pub type LmmFit32 = lmm::LmmFit<f32>;
pub type ClusterStats64 = lmm::ClusterStats<f64>;
pub type ClusterStats32 = lmm::ClusterStats<f32>;
pub type StatsTable64<K = PairId> = lmm::StatsTable<f64, K>;
pub type StatsTable32<K = PairId> = lmm::StatsTable<f32, K>;
