//! Closed-loop ("optimise-and-learn") training of static output-feedback
//! neural controllers for a 25-stage binary distillation column.
//!
//! The simulation core ([`column`], [`policy`], [`sim`]) is generic over the
//! floating-point type; orchestration layers ([`mpc`], [`sampling`],
//! [`training`], [`scenarios`]) run in `f64`. The aliases below name the
//! instantiations used throughout.

// negated comparisons are used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod column;
pub mod error;
pub mod lbfgs;
pub mod mpc;
pub mod policy;
pub mod sampling;
pub mod scalar;
pub mod scenarios;
pub mod sim;
pub mod sobol;
pub mod training;

pub use error::{ModelError, PolicyError, SimError};
pub use scalar::Scalar;

pub type ColumnParams = column::ColumnParams<f64>;
pub type ColumnState = column::ColumnState<f64>;
pub type FeedConditions = column::FeedConditions<f64>;
pub type Controls = column::Controls<f64>;

pub type ColumnParams32 = column::ColumnParams<f32>;
pub type ColumnState32 = column::ColumnState<f32>;

pub type PolicyParams = policy::PolicyParams<f64>;
pub type NeuralPolicy = policy::NeuralPolicy<f64>;
pub type Trajectory = sim::Trajectory<f64>;
pub type CostSample = sim::CostSample<f64>;
