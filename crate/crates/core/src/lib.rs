//! Conditional average treatment effect (CATE) estimation.
//!
//! Meta-learners (S, T, X, DR, R, IPW) built on interchangeable weighted
//! base learners and a cross-validated stacking ensemble, an honest causal
//! forest with local centering, cross-fitted nuisance estimation, bootstrap
//! confidence intervals, CLAN subgroup analysis and a simulation suite with
//! known ground truth.

pub mod causal_forest;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod learners;
pub mod metalearners;
pub mod nuisance;
pub mod pipeline;
pub mod rng;
pub mod simulation;
pub mod stacking;

pub use dataset::{load_csv, make_folds, Dataset, FoldPlan, TrainEstimateSplit};
pub use error::{CateError, Result};
