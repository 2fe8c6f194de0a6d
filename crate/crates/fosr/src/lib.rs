//! Function-on-scalar regression with locally sparse coefficient functions.
//!
//! The model is `y_i(t) = sum_j x_ij beta_j(t) + theta_i(t) + eps_i(t)` observed on a
//! common time grid. Coefficient functions are expanded in a clamped B-spline basis and
//! estimated by minimizing a weighted squared error loss plus a group bridge penalty,
//! where each time point groups the basis coefficients that are active there. The
//! penalty drives whole groups to zero, so fitted coefficient functions are exactly
//! zero on subregions of the domain.
//!
//! Modules:
//! - [`basis`]: clamped B-spline knot construction and evaluation
//! - [`model`]: discretized data objects and prediction
//! - [`weights`]: random-effect covariance estimation and the weight matrix
//! - [`solver`]: nested ADMM solver for the penalized objective
//! - [`inference`]: KKT-based covariance, joint confidence bands, suppression test
//! - [`tuning`]: GLS baseline, adjusted EBIC, and (lambda, alpha) grid search
//! - [`simbench`]: simulation benchmark with seeded replications and support metrics

pub mod basis;
pub mod error;
pub mod inference;
pub mod model;
pub mod simbench;
pub mod solver;
pub mod tuning;
pub mod weights;

pub use basis::{eval_basis, make_knots, BasisSystem, KnotVector};
pub use error::{Error, Result};
pub use inference::{ConfidenceBand, GammaCovariance};
pub use model::{CoefficientCurves, FunctionalDataset, PhasePartition};
pub use solver::{fit_group_bridge, BridgeConfig, BridgeFit};
pub use tuning::{grid_search, GridSpec, TuningGrid};
pub use weights::{estimate_weights, WeightModel};

