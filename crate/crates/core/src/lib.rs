//! Bias-corrected divide-and-conquer estimation of a nonparametric regression
//! curve by quantile-matched composites of local linear quantile fits.
//!
//! The data are split into `m` batches. Each batch fits `J` local linear
//! quantile curves at its own quantile levels, and the center combines the
//! `m·J` curves with weights chosen so that the quantile offsets of an
//! arbitrary (possibly asymmetric) error distribution cancel while the
//! asymptotic variance is minimized.
//!
//! Module map:
//!
//! - [`kernels`]: smoothing kernels and their moments.
//! - [`local_quantile`]: weighted check-loss solver and local polynomial fits.
//! - [`pilot`]: divide-and-conquer Nadaraya–Watson pilots and the residual error model.
//! - [`composite_plan`]: quantile grids, optimal weights and bandwidths.
//! - [`estimator`]: the end-to-end composite fit and its two competitors.
//! - [`experiments`]: simulation designs, metrics and the replication harness.
//! - [`io`]: CSV ingestion and artifact formats.

// `!(a > b)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod composite_plan;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod io;
pub mod kernels;
pub mod local_quantile;
pub mod numeric;
pub mod pilot;

pub use composite_plan::{CompositePlan, QuantileGrid, VarianceModel};
pub use error::{Error, Result};
pub use estimator::{CompositeFit, FitConfig};
pub use kernels::{KernelFamily, KernelSpec};
pub use local_quantile::{LocalFit, ObservationBatch};
pub use pilot::{ErrorModel, PilotCurves};

/// Quantile levels are kept inside `(DELTA_TAU, 1 - DELTA_TAU)`.
pub const DELTA_TAU: f64 = 0.01;
