//! Power system state estimation and forecasting toolkit.
//!
//! The crate covers the full experimental loop for data-driven grid
//! monitoring:
//!
//! - [`grid`]: MATPOWER-style case parsing, bus admittance assembly, and a
//!   Newton-Raphson AC power flow used to synthesize ground-truth states.
//! - [`measurement`]: quadratic SCADA measurement models `z_m = v' H_m v`
//!   over rectangular voltage coordinates, with Jacobians and seeded noise.
//! - [`solvers`]: the least-absolute-value prox-linear solver with its ISTA
//!   inner loop, plus a Gauss-Newton weighted least-squares baseline.
//! - [`neuralnet`]: dense-network machinery (hand-derived reverse-mode
//!   gradients, Adam) hosting the unrolled prox-linear estimator network and
//!   plain feed-forward baselines.
//! - [`forecaster`]: deep recurrent one-step state forecasting, a VAR(1)
//!   baseline, and forecast-driven imputation of missing measurements.
//! - [`pipeline`]: load-series synthesis/ingestion, dataset generation, the
//!   normalized RMSE metric, and schema-versioned persistence.
//!
//! Data-parallel loops (dataset generation, per-sample solves, minibatch
//! gradients) run on rayon when the default `parallel` feature is enabled and
//! fall back to equivalent sequential code without it; both paths produce
//! bit-identical results.

pub mod cases;
pub mod error;
pub mod forecaster;
pub mod grid;
pub mod linalg;
pub mod measurement;
pub mod neuralnet;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
