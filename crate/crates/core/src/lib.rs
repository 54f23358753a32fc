//! Multicalibration for elicitable properties.
//!
//! The crate covers four workflows over finite label distributions in `[0, 1]`:
//!
//! * batch multicalibration of a single property (mean, quantile, ...) against a
//!   group family, with exact per-group auditing;
//! * joint multicalibration of a conditionally elicitable pair such as
//!   (mean, variance) or (quantile, CVaR);
//! * online multicalibration against an adaptive adversary, driven by
//!   exponential weights and an exact minimax solver for each stage game;
//! * small constructive demos showing where plain property calibration fails
//!   to identify variance or CVaR.
//!
//! ```
//! use calibra::{batch, dataset, properties};
//!
//! let data = dataset::make_variance_counterexample();
//! let groups =
//!     dataset::GroupFamily::from_cell_sets(&data, &[("x0", &["x0"]), ("x1", &["x1"])]).unwrap();
//! let opts = batch::BatchOptions { alpha: Some(0.01), ..Default::default() };
//! let run = batch::batch_multicalibrate(&properties::mean_property(), &data, &groups, 9, &opts)
//!     .unwrap();
//! assert_eq!(run.predictor.current, vec![0.1, 0.9]);
//! ```

pub mod audit;
pub mod batch;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod joint;
pub mod online;
pub mod properties;

pub use error::{Error, Result};
