//! Byzantine-robust federated learning simulator.
//!
//! The server keeps a second-order exponential-smoothing forecast of the
//! global model; each round it scores every client upload by distance to
//! the forecast, splits the scores with an exact 1-D 2-means, aggregates
//! only the cluster nearer the forecast, and folds the result back into
//! the smoothing state. Classical robust baselines (coordinate median,
//! trimmed mean, Multi-Krum, FABA) and standard poisoning attacks (label
//! flipping, sign flipping, LIE) are included for comparison, along with a
//! deterministic experiment harness.

pub mod aggregation;
pub mod attack;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod param;
pub(crate) mod seeds;
pub mod sim;
pub mod smoothing;
pub mod trainer;

pub use error::{Error, Result};
pub use param::ParamVector;
