//! Wind field estimation from gridded scalar image sequences.
//!
//! The estimator models the standardized image sequence as a locally
//! stationary Gaussian process whose covariance drifts with the wind: the
//! correlation between two pixels separated by spatial lag `d` and time lag
//! `h` is `exp(-sqrt(|d - u h|^2/a1^2 + h^2/a2^2))`. Maximizing the windowed
//! Gaussian likelihood over `(a1, a2, u)` in a sliding window yields a local
//! wind estimate with an observed-information variance, which feeds an
//! inverse-variance-weighted spatial smoother. A block-matching baseline
//! (SSD matching, nested tracking, DBSCAN dominant cluster), an exact
//! Gaussian simulation harness, and a prediction/MSPE evaluation suite round
//! out the pipeline.

pub mod cli;
pub mod covmodel;
pub mod dmwa;
pub mod error;
pub mod evaluate;
pub mod gridstore;
pub mod likelihood;
pub mod linalg;
pub mod preprocess;
pub mod scanner;
pub mod simulator;
pub mod smoother;
pub mod util;

pub use error::{Error, Result};
