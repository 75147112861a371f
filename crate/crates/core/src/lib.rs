//! Fast subset-scan anomaly detection.
//!
//! Two detectors share one log-likelihood-ratio framework:
//!
//! * [`gpss`]: Gaussian process subset scan for correlated real-valued data
//!   (e.g. counts per location and month), searching every subset of each
//!   point's k-nearest-neighbour neighbourhood.
//! * [`mdts`]: multidimensional tensor scan for case data with discrete
//!   attributes, searching Cartesian-product subspaces against a
//!   nonnegative CP baseline.
//!
//! Significance comes from randomization testing ([`inference`]).

pub mod error;
pub mod gp;
pub mod gpss;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod mdts;
pub mod pipeline;
pub mod stats;
pub mod tensor;

pub mod cli;

pub use error::{Error, Result};
