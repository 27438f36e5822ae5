//! Universal lp-robustness for piecewise-affine ReLU classifiers.
//!
//! The crate is organised bottom-up:
//!
//! - [`net`]: fully connected ReLU networks and their exact linear-region
//!   description at any input.
//! - [`geometry`]: minimal lp-norms outside the union and the convex hull of
//!   an l1-ball and an l∞-ball, with brute-force oracles.
//! - [`certify`]: point-to-hyperplane distances, single-norm certificates and
//!   the universal lp certificate built from the l1 and l∞ distances.
//! - [`oracle`]: an upper bound on the true robustness radius by search, used
//!   to validate certificates on tiny networks.
//! - [`mmr`] and [`train`]: the MMR regularizers, their gradients and the
//!   training protocol.
//! - [`attacks`]: PGD attacks wrt l1, l2 and l∞.
//! - [`data`] and [`eval`]: dataset containers, synthetic generators and the
//!   lower/upper bound evaluation report.
//!
//! Classes are 0-based inside the library. Files on disk use 1-based labels.

pub mod attacks;
pub mod certify;
pub mod data;
mod error;
pub mod eval;
pub mod geometry;
pub mod mmr;
pub mod net;
pub mod norm;
pub mod oracle;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use net::{ActivationPattern, ReluNet, RegionDescription};
pub use norm::NormOrder;
