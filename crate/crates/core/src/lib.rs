//! Relative-similarity testing with the anchor-based maximum discrepancy (AMD).
//!
//! Given samples `Z ~ U` (the anchor), `X ~ P` and `Y ~ Q`, the test answers
//! two questions at once: which of `P` and `Q` is closer to `U`, and whether
//! that relationship is statistically significant.
//!
//! The work is split in two phases on disjoint halves of the data:
//!
//! 1. [`phase1`] learns a kernel for each possible direction by gradient
//!    ascent on the U-statistic estimator (regularized with augmented
//!    samples that sit at equal distance from the anchor), then keeps the
//!    kernel with the larger absolute statistic. Its sign is the inferred
//!    direction `F`.
//! 2. [`phase2`] tests `F · d > 0` on the held-out half with a wild-bootstrap
//!    threshold.
//!
//! ```text
//! d^k(U,P,Q) = <mu_U - (mu_P + mu_Q)/2, mu_P - mu_Q>_H
//!            = E k(z,x) - E k(z,y) - E k(x,x')/2 + E k(y,y')/2
//! ```
//!
//! A positive value means `P` is closer to `U`; a negative one means `Q` is.
//!
//! [`synthetics`] and [`harness`] provide Gaussian/Laplace benchmark
//! generators, closed-form population values, and a Monte Carlo runner for
//! calibration and power studies.

pub mod error;
pub mod estimator;
pub mod harness;
pub mod kernels;
pub mod phase1;
pub mod phase2;
pub mod rng;
pub mod synthetics;
pub mod table;

pub use error::{AmdError, Result};
pub use estimator::{Direction, DiscreteDistribution, HMatrix, SampleTriple};
pub use kernels::{DeepKernelParams, GaussianParams, KernelParams, NetworkParams, ParamGradient};
pub use harness::{ExperimentConfig, Method, TrialRecord};
pub use phase1::{Phase1Config, Phase1Result};
pub use phase2::{TestConfig, TestOutcome};


