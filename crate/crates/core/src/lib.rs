//! Selection of the number of hidden states of a Gaussian hidden Markov model by
//! marginal likelihood.
//!
//! For every candidate K the pipeline draws from the posterior with a Gibbs sampler, fits an
//! over-dispersed mixture importance function to the draws in an unconstrained coordinate
//! system, restricts it to a bounded region and estimates the normalizing constant of the
//! posterior by importance sampling or reciprocal importance sampling. The K with the largest
//! estimated marginal likelihood is selected. A Baum-Welch/BIC baseline, a simulation harness
//! and known-constant benchmark targets are included.
//!
//! HMM, EM and reparameterization code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision types used by the estimation pipeline.

pub mod bench;
pub mod em;
pub mod error;
pub mod gibbs;
pub mod harness;
pub mod hmm;
pub mod impfn;
pub mod io;
pub mod ncest;
pub mod prior;
pub mod reparam;
pub mod scalar;
pub mod select;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = hmm::HmmParams<f64>;
pub type Params32 = hmm::HmmParams<f32>;
pub type Trajectory = hmm::Trajectory<f64>;
pub type StationaryDist = hmm::StationaryDist<f64>;
pub type EmResult = em::EmResult<f64>;
pub type Point = reparam::UnconstrainedPoint<f64>;
