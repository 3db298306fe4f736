//! Second-order pruning of small neural networks.
//!
//! The inverse of the dampened empirical Fisher is estimated block-wise by
//! sequential rank-one (Sherman–Morrison) updates and fed to the Optimal
//! Brain Surgeon statistics to choose which weights to remove and how to
//! compensate the remaining ones. Magnitude, OBD and diagonal-Fisher
//! pruners are provided as baselines.
//!
//! All numerical code is generic over [`Real`]; the aliases at the crate
//! root fix the scalar to `f64`, which is what the command-line tool uses.

pub mod cli;
pub mod error;
pub mod fisher;
pub mod io;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod pruner;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod space;

pub use error::{Error, Result};
pub use scalar::Real;

/// Flat parameter vector of an `f64` network.
pub type Params = space::ParamSpace<f64>;
/// `f64` multilayer perceptron.
pub type Mlp = model::MlpModel<f64>;
/// `f64` dataset.
pub type Data = io::Dataset<f64>;
/// One `f64` rank-one Fisher term.
pub type Sample = fisher::GradSample<f64>;
/// Block-wise inverse empirical Fisher in `f64`.
pub type WoodFisher = fisher::ChunkedFisherInverse<f64>;
/// Diagonal empirical Fisher in `f64`.
pub type DiagFisher = fisher::DiagonalFisher<f64>;
/// Dense `f64` matrix used by the reference solvers.
pub type Matrix = oracle::DenseMatrix<f64>;
/// Pruning statistic over `f64` weights.
pub type Stat = pruner::PruneStat<f64>;
/// Pruning decision over `f64` weights.
pub type Decision = pruner::PruneDecision<f64>;
