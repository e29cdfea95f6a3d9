//! Deep equilibrium reconstruction for linear inverse problems.
//!
//! A learned iteration map `f(x; y)` built from a measurement operator
//! `A` and a small convolutional regularizer is driven to its fixed point
//! by Picard, Anderson or Broyden iteration. Training differentiates
//! through the fixed point implicitly, so memory does not grow with the
//! number of forward iterations. Deep-unrolled and plug-and-play variants
//! share the same maps for comparison.

pub mod bench;
pub mod conv;
pub mod dataset;
pub mod deq;
pub mod error;
pub mod exec;
pub mod fixpoint;
pub mod io;
pub mod linops;
pub mod metrics;
pub mod noise;
pub mod optim;
pub mod regnet;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Shape, Tensor};
