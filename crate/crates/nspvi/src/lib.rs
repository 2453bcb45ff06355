//! Deep Neyman-Scott process toolkit: hierarchical temporal point process
//! simulation, auxiliary-variable MCMC posterior sampling, amortized
//! variational posteriors trained by inclusive-KL minimization, MCEM
//! parameter learning, and time-budgeted next-event prediction.

pub mod bench;
pub mod cif;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod mcmc;
pub mod model;
pub mod predict;
pub mod rng;
pub mod simulate;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use kernel::WeibullKernel;
pub use model::{EventSeq, HiddenEvents, ModelParams};
