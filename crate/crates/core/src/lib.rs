//! Posterior sampling for linear Gaussian inverse problems with
//! task-dependent score-based diffusion.

pub mod bench;
pub mod config;
pub mod convergence;
pub mod diffusion;
pub mod error;
pub mod gauss;
pub mod io;
pub mod linop;
pub mod oracle;
pub mod problem;
pub mod samplers;
pub mod scores;
pub mod ucos;

pub use error::{Error, Result};
