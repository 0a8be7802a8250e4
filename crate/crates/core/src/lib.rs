//! SIMP topology optimization driven by the method of moving asymptotes,
//! with an optional acceleration loop that learns a design-to-gradient
//! surrogate from locally sampled simulations and uses it in place of FEM
//! sensitivities on most update steps.

pub mod cli_io;
pub mod error;
pub mod grid_fem;
pub mod mma;
pub mod orchestrator;
pub mod simp;
pub mod surrogate;

pub use error::{Error, Result};
