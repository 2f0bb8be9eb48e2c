//! Finite-element forward solvers and boundary-data reconstruction for
//! quasilinear conductivity equations `div(a(u, grad u) grad u) = 0` on a disk.

pub mod conductivity;
pub mod dnmap;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod pde;
pub mod reconstruct;

pub use error::{Error, Result};
