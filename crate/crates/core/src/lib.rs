//! Multiscale residual convolutional networks.
//!
//! Forward propagation is a forward-Euler discretization of
//! `dy/dt = σ(K(s(t)) y + b(t))`. Because stencils are read as discretized
//! continuous kernels, a trained network can be moved to a coarser or finer
//! image resolution (Galerkin transfer of its stencils, see [`stencil`]) or
//! to a deeper network at the same final time (see [`multiscale`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod grid;
pub mod model_io;
pub mod multiscale;
pub mod propagation;
pub mod stencil;
pub mod training;

pub use error::{Error, Result};
