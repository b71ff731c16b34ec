//! Bilevel learning of weights in variational image denoising.
//!
//! The lower level is a Huberised TV, TGV² or ICTV denoising problem with
//! Gaussian, Poisson, impulse or mixed fidelities, solved by a globalised
//! primal–dual semismooth Newton method. The upper level minimises
//! `½‖u − f₀‖²` over the weights with adjoint gradients and BFGS, optionally
//! on dynamically grown subsamples of a training set.

pub mod adjoint;
pub mod bilevel;
pub mod cli;
pub mod error;
pub mod fidelity;
pub mod grid;
pub mod huber;
pub mod io;
pub mod metrics;
pub mod sampling;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
