//! Desk-scale hybrid simulation of vapor-compression cycles.
//!
//! The library couples learned component models (recurrent latent-ODE heat
//! exchanger surrogates, static compressor/valve maps, an online output
//! corrector) with system-level cycle solvers (an explicit algebraic stepper
//! and a variable-order BDF integrator in two Jacobian-policy flavors), plus
//! Bayesian optimization of solver parameters. A fully known synthetic plant
//! provides training data and benchmark trajectories.

pub mod autodiff;
pub mod corrector;
pub mod dae;
pub mod nn;
pub mod error;
pub mod nonlinear;
pub mod norm;
pub mod pinode;
pub mod plant;
pub mod rng;
pub mod static_models;
pub mod system;

pub use autodiff::{Tape, Tensor};
pub use error::{Error, Result};
