//! Reduced-resolution fluid simulation with a learned physical latent space.
//!
//! An encoder reshapes a linearly down-sampled fine frame into the state of a
//! coarse incompressible flow solver. The solver is advanced in time and an
//! adjustment network corrects each coarse step. A decoder restores the fine
//! frame. Every stage is differentiable, so the three networks are trained
//! end-to-end through `N` solver steps.
//!
//! Module map:
//! - [`grid`]: centered and staggered fields, sampling, resampling, operators
//! - [`autodiff`]: tensors and a reverse-mode tape
//! - [`solver`]: semi-Lagrangian advection, explicit diffusion, projection
//! - [`nn`]: convolutions and the network architectures
//! - [`scenarios`]: reference data generation and the dataset format
//! - [`training`]: rollouts, the two-term loss, Adam, training loops
//! - [`eval`]: metrics, baselines, reports, runtime benchmarks

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod grid;
pub mod nn;
pub mod rng;
pub mod scenarios;
pub mod solver;
pub mod training;

pub use autodiff::{Gradients, Real, Tape, Tensor, Var};
pub use error::{Error, Result};
