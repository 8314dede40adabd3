//! Two-timescale quasi-stochastic approximation.
//!
//! Root finding driven by deterministic quasi-periodic exploration, with a
//! vanishing slow gain and a constant fast gain. The crate provides the
//! probing signals, exact Poisson solutions for trigonometric-polynomial
//! fields, a fixed-step integrator with optional low-pass filtering of the
//! fast state, mean-flow estimation, Lyapunov exponents of the frozen fast
//! dynamics, an extremum-seeking controller built on the same machinery, and
//! experiment drivers that measure the convergence rates.

pub mod dynamics;
pub mod esc;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod lyapunov;
pub mod meanflow;
pub mod models;
pub mod poisson;
pub mod probing;

pub use error::{QsaError, Result};
