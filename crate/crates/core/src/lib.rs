//! Relaxation dynamics of a two-level system in a continuous spin bath.
//!
//! The pipeline maps the spin bath onto an effective harmonic bath
//! ([`bath`]), decomposes its correlation function into exponentials
//! ([`expfit`]), propagates the dissipaton hierarchy ([`deom`]) and extracts
//! populations and entropies ([`observables`]). [`runner`] wires the stages
//! together behind a configuration file and a CLI.

// `!(x > 0.0)` rejects NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bath;
pub mod exec;
pub mod deom;
pub mod expfit;
pub mod observables;
pub mod quadrature;
pub mod runner;

pub use exec::Execution;
