//! Direct collocation for optimal control of second-order ODEs.
//!
//! Two transcriptions are provided at any collocation order: standard
//! collocation (SC) of the state-augmented system `x = (q, q̇)` and
//! position-based collocation (PC), which collocates `q̈ = f` directly with
//! half as many stage unknowns.
//!
//! - [`basis`]: Gauss-Legendre / Radau IIA points, Lagrange and semi-Hermite bases.
//! - [`model`]: ODE and optimal control problem traits, the overhead crane.
//! - [`integrator`]: SC/PC simulation, dense output, convergence studies.
//! - [`transcribe`]: the sparse NLP and its structural counts.
//! - [`nlpsolve`]: a primal-dual interior-point solver for the NLP.
//! - [`experiments`]: the convergence, structure and crane benchmark harness.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod basis;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod integrator;
pub mod model;
pub mod nlpsolve;
pub mod transcribe;

pub use error::{Error, Result};
