//! Finite-volume toolkit for the chemotaxis-consumption system
//! `∂t u − Δu = −∇·(u∇v)`, `∂t v − Δv = −uˢv (+ f v 1_Ωc)`.
//!
//! The crate provides a truncated, energy-stable time stepper written in the
//! variables `(u, z = √(v + α²))`, diagnostics for its discrete invariants and
//! energy terms, and an adjoint-based projected-gradient solver for the
//! bilinear control problem.

// negated float comparisons reject NaN; index loops mirror the stencils
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod benchmarks;
pub mod control;
pub mod diagnostics;
pub mod error;
pub mod export;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod par;
pub mod scheme;

pub use error::{Error, Result};
pub use grid::{FaceData, Field, FluxScheme, GridSpec};
pub use model::ModelParams;
pub use scheme::{SchemeParams, TimeStep, Trajectory, VVariant};
