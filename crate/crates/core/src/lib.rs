//! LASSO for random designs with adaptive-TAP de-biasing.
//!
//! The pipeline: draw an instance ([`signal`]), fit the LASSO ([`lasso`]),
//! turn the active density into spectral quantities of the design law
//! ([`spectral`]), and build local fields, de-biased estimates, confidence
//! intervals and p-values ([`inference`]). [`selection`] covers λ and σ²
//! selection and [`experiment`] runs seeded multi-replication studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod lasso;
pub mod normal;
pub mod quadrature;
pub mod rng;
pub mod selection;
pub mod signal;
pub mod spectral;
pub mod util;

pub use error::{Error, Result};
