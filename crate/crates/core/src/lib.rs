//! Optimal input design for parameter estimation of a single-particle
//! lithium-ion cell model.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] simulates the cell voltage for a scaled parameter vector and a
//!   piecewise-constant current.
//! * [`sensitivity`] turns finite-difference sensitivities into information
//!   matrices and D-optimal design objectives.
//! * [`estimation`] fits parameters to stacked voltage data by bounded
//!   least squares and runs randomized restart studies.
//! * [`design`] alternates design, data acquisition and estimation, for a
//!   collection of short inputs or one concatenated profile.
//! * [`experiment`] and [`io`] cover configuration files, measurement CSVs,
//!   synthetic fixtures and report bundles.

// `!(a > b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod io;
pub mod model;
pub mod optim;
pub mod sensitivity;

pub use error::{Error, Result};
