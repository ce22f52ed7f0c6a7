//! Equation-free coarse control of spatially distributed dynamics around a
//! learned random-embedding neural-operator timestepper.
//!
//! The crate is organised along the pipeline:
//!
//! - [`plant`]: finite-difference Bratu reference plant, actuators, analytic steady states.
//! - [`datagen`]: seeded snapshot datasets from uncontrolled trajectories.
//! - [`randonet`]: random trunk/branch embeddings and least-squares output weights.
//! - [`krylov`]: JVPs, GMRES, Newton-Krylov fixed points, Arnoldi.
//! - [`reduction`]: slow basis, reduced dynamics `F`, actuator influence `D`.
//! - [`control`]: discrete LQR and pole placement on `(F, D)`.
//! - [`simulate`]: open- and closed-loop runs on either plant.
//! - [`pipeline`]: configuration, staged artifacts and reports.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod datagen;
pub mod error;
pub mod field;
pub mod io;
pub mod krylov;
pub mod pipeline;
pub mod plant;
pub mod randonet;
pub mod reduction;
pub mod simulate;

pub use error::{Error, Result};
pub use field::{Field, Grid};
