//! Hard-sphere gas laboratory.
//!
//! Three descriptions of a tagged particle in a dilute hard-sphere gas on a
//! torus, built to be cross-checked against each other:
//!
//! 1. exact event-driven molecular dynamics ([`md`]),
//! 2. a linear velocity-jump process against a Maxwellian background
//!    ([`lboltz`]),
//! 3. Brownian motion / the heat equation after diffusive rescaling
//!    ([`diffusion`]).
//!
//! [`init`] draws hard-core equilibrium states and tagged-particle
//! perturbations, [`trees`] reconstructs backward collision trees and
//! measures recollisions plus the pathological velocity sets that control
//! them, and [`ensemble`] runs seeded replica ensembles.

pub mod diffusion;
pub mod error;
pub mod ensemble;
pub mod geometry;
pub mod io;
pub mod init;
pub mod lboltz;
pub mod md;
pub mod quad;
pub mod stats;
pub mod tol;
pub mod trees;

pub use error::{Error, Result};
