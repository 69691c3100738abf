//! Simulation and verification toolkit for multidimensional reflected
//! Brownian motion (RBM) on the nonnegative orthant.
//!
//! The crate is organized bottom-up:
//!
//! - [`network_model`]: routing/reflection matrices, assumption certificates
//!   and the absorption matrices `Λ(S)` of the routing chain.
//! - [`skorokhod`]: discrete Skorokhod maps (orthogonal closed form and
//!   general M-matrix reflection through projected Gauss–Seidel).
//! - [`sim`]: Brownian drivers, RBM paths, the dominating process and
//!   stationary samplers.
//! - [`hitting`]: hitting times, the zero-visit cascade `η^k` and its counter.
//! - [`bounds`]: closed-form rate machinery (Lyapunov function, parameter
//!   selection, convergence bound and relaxation time).
//! - [`experiments`]: coupling study, scaling study and the invariant battery
//!   used by the command-line harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod error;
pub mod experiments;
pub mod hitting;
pub mod io;
pub mod network_model;
pub mod rng;
pub mod sim;
pub mod skorokhod;
pub mod stats;

pub use error::{Error, Result};
pub use network_model::{AssumptionCertificate, ContractionFit, NetworkModel, SubsetMask};
pub use skorokhod::{PathGrid, SkorokhodSolution};

/// Version string embedded in every output manifest.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
