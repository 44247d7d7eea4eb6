//! Generalization certificates for linear-in-parameters classifiers trained by
//! (discretized) gradient flow.
//!
//! The training dynamics `dh/dt = -grad C(h)` move an initial hypothesis `h0`,
//! drawn from a known prior density, to a final hypothesis `h_T`. Because the
//! flow is deterministic, the log-density of the pushforward distribution at
//! `h_T` can be tracked exactly along the trajectory: it grows by the integral
//! of the objective's Laplacian. That single scalar, combined with the prior
//! log-density ratio between `h0` and `h_T`, yields a high-probability upper
//! bound on the population 01-error of `h_T`.
//!
//! The crate is organized as:
//!
//! - [`bounds`]: binary relative entropy, its partial inverse, and the two
//!   certificate formulas (square-root and kl-inverse forms) with the
//!   union-bound penalty over a grid of stopping times.
//! - [`objective`]: the [`objective::Objective`] trait (value, gradient,
//!   Laplacian) plus generic wrappers.
//! - [`flow`]: fixed-step integrators for the augmented system
//!   `(h, int Laplacian)`, batch schedules, backward integration, and the
//!   verification identities for the tracked integral.
//! - [`prior`]: isotropic Gaussian initialization distributions.
//! - [`linear`]: random-feature linear models, the three surrogate objectives
//!   (linear, quadratic + ridge, cross-entropy), and their closed-form flows.
//! - [`data`]: Gaussian-cluster toy data, IDX image ingestion, batch plans.
//! - [`experiment`]: end-to-end certificate runs, width-scaling and
//!   discretization studies, CSV output.
//!
//! The `examples/` directory contains one runnable example per capability;
//! the `flowcert` binary exposes the same studies as subcommands.

pub mod bounds;
pub mod data;
pub mod experiment;
pub mod flow;
pub mod linear;
pub mod objective;
pub mod prior;

pub use bounds::{kl_bound, mcallester_bound, BoundCertificate, BoundInputs};
pub use flow::{integrate, FlowResult, FlowState, IntegratorConfig, Scheme};
pub use objective::Objective;
pub use prior::{IsotropicGaussian, Prior};

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("flow diverged at t = {t}: {reason} (max |h| = {max_norm:e})")]
    Diverged { t: f64, reason: String, max_norm: f64 },

    #[error("undefined result: {0}")]
    UndefinedResult(String),

    #[error("near-singular matrix: eigenvalue {min_eig:e} below floor {floor:e}")]
    NearSingular { min_eig: f64, floor: f64 },

    #[error("{path}: bad IDX file: {reason}")]
    IdxFormat { path: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
