//! Simulation and verification laboratory for branching symmetric Hunt
//! processes whose branching clock is a positive continuous additive
//! functional.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: offspring laws, model descriptions and the closed-form
//!   catalog (branching Ornstein-Uhlenbeck, branching killed Brownian motion
//!   on an interval).
//! * [`motion`]: exact or controlled-error transition sampling, transition
//!   densities and additive functionals along paths.
//! * [`forest`]: forward simulation of the branching system with Ulam-Harris
//!   labels, snapshots `X_t` and the martingale `M_t = e^{λ₁t} X_t(h)`.
//! * [`spine`]: simulation under the size-biased measure, Radon-Nikodym
//!   bookkeeping and the spine decomposition.
//! * [`spectral`]: grid discretisation of the Feynman-Kac quadratic form,
//!   eigenpairs, h-transformed kernels and integrability/ultracontractivity
//!   checks.
//! * [`verify`]: Monte Carlo experiments producing structured reports.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forest;
pub mod model;
pub mod motion;
pub mod quad;
pub mod replicas;
pub mod rng;
pub mod spectral;
pub mod spine;
pub mod stats;
pub mod verify;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use forest::{Forest, Node, Snapshot, UlamLabel};
pub use model::{ModelSpec, OffspringLaw, SpectralTriple};
pub use rng::LabRng;
pub use spine::SpineTree;
