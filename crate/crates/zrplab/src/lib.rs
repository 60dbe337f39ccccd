//! Numerical laboratory for zero-range particle dynamics on the complete
//! graph and its nearest-neighbor segment variant.
//!
//! The library builds the canonical and grand-canonical measures of the
//! model exactly, assembles the Markov generator on the enumerated
//! configuration space, and estimates the constants that govern relaxation
//! to equilibrium: the spectral gap, the logarithmic Sobolev constant
//! `s(L, N)`, and the entropy dissipation constant `gamma(L, N)`. Beyond
//! enumeration scale, a kinetic Monte Carlo engine provides empirical
//! relaxation diagnostics.
//!
//! Modules mirror the layers of the construction:
//!
//! * [`rates`] — jump-rate functions `c(n)`, increment certificates, and the
//!   uniformly-increasing regularization transform.
//! * [`measures`] — single-site, grand-canonical, convolved and canonical
//!   measures, fugacity solving, and the log-concave potential split.
//! * [`statespace`] — configuration enumeration, sparse generators, and the
//!   uniformized semigroup.
//! * [`functionals`] — entropy, Dirichlet forms, conditional decompositions,
//!   and the covariance / exponential-moment probes.
//! * [`onedim`] — birth-death chains and one-vertex entropy dissipation.
//! * [`constants`] — gap / log-Sobolev / entropy-dissipation estimates and
//!   the recursion probe.
//! * [`kmc`] — event-driven simulation with exact stationary starts.
//! * [`config`], [`report`] — experiment driving and CSV/JSON artifacts.

pub mod ascent;
pub mod cli;
pub mod config;
pub mod constants;
pub mod functionals;
pub mod kmc;
pub mod measures;
pub mod onedim;
pub mod rates;
pub mod report;
pub mod statespace;

pub use rates::RateFunction;
pub use statespace::{Flavor, SparseGenerator, StateSpace};


/// Version string stamped into manifests and the FFI layer.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
