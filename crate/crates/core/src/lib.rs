//! Deep compositional spatial models.
//!
//! A nonstationary spatial process is modelled as a stationary-ish low-rank
//! process on a *warped* domain: the geographic domain is pushed through a
//! composition of simple injective maps (axial sigmoid warpings, radial
//! expansions/contractions, Möbius transformations), each followed by an
//! affine rescaling to the unit hypercube, and a bisquare-basis process with
//! exponential weight covariance sits on top.
//!
//! Two fitting routes are provided:
//! * [`siwgp`] — the warping weights are deterministic unknowns estimated by
//!   maximum (integrated) likelihood; predictions are Gaussian.
//! * [`sdsp`] — the transformed warping weights are random with Gaussian
//!   variational posteriors; fitting maximises a Monte Carlo evidence lower
//!   bound and predictions are Gaussian mixtures.
//!
//! Supporting modules cover a stationary Matérn-3/2 baseline ([`baseline`]),
//! proper scoring rules ([`scoring`]) and test-process simulators
//! ([`simulate`]).
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats and the CLI
//! live in the companion `deepwarp` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod domain;
pub mod error;
pub mod rng;
pub mod scoring;
pub mod sdsp;
pub mod simulate;
pub mod siwgp;
pub mod toplayer;
pub mod warp;

pub use domain::{Dataset, Domain, KnotSet, LocationSet, PredictiveSummary};
pub use error::{Error, Result};
pub use rng::RngStream;
