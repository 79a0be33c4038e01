//! Effective rank of kernel Gram matrices, exactly and at scale.
//!
//! The effective rank `r_eff(K) = tr(K)^2 / ||K||_F^2` is a smooth count of
//! a PSD matrix's dominant eigendirections. This crate provides:
//!
//! * exact spectral tools for dense symmetric matrices ([`linalg`]);
//! * closed-form kernels with samplable data distributions and kernel
//!   moments, whose ratio `a^2 / b` is the large-sample limit of `r_eff`
//!   ([`kernels`]);
//! * finite-width and infinite-width ReLU tangent kernels ([`ntk`]);
//! * a CountSketch/probe entry estimator and the subsampled effective-rank
//!   estimator built on it ([`sketch`], [`estimator`]);
//! * experiment harnesses for the limit, concentration, width-stability,
//!   and power-law behaviors ([`experiments`]);
//! * a CLI and file formats ([`cli`], [`io`]).
//!
//! Start with the runnable programs under `examples/`, one per capability.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod ntk;
pub mod rng;
pub mod sketch;

pub use error::{Error, Result};
