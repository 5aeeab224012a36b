//! Matrix-normal modeling toolkit.
//!
//! Structured covariances with matrix-free solves and log-determinants
//! ([`covmodels`]), Kronecker triangular solvers ([`kron`]), the matrix-normal
//! density with marginalization and conditioning ([`matnorm`]), and two
//! estimators built on them: MN-RSA for representational similarity
//! ([`mnrsa`]) and MN-SRM / DP-SRM shared response models fit by ECM
//! ([`mnsrm`]). [`synth`] generates seeded synthetic benchmarks and [`cli`]
//! exposes everything on the command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod covmodels;
pub mod error;
pub mod io;
pub mod kron;
mod linalg;
pub mod matnorm;
pub mod mnrsa;
pub mod mnsrm;
pub mod optim;
pub mod synth;

pub use covmodels::{make_cov, CovModel, CovSpec, Covariance};
pub use error::{Error, Result};
pub use matnorm::MatnormDist;
