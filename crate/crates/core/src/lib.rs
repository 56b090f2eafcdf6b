//! Simulation of inefficient balanced and eight-port homodyne detection on a
//! truncated Fock space, the Gaussian-smeared covariant phase space observables
//! that appear in the high-amplitude limit, and the Fourier inversion that
//! recovers ideal statistics from inefficient ones.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod eightport;
pub mod error;
pub mod fock;
pub mod grid;
pub mod homodyne;
pub mod io;
pub mod special;
pub mod tomography;

pub use error::{Error, Result};
