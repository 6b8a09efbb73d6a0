//! Dynamic sparse attention engine.
//!
//! A low-cost prediction path estimates the attention score matrix, a mask
//! generator keeps the important positions of each row, and the attention is
//! then executed sparsely (SDDMM → sparse softmax → SpMM). The crate also
//! carries the joint training loop for the predictor, an analytic MAC/energy
//! model and a memory-access simulator for row-parallel dataflows.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod costmodel;
pub mod dataflow;
pub mod error;
pub mod linalg;
pub mod maskgen;
pub mod predictor;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{Matrix, Precision, Rng};
pub use maskgen::SparseMask;
