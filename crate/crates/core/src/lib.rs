//! KV shifting attention laboratory core.
//!
//! Everything in this crate is pure computation: a small reverse-mode tensor
//! engine, vanilla and KV shifting attention, a Llama-style decoder, synthetic
//! induction/n-gram data generators, AdamW training, and the numerical checks
//! for the induction-head constructions. File formats, presets and the CLI
//! live in the `kvshift-lab` crate.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is off.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod real;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use real::{Precision, Real};
pub use rng::RngStream;
pub use tensor::Tensor;
