//! Unit-scaled maximal update parametrization (u-μP) building blocks.
//!
//! This crate is `no_std` + `alloc`. It contains everything that is pure
//! computation: emulated number formats, a reverse-mode autodiff tape with
//! directional scaling hooks, the unit-scaled op catalog, the residual
//! schedule, abc-parametrization rules, AdamW, a pre-norm transformer, the
//! training loop over an in-memory token stream and the hyperparameter search
//! strategies. File formats, the command-line front end and parallel sweep
//! dispatch live in the `uscale` companion crate.
//!
//! Enable the `std` feature to let the matmul backend pick CPU-specific
//! kernels at run time.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod error;
pub(crate) mod math;

pub mod model;
pub mod numerics;
pub mod optim;
pub mod parametrization;
pub mod residual;
pub mod rng;
pub mod scaled_ops;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{FloatFormat, FormatKind, ScaleStats};
pub use rng::Rng;
pub use tensor::{Gradients, Tape, Tensor, Var};
