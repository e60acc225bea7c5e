//! Visual informative part attention for referring image segmentation.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that is pure
//! computation: a reverse-mode tape over dense row-major tensors, the layer
//! zoo built on it, the toy vision/language encoders, the visual expression
//! generator, the segmentation decoder, losses, metrics, the optimizer and a
//! synthetic scene generator. File formats and the command line live in the
//! companion `vipa` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod veg;

mod kernels;

pub use error::{Error, Result};
pub use scalar::{Precision, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
