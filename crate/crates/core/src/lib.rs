//! Differentiation core for curvature-rescaled training.
//!
//! Alongside the usual forward and backward passes, every layer provides a
//! tangent map and a closed-form second-order contribution, so a third
//! forward sweep yields the exact directional curvature `<H d, d>` of the
//! batch loss. The [`rescale`] module turns that curvature into a step-size
//! factor and [`optim`] supplies directions and learning-rate schedules.
//!
//! The crate is `no_std` (it needs `alloc`). Enable the `std` feature to get
//! `std::error::Error` on [`Error`].

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

mod error;

pub mod engine;
pub mod layers;
pub mod optim;
pub mod rescale;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BatchView, ParamVec, Tensor};
