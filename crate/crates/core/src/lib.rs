//! Simulator and trainer for reinforcement-learned key-frame scheduling in
//! dynamic video segmentation.
//!
//! Videos are abstracted as [`env::Trace`]s: each frame has the quality a
//! full (key) segmentation would reach and a motion magnitude that degrades
//! quality when features are propagated from an earlier key frame instead.
//! On top of that the crate provides a small policy network with analytic
//! gradients ([`policy`]), a set of baseline schedulers ([`schedulers`]), a
//! constrained REINFORCE trainer ([`trainer`]) and evaluation tooling
//! including an exact budgeted oracle ([`eval`]).
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;

pub mod env;
mod error;
pub mod eval;
pub mod gradcheck;
mod linalg;
pub mod policy;
pub mod rng;
pub mod schedulers;
pub mod trainer;

pub use error::{Error, Result};
