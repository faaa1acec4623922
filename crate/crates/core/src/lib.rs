//! Zero-shot human-object interaction detection with conditional
//! multi-modal prompts.
//!
//! The crate is `no_std` (it needs `alloc`): everything here is pure
//! computation. File formats, checkpoints and the command line live in the
//! `cmmp` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod head;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prompts;
pub mod rng;
pub mod synth;
pub mod train;
pub mod zeroshot;

pub use autograd::{Grads, Graph, Param, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use linalg::Matrix;
