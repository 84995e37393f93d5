//! Missing-aware multimodal pretraining with a shared prototype memory.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration files
//! and the command line live in the `protomiss` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod autodiff;
pub mod cohort;
pub mod config;
pub mod downstream;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod prototype;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{grad_check, AttentionLayout, GradCheckReport, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
