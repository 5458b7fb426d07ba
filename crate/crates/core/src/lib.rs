//! Wide-CLS-token transformers at desk scale.
//!
//! This crate holds the numeric substance: a minimal dense-tensor engine
//! with reverse-mode differentiation and an instrumented FLOP counter, the
//! plain / registers / jumbo ViT variants, the closed-form per-layer cost
//! model with its register-matching solver, parameter-controlled jumbo
//! variants (layer tying and low-rank adapters), the training loop, and a
//! patch-based time-series adapter. Everything here is `no_std` (with
//! `alloc`); IO, file formats, and the command-line live in the companion
//! `jumbo-cli` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod config;
pub mod cost;
pub mod efficiency;
pub mod flops;
pub mod model;
pub mod rank;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod timeseries;
pub mod train;
pub mod weights;

pub use config::{JumboFfnMode, ModelConfig, Variant};
pub use flops::{FlopCounter, MatmulDims};
pub use model::{patchify, reassemble_jumbo, split_jumbo, Model};
pub use scalar::Scalar;
pub use tape::{Axis, Grads, NodeId, Tape};
pub use tensor::{Tensor, TensorError};
