//! Core library of the synthprobe workspace.
//!
//! Everything in here is pure computation: a small dense-tensor type with
//! reverse-mode automatic differentiation ([`tape`]), the Lambda layer family
//! with decorrelated positional encodings ([`lambda`]), generators for the
//! three synthetic datasets ([`datasets`]), the evaluation metrics
//! ([`metrics`]) and a deterministic trainer for the probe networks
//! ([`train`]).
//!
//! The crate is `no_std` (with `alloc`); all file formats, the CLI and every
//! other side effect live in the companion `synthprobe` crate. Transcendental
//! functions are routed through `libm` so results do not depend on the
//! platform libc.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod datasets;
pub mod lambda;
pub mod metrics;
pub mod reference;
pub mod scalar;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{NodeId, Tape};
pub use tensor::{Tensor, TensorError};
