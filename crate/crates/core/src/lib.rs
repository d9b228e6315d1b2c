//! Residual low-rank adapters for frozen transformer encoders.
//!
//! The crate is organized around a small dense-f64 kernel ([`numkernel`])
//! on top of which sit the adapter module itself ([`adapter`]), a miniature
//! pre-norm ViT encoder with a frozen/trainable partition ([`backbone`]),
//! hand-written reverse-mode training ([`training`]), an executable form of
//! the rank-capacity analysis ([`theory`]), and the experiment harness
//! ([`bench`]). The [`cli`] module exposes the whole thing as the
//! `adapterlab` binary.
//!
//! Everything is 64-bit, seeded, and bitwise deterministic; see the README
//! for the reproducibility contract.

pub mod adapter;
pub mod backbone;
pub mod bench;
pub mod cli;
pub mod error;
pub mod numkernel;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
