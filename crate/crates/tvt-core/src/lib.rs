//! Core math for transfer VAE training and one-step super-resolution.
//!
//! Everything in this crate is deterministic f64 arithmetic on CPU: a small
//! reverse-mode autodiff tape, the autoencoder / UNet model builders, the
//! training losses, the degradation synthesizer, evaluation metrics, and a
//! static complexity auditor. The crate is `no_std`-compatible (with `alloc`);
//! file formats, image IO, and the CLI live in the companion harness crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod audit;
pub mod ce_unet;
pub mod data;
pub mod degrade;
pub mod error;
pub mod fmath;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod resize;
pub mod rng;
pub mod schedule;
pub mod sr;
pub mod tape;
pub mod tensor;
pub mod tvt;
pub mod unet;
pub mod vae;
pub mod vsd;

#[cfg(feature = "numcheck")]
pub mod numcheck;

pub use error::CoreError;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;
