//! Miniature text-to-image latent diffusion stack with low-rank concept
//! unlearning, built for deterministic CPU runs.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`synthworld`] — procedural corpus of colored geometric shapes
//! - [`schedule`] — forward-diffusion noise schedule
//! - [`vae`] / [`unet`] / [`diffusion`] — the latent diffusion model
//! - [`textbridge`] — toy dual encoder (text + image) with a projection matrix
//! - [`lru`] — the low-rank unlearning engine and its loss terms
//! - [`judge`] — metric suite: CLIP-style scores, Fréchet distance,
//!   detection rate
//!
//! Everything is a pure function of (seed, config, data): no threads, no
//! global state, no platform-dependent math (`libm` supplies the
//! transcendentals). The crate is `no_std`-compatible with `alloc`; file
//! formats, hashing, and the CLI live in the companion `unlearn-lab` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod clock;
pub mod diffusion;
pub mod error;
pub mod judge;
pub mod linalg;
pub mod lru;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod synthworld;
pub mod tape;
pub mod tensor;
pub mod textbridge;
pub mod unet;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
