//! Zero-shot recognition with expanded semantic prototypes.
//!
//! The pipeline, bottom up:
//!
//! 1. [`data`]: load or generate a seen/unseen benchmark and its class prototypes.
//! 2. [`mds`]: embed the seen-class visual centers with classical MDS.
//! 3. [`expansion`]: train an AE/VAE whose latent code, concatenated to
//!    the predefined prototype, is cosine-aligned with that embedding.
//! 4. [`prototypes`]: average latents per seen class and reconstruct unseen
//!    expanded prototypes from their nearest seen neighbors.
//! 5. [`recognition`]: train a linear visual→semantic projection and
//!    classify unseen examples by nearest prototype.
//!
//! [`experiment`] stages all of this from a config file; the `zsl-expand`
//! binary is a thin wrapper around it.

pub mod data;
pub mod error;
pub mod expansion;
pub mod experiment;
pub mod linalg;
pub mod mds;
pub mod nn;
pub mod prototypes;
pub mod recognition;

pub use error::{Error, Result};
