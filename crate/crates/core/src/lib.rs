//! Two-stage conditional diffusion for 4D motion synthesis.
//!
//! Stage 1 ([`tddm`]) samples temporal differential fields from a single
//! prompting volume and a frame count. Stage 2 ([`i2v`]) synthesizes the
//! remaining frames in the latent space of a volumetric VAE ([`vae`]),
//! guided by those fields through the field augmented layer.
//!
//! The crate is self-contained: tensors, reverse-mode autodiff and the
//! optimizer live in [`tensor`], [`autodiff`] and [`optim`].

pub mod autodiff;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod fields;
pub mod i2v;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod tddm;
pub mod tensor;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
