//! Multi-level channel-attention CNN for domain generalization.
//!
//! Intermediate feature maps of a small residual backbone are tokenized per
//! channel, re-weighted by multi-head scaled dot-product self-attention,
//! embedded by a GELU MLP and concatenated with the pooled backbone output
//! before a linear classifier. The crate carries its own reverse-mode
//! autodiff ([`tensor`]), the layers ([`nn`], [`attention`], [`model`]), a
//! synthetic multi-domain dataset generator ([`data`]), SGD training
//! ([`train`]), the leave-one-domain-out protocol ([`protocol`]) and
//! gradient saliency maps ([`saliency`]).

pub mod attention;
pub mod data;
pub mod error;
pub mod exec;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};

/// Storage precision of tensor data. Reductions accumulate in f64 either way.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;
