//! Encoder-decoder captioning of jewelry images.
//!
//! The crate is layered bottom-up: [`tensor`] (tape-based reverse-mode
//! autodiff), [`layers`], [`optim`], then data ([`augment`], [`synth`],
//! [`vocab`]), the model ([`captioner`]) and the experiment harness
//! ([`train`], [`metrics`], [`grid`]).

pub mod augment;
pub mod captioner;
pub mod error;
pub mod grid;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
