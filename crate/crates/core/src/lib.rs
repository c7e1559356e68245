//! Projection-gradient sensitivity probing and single-module LoRA placement
//! on a miniature decoder-only transformer.
//!
//! The pipeline: compute sample-wise gradients of a response-masked loss
//! with respect to every attention and FFN projection ([`probe`]), turn
//! their average squared norm into the expected initial adapter gradient
//! energy ([`page`]), pick the dominant FFN down-projection, and fine-tune
//! under a chosen adapter placement ([`lora`], [`trainer`]).

pub mod data;
pub mod error;
pub mod lora;
pub mod model;
pub mod oracle;
pub mod page;
pub mod probe;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
