//! Parallel dual-decoder human-object interaction detection.
//!
//! The crate is organised bottom-up: [`nn`] is a small reverse-mode tensor
//! core, [`model`] builds the feature extractor and the two parallel
//! decoders on top of it, [`training`] holds matching and the loss suite,
//! [`inference`] turns raw outputs into scored detections with Trident-NMS,
//! and [`eval`] provides the synthetic benchmark and the mAP evaluator.

pub mod cli;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
