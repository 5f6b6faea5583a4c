//! Spatio-temporal video grounding.
//!
//! Given a clip and a caption, the model predicts a tube: the frame interval
//! the caption refers to plus one box per frame inside it.

pub mod backbone;
pub mod config;
pub mod data;
pub mod decoder;
pub mod deformable;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod query;
pub mod tokenizer;
pub mod types;

pub use error::{Error, Result};
