//! Unsupervised domain adaptation for temporal action localization with
//! class-conditioned adversarial alignment of a multi-level feature pyramid.

pub mod ablate;
pub mod alignment;
pub mod anchors;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod inference;
pub mod nn;
pub mod pyramid;
pub mod synthbench;
pub mod training;

pub use error::{Error, Result};
