//! Long-tail object detection heads on synthetic scenes.
//!
//! The crate covers the full pipeline of a two-stage detector's second stage:
//! simulated proposals ([`scenes`]), IoU assignment ([`assign`]), proposal
//! samplers including the class-biased pair ([`samplers`]), trainable box
//! heads with the bilateral loss ([`heads`], [`train`]), inference-time fusion
//! ([`fusion`]), COCO-style evaluation ([`eval`]) and an experiment harness
//! ([`experiment`]).

pub mod assign;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod heads;
pub mod rng;
pub mod samplers;
pub mod scenes;
pub mod train;

pub use error::{Error, Result};
