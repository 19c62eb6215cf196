//! Perceptual resolution selection for high-frame-rate rendering.
//!
//! Pipeline: a quality table (JOD per clip and ladder level) is turned into
//! "cheapest level within tolerance" labels; a small network predicts that
//! label from motion vectors and per-frame appearance descriptors; a Viterbi
//! controller smooths the per-clip predictions into one committed level per
//! 2 s segment; evaluation reports quality loss and pixel-throughput savings.

pub mod controller;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod labeling;
pub mod ladder;
pub mod manifest;
pub mod predictor;
pub mod provenance;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use ladder::{ResolutionLadder, ResolutionLevel};
