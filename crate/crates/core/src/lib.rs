//! Mono-to-binaural spatialization.
//!
//! A U-Net predicts left/right ideal ratio masks from a mono log-magnitude
//! spectrogram and time-aligned visual features. An auxiliary classifier,
//! trained to tell correctly ordered left/right pairs from swapped ones, adds
//! a correspondence term to the synthesizer's objective.
//!
//! Module map:
//! - [`dsp`]: STFT/ISTFT, mixdown, ratio masks, stereo reconstruction
//! - [`features`]: visual feature tracks and frame-rate alignment
//! - [`dataset`]: synthetic scenes, ingest, chunking, augmentation, splits
//! - [`model`]: synthesizer, correspondence classifier, losses
//! - [`trainer`]: two-phase optimization loop and checkpoints
//! - [`eval`]: STFT/envelope distances, MONO baseline, evaluation protocols

pub mod error;
pub mod dsp;
pub mod wav;
pub mod features;
pub mod dataset;
pub mod model;
pub mod trainer;
pub mod checkpoint;
pub mod eval;
pub mod config;

pub use error::{Error, Result};
