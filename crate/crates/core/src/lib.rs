//! Estimation of midsagittal articulatory trajectories (12 EMA channels) from
//! phoneme sequences, time-aligned phonemes and acoustic features.
//!
//! * [`numerics`]: tensors, reverse-mode gradients and layer primitives
//! * [`corpus`]: trajectories, alignments, file formats and preprocessing
//! * [`features`]: PHN / TPHN / MFCC / MFCC+TPHN input encodings
//! * [`models`]: the BLSTM regressor and the location-sensitive attention model
//! * [`training`]: losses, Adam, generic training and per-subject fine-tuning
//! * [`evaluation`]: DTW, per-articulator RMSE / CC and attention diagnostics
//! * [`synth`]: deterministic gestural corpus generator used as ground truth

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod models;
pub mod numerics;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
