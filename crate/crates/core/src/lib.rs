//! Trivariate-chain Gaussian mixture modelling (TVC-GMM) of mel-spectrograms.
//!
//! The crate covers the full desk-scale experiment: synthetic multimodal
//! spectrogram data, per-bin mixture fitting by negative log-likelihood,
//! naive and conditional sampling, and the smoothness diagnostics (Var_L,
//! Gaussian smoothing, Laplacian sharpening, Griffin-Lim vocoding) used to
//! compare mean predictions against mixture samples.

pub mod cli;
pub mod error;
pub mod filters;
pub mod formats;
pub mod grid;
pub mod rng;
pub mod sampling;
pub mod spectral;
pub mod synth;
pub mod trainer;
pub mod tvcgmm;

pub use error::{Error, Result};
pub use grid::Grid;
pub use spectral::{AudioBuffer, MelConfig, MelSpectrogram, StftConfig};
