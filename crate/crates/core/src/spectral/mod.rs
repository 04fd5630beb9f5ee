//! Audio/spectrogram conversion: STFT, mel analysis, mel inversion,
//! Griffin-Lim phase reconstruction and WAV I/O.

mod griffin_lim;
mod mel;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, GriffinLimConfig, GriffinLimOutput};
pub use mel::{
    hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, mel_to_linear, FilterBank, MelInversion,
    MelInverter,
};
pub use stft::{istft, stft, stft_magnitude, Spectrum};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::domain("audio contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Sum of sinusoids `(frequency_hz, amplitude)` of the given duration.
    pub fn harmonic_tone(partials: &[(f64, f64)], seconds: f64, sample_rate: u32) -> Self {
        let n = (seconds * sample_rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / sample_rate as f64;
                partials
                    .iter()
                    .map(|&(f, a)| a * (std::f64::consts::TAU * f * t).sin())
                    .sum()
            })
            .collect();
        Self {
            samples,
            sample_rate,
        }
    }
}

/// Short-time Fourier transform framing. The window is always Hann.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop_size: 256,
            win_size: 1024,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.win_size == 0 || self.fft_size == 0 {
            return Err(Error::config("STFT sizes must be positive"));
        }
        if !(self.hop_size <= self.win_size && self.win_size <= self.fft_size) {
            return Err(Error::config(format!(
                "need hop <= win <= fft, got hop={} win={} fft={}",
                self.hop_size, self.win_size, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            sample_rate: 22050,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::config(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got f_min={} f_max={}",
                self.f_min, self.f_max
            )));
        }
        if self.n_mels < 2 {
            return Err(Error::config("n_mels must be at least 2"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(())
    }

    pub fn log_floor_value(&self) -> f64 {
        self.log_floor.ln()
    }
}

/// Log-mel spectrogram: `frames × n_mels`, frames as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Grid,
}

impl MelSpectrogram {
    pub fn new(values: Grid) -> Result<Self> {
        if values.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("spectrogram contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn from_fn(frames: usize, bins: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self {
            values: Grid::from_fn(frames, bins, f),
        }
    }

    pub fn constant(frames: usize, bins: usize, value: f64) -> Self {
        Self {
            values: Grid::filled(frames, bins, value),
        }
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values.get(t, f)
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }

    pub fn into_grid(self) -> Grid {
        self.values
    }
}
