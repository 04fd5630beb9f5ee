use nalgebra::{DMatrix, DVector};

use super::stft::StftEngine;
use super::{AudioBuffer, MelConfig, MelSpectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters, `n_mels × (fft_size/2 + 1)`, peak height 1.
#[derive(Debug, Clone)]
pub struct FilterBank {
    weights: Grid,
    centers_hz: Vec<f64>,
}

impl FilterBank {
    pub fn weights(&self) -> &Grid {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.cols()
    }

    /// `filters · spectrum` for one frame.
    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        (0..self.n_mels())
            .map(|m| {
                self.weights
                    .row(m)
                    .iter()
                    .zip(spectrum)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect()
    }
}

pub fn mel_filterbank(cfg: &MelConfig, fft_size: usize) -> Result<FilterBank> {
    cfg.validate()?;
    let n_bins = fft_size / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / fft_size as f64;

    let mut weights = Grid::zeros(cfg.n_mels, n_bins);
    for m in 0..cfg.n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = bin_hz(k);
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                any = true;
                weights.set(m, k, w);
            }
        }
        if !any {
            return Err(Error::config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                 reduce n_mels or increase fft_size"
            )));
        }
    }
    Ok(FilterBank {
        weights,
        centers_hz: points[1..=cfg.n_mels].to_vec(),
    })
}

/// Natural-log mel spectrogram, `log(max(filters · |STFT|, log_floor))`.
pub fn mel_spectrogram(
    audio: &AudioBuffer,
    stft_cfg: &StftConfig,
    mel_cfg: &MelConfig,
) -> Result<MelSpectrogram> {
    let bank = mel_filterbank(mel_cfg, stft_cfg.fft_size)?;
    let mag = StftEngine::new(*stft_cfg)?.forward(&audio.samples)?.magnitude();
    Ok(log_mel_from_magnitude(&bank, &mag, mel_cfg.log_floor))
}

pub(crate) fn log_mel_from_magnitude(bank: &FilterBank, mag: &Grid, floor: f64) -> MelSpectrogram {
    let mut out = Grid::zeros(mag.rows(), bank.n_mels());
    for t in 0..mag.rows() {
        for (m, v) in bank.apply(mag.row(t)).into_iter().enumerate() {
            out.set(t, m, v.max(floor).ln());
        }
    }
    MelSpectrogram::new(out).expect("log of floored values is finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MelInversion {
    /// Pseudo-inverse with negative outputs zeroed.
    #[default]
    ClampedPinv,
    /// Projected-gradient non-negative least squares, started from the
    /// clamped pseudo-inverse solution.
    Nnls { iterations: usize },
}

/// Maps mel power back to linear-frequency magnitudes.
pub struct MelInverter {
    bank: FilterBank,
    pinv: DMatrix<f64>,
    filters: DMatrix<f64>,
    lipschitz: f64,
    method: MelInversion,
}

impl MelInverter {
    pub fn new(bank: FilterBank, method: MelInversion) -> Result<Self> {
        let w = bank.weights();
        let filters = DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
        let svd = filters.clone().svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let pinv = svd
            .pseudo_inverse(1e-10 * smax)
            .map_err(|e| Error::config(format!("filterbank pseudo-inverse failed: {e}")))?;
        Ok(Self {
            bank,
            pinv,
            filters,
            lipschitz: smax * smax,
            method,
        })
    }

    pub fn filterbank(&self) -> &FilterBank {
        &self.bank
    }

    /// Inverts one frame of mel power (already exponentiated).
    pub fn invert_frame(&self, mel_power: &[f64]) -> Vec<f64> {
        let m = DVector::from_column_slice(mel_power);
        let mut x = (&self.pinv * &m).map(|v| v.max(0.0));
        if let MelInversion::Nnls { iterations } = self.method {
            let step = 1.0 / self.lipschitz;
            for _ in 0..iterations {
                let resid = &self.filters * &x - &m;
                let grad = self.filters.tr_mul(&resid);
                x = (x - grad * step).map(|v| v.max(0.0));
            }
        }
        x.iter().copied().collect()
    }

    /// Inverts a `frames × n_mels` grid of mel power.
    pub fn invert_power(&self, mel_power: &Grid) -> Result<Grid> {
        if mel_power.cols() != self.bank.n_mels() {
            return Err(Error::domain(format!(
                "spectrogram has {} mel bins, filterbank has {}",
                mel_power.cols(),
                self.bank.n_mels()
            )));
        }
        let mut out = Grid::zeros(mel_power.rows(), self.bank.n_bins());
        for t in 0..mel_power.rows() {
            let frame = self.invert_frame(mel_power.row(t));
            out.as_mut_slice()[t * self.bank.n_bins()..(t + 1) * self.bank.n_bins()]
                .copy_from_slice(&frame);
        }
        Ok(out)
    }

    pub fn invert(&self, mel: &MelSpectrogram) -> Result<Grid> {
        self.invert_power(&mel.values().map(f64::exp))
    }
}

/// `exp(mel)` then clamped pseudo-inverse of the filterbank.
pub fn mel_to_linear(mel: &MelSpectrogram, mel_cfg: &MelConfig, fft_size: usize) -> Result<Grid> {
    let inverter = MelInverter::new(mel_filterbank(mel_cfg, fft_size)?, MelInversion::ClampedPinv)?;
    inverter.invert(mel)
}
