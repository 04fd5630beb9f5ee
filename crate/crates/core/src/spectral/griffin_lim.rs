use rustfft::num_complex::Complex64;

use super::stft::{Spectrum, StftEngine};
use super::{AudioBuffer, StftConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GriffinLimConfig {
    pub n_iter: usize,
    pub momentum: f64,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        Self {
            n_iter: 60,
            momentum: 0.99,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    /// Best iterate (lowest spectral convergence).
    pub audio: AudioBuffer,
    /// `‖|STFT(audio)| − M‖_F / ‖M‖_F` of the returned audio.
    pub convergence: f64,
    /// Spectral convergence of every iterate, in order.
    pub history: Vec<f64>,
}

/// Fast Griffin-Lim (with momentum) starting from zero phase.
///
/// `magnitude` is `frames × (fft_size/2 + 1)`. The returned signal has
/// `(frames − 1)·hop` samples.
pub fn griffin_lim(
    magnitude: &Grid,
    stft_cfg: &StftConfig,
    cfg: &GriffinLimConfig,
    sample_rate: u32,
) -> Result<GriffinLimOutput> {
    if cfg.n_iter == 0 {
        return Err(Error::config("griffin-lim needs at least one iteration"));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::config(format!(
            "momentum must be in [0, 1), got {}",
            cfg.momentum
        )));
    }
    if magnitude.cols() != stft_cfg.n_bins() {
        return Err(Error::domain(format!(
            "magnitude has {} bins, STFT config expects {}",
            magnitude.cols(),
            stft_cfg.n_bins()
        )));
    }
    let engine = StftEngine::new(*stft_cfg)?;
    let frames = magnitude.rows();
    let len = frames.saturating_sub(1) * stft_cfg.hop_size;
    let target_norm = magnitude.as_slice().iter().map(|m| m * m).sum::<f64>().sqrt();
    if target_norm == 0.0 || len < stft_cfg.win_size {
        let audio = AudioBuffer::new(vec![0.0; len], sample_rate)?;
        return Ok(GriffinLimOutput {
            audio,
            convergence: 0.0,
            history: vec![0.0; cfg.n_iter],
        });
    }

    let mags = magnitude.as_slice();
    let mut phase = vec![Complex64::new(1.0, 0.0); mags.len()];
    let mut prev: Option<Vec<Complex64>> = None;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut history = Vec::with_capacity(cfg.n_iter);

    for _ in 0..cfg.n_iter {
        let spec = Spectrum {
            frames,
            bins: magnitude.cols(),
            data: mags.iter().zip(&phase).map(|(m, p)| p * m).collect(),
        };
        let signal = engine.inverse(&spec, len);
        let rebuilt = engine.forward(&signal)?.data;

        let err = rebuilt
            .iter()
            .zip(mags)
            .map(|(c, m)| (c.norm() - m).powi(2))
            .sum::<f64>()
            .sqrt()
            / target_norm;
        history.push(err);
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, signal));
        }

        for (i, p) in phase.iter_mut().enumerate() {
            let accel = match &prev {
                Some(prev) => rebuilt[i] + (rebuilt[i] - prev[i]) * cfg.momentum,
                None => rebuilt[i],
            };
            let norm = accel.norm();
            *p = if norm > 1e-16 {
                accel / norm
            } else {
                Complex64::new(1.0, 0.0)
            };
        }
        prev = Some(rebuilt);
    }

    let (convergence, samples) = best.expect("at least one iteration");
    Ok(GriffinLimOutput {
        audio: AudioBuffer::new(samples, sample_rate)?,
        convergence,
        history,
    })
}
