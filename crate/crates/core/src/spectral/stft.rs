use std::f64::consts::TAU;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AudioBuffer, StftConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Periodic Hann window.
pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (TAU * n as f64 / len as f64).cos())
        .collect()
}

/// Complex one-sided STFT, `frames × (fft_size/2 + 1)` row-major.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn magnitude(&self) -> Grid {
        Grid::from_vec(
            self.frames,
            self.bins,
            self.data.iter().map(|c| c.norm()).collect(),
        )
        .expect("spectrum shape")
    }
}

/// Cached FFT plans and window for one configuration.
pub(crate) struct StftEngine {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub(crate) fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: hann(cfg.win_size),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    fn pad(&self) -> usize {
        self.cfg.win_size / 2
    }

    fn win_offset(&self) -> usize {
        (self.cfg.fft_size - self.cfg.win_size) / 2
    }

    pub(crate) fn n_frames(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.cfg.win_size) / self.cfg.hop_size + 1
    }

    pub(crate) fn forward(&self, signal: &[f64]) -> Result<Spectrum> {
        let cfg = self.cfg;
        if signal.len() < cfg.win_size {
            return Err(Error::Length {
                len: signal.len(),
                min: cfg.win_size,
            });
        }
        let padded = reflect_pad(signal, self.pad());
        let frames = self.n_frames(signal.len());
        let bins = cfg.n_bins();
        let off = self.win_offset();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let start = t * cfg.hop_size;
            for (n, w) in self.window.iter().enumerate() {
                buf[off + n] = Complex64::new(padded[start + n] * w, 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrum { frames, bins, data })
    }

    /// Weighted overlap-add inverse. Output has `len` samples.
    pub(crate) fn inverse(&self, spec: &Spectrum, len: usize) -> Vec<f64> {
        let cfg = self.cfg;
        let pad = self.pad();
        let off = self.win_offset();
        let total = (spec.frames - 1) * cfg.hop_size + cfg.win_size;
        let mut out = vec![0.0; total.max(len + 2 * pad)];
        let mut norm = vec![0.0; out.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        let scale = 1.0 / cfg.fft_size as f64;
        for t in 0..spec.frames {
            let row = &spec.data[t * spec.bins..(t + 1) * spec.bins];
            buf[..spec.bins].copy_from_slice(row);
            // DC and Nyquist must be real for a real signal.
            buf[0].im = 0.0;
            if cfg.fft_size % 2 == 0 {
                buf[spec.bins - 1].im = 0.0;
            }
            for k in spec.bins..cfg.fft_size {
                buf[k] = buf[cfg.fft_size - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * cfg.hop_size;
            for (n, w) in self.window.iter().enumerate() {
                out[start + n] += buf[off + n].re * scale * w;
                norm[start + n] += w * w;
            }
        }
        out.iter_mut().zip(&norm).for_each(|(o, &w)| {
            if w > 1e-10 {
                *o /= w;
            }
        });
        out.into_iter().skip(pad).take(len).collect()
    }
}

fn reflect_pad(signal: &[f64], pad: usize) -> Vec<f64> {
    let n = signal.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| signal[i.min(n - 1)]));
    out.extend_from_slice(signal);
    out.extend((0..pad).map(|i| signal[(n as isize - 2 - i as isize).max(0) as usize]));
    out
}

/// Complex STFT with reflect-padded centred frames.
pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrum> {
    StftEngine::new(*cfg)?.forward(&audio.samples)
}

/// `frames × (fft_size/2 + 1)` linear magnitudes. Frame `t` is centred on
/// sample `t·hop`.
pub fn stft_magnitude(audio: &AudioBuffer, cfg: &StftConfig) -> Result<Grid> {
    Ok(stft(audio, cfg)?.magnitude())
}

/// Inverse STFT (weighted overlap-add) producing `len` samples.
pub fn istft(spec: &Spectrum, cfg: &StftConfig, len: usize) -> Result<Vec<f64>> {
    let engine = StftEngine::new(*cfg)?;
    if spec.bins != cfg.n_bins() {
        return Err(Error::domain(format!(
            "spectrum has {} bins, config expects {}",
            spec.bins,
            cfg.n_bins()
        )));
    }
    if spec.frames == 0 {
        return Ok(vec![0.0; len]);
    }
    Ok(engine.inverse(spec, len))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> StftConfig {
        StftConfig {
            fft_size: 64,
            hop_size: 16,
            win_size: 64,
        }
    }

    #[test]
    fn zero_audio_gives_zero_magnitude() {
        let audio = AudioBuffer::new(vec![0.0; 500], 8000).unwrap();
        let mag = stft_magnitude(&audio, &small_cfg()).unwrap();
        assert!(mag.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(mag.shape(), (500 / 16 + 1, 33));
    }

    #[test]
    fn too_short_is_length_error() {
        let audio = AudioBuffer::new(vec![0.1; 10], 8000).unwrap();
        assert!(matches!(
            stft_magnitude(&audio, &small_cfg()),
            Err(Error::Length { len: 10, min: 64 })
        ));
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        let cfg = small_cfg();
        let k = 5;
        let sr = 8000;
        let omega = TAU * k as f64 / cfg.fft_size as f64;
        // Cosine spanning a whole number of FFT periods: reflection at both
        // ends continues the waveform seamlessly.
        let len = 12 * cfg.fft_size + 1;
        let samples = (0..len).map(|n| 0.5 * (omega * n as f64).cos()).collect();
        let audio = AudioBuffer::new(samples, sr).unwrap();
        let mag = stft_magnitude(&audio, &cfg).unwrap();

        // Oracle: direct O(N^2) DFT of the windowed interior frame.
        let w = hann(cfg.win_size);
        let start = 10 * cfg.hop_size - cfg.win_size / 2;
        let direct: Vec<f64> = (0..cfg.n_bins())
            .map(|b| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..cfg.win_size {
                    let x = audio.samples[start + n] * w[n];
                    let ang = -TAU * (b * n) as f64 / cfg.fft_size as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        for (a, b) in mag.row(10).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
        for t in 0..mag.rows() {
            let row = mag.row(t);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(argmax, k, "frame {t}");
        }
    }

    #[test]
    fn inverse_reconstructs_signal() {
        let cfg = small_cfg();
        let audio = AudioBuffer::harmonic_tone(&[(440.0, 0.3), (1000.0, 0.2)], 0.05, 8000);
        let spec = stft(&audio, &cfg).unwrap();
        let back = istft(&spec, &cfg, audio.len()).unwrap();
        for (a, b) in audio.samples.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
