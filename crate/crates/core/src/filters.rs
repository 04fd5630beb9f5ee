//! Spectrogram degradation filters and the Var_L smoothness measure.
//!
//! All convolutions use replicate padding. Var_L is the population variance
//! of the 4-neighbour Laplacian over the interior (one-cell border dropped);
//! lower means smoother.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spectral::MelSpectrogram;

/// 4-neighbour Laplacian stencil.
pub const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

/// Odd-sized 2D kernel; `height` runs along time, `width` along frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    width: usize,
    height: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if height % 2 == 0 || width % 2 == 0 {
            return Err(Error::domain(format!(
                "kernel dimensions must be odd, got {height}x{width}"
            )));
        }
        if weights.len() != height * width {
            return Err(Error::domain("kernel weight count does not match shape"));
        }
        Ok(Self {
            width,
            height,
            weights,
        })
    }

    pub fn identity() -> Self {
        Self {
            width: 1,
            height: 1,
            weights: vec![1.0],
        }
    }

    pub fn laplacian() -> Self {
        Self {
            width: 3,
            height: 3,
            weights: LAPLACIAN.iter().flatten().copied().collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.width + c]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Separable Gaussian with radius `ceil(3σ)`, normalised to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel2D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|w| *w /= total);
    let n = taps.len();
    let weights = taps
        .iter()
        .flat_map(|a| taps.iter().map(move |b| a * b))
        .collect();
    Kernel2D::new(n, n, weights)
}

/// Same-shape 2D convolution with replicate boundary.
pub fn convolve2d(grid: &Grid, kernel: &Kernel2D) -> Grid {
    let (rows, cols) = grid.shape();
    let (ry, rx) = (kernel.height as isize / 2, kernel.width as isize / 2);
    Grid::from_fn(rows, cols, |r, c| {
        let mut acc = 0.0;
        for ky in 0..kernel.height {
            for kx in 0..kernel.width {
                let w = kernel.weight(kernel.height - 1 - ky, kernel.width - 1 - kx);
                if w != 0.0 {
                    let rr = r as isize + ky as isize - ry;
                    let cc = c as isize + kx as isize - rx;
                    acc += w * grid.get_clamped(rr, cc);
                }
            }
        }
        acc
    })
}

pub fn smooth(spec: &MelSpectrogram, sigma: f64) -> Result<MelSpectrogram> {
    let kernel = gaussian_kernel(sigma)?;
    MelSpectrogram::new(convolve2d(spec.values(), &kernel))
}

/// Laplacian high-boost: `in − s·(L ∗ in)`.
pub fn sharpen(spec: &MelSpectrogram, strength: f64) -> Result<MelSpectrogram> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::domain(format!(
            "sharpen strength must be non-negative, got {strength}"
        )));
    }
    if strength == 0.0 {
        return Ok(spec.clone());
    }
    let lap = convolve2d(spec.values(), &Kernel2D::laplacian());
    let out = Grid::from_fn(spec.frames(), spec.bins(), |t, f| {
        spec.get(t, f) - strength * lap.get(t, f)
    });
    MelSpectrogram::new(out)
}

/// Population variance of the Laplacian over the interior cells.
pub fn var_laplacian(spec: &MelSpectrogram) -> Result<f64> {
    var_laplacian_grid(spec.values())
}

pub fn var_laplacian_grid(grid: &Grid) -> Result<f64> {
    let (rows, cols) = grid.shape();
    if rows < 3 || cols < 3 {
        return Err(Error::domain(format!(
            "Var_L needs at least 3x3, got {rows}x{cols}"
        )));
    }
    let n = ((rows - 2) * (cols - 2)) as f64;
    let lap = |r: usize, c: usize| {
        grid.get(r - 1, c) + grid.get(r + 1, c) + grid.get(r, c - 1) + grid.get(r, c + 1)
            - 4.0 * grid.get(r, c)
    };
    let mut sum = 0.0;
    for r in 1..rows - 1 {
        for c in 1..cols - 1 {
            sum += lap(r, c);
        }
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for r in 1..rows - 1 {
        for c in 1..cols - 1 {
            ss += (lap(r, c) - mean).powi(2);
        }
    }
    Ok(ss / n)
}
