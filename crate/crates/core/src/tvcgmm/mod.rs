//! Trivariate-chain Gaussian mixtures.
//!
//! Every spectrogram bin `(t, f)` anchors a chain target
//! `(y[t,f], y[t+1,f], y[t,f+1])` modelled by a K-component mixture of
//! trivariate Gaussians. Covariances are parameterised by a Cholesky factor
//! whose diagonal is `softplus(d) + 1e-4`, which keeps every covariance
//! positive definite and bounds the density from above.

mod density;

pub use density::{
    log_density, mixture_log_density, nll, nll_and_gradient, nll_batch, nll_gradient,
    ComponentGradient, FieldGradient,
};

use crate::error::{Error, Result};
use crate::spectral::MelSpectrogram;

/// Lower bound added to every Cholesky diagonal entry.
pub const DIAG_FLOOR: f64 = 1e-4;

/// Number of scalar parameters per component:
/// `logit, μ[3], d[3], l21, l31, l32`.
pub const PARAMS_PER_COMPONENT: usize = 10;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Cholesky factor of a 3×3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chol3 {
    /// Unconstrained diagonal pre-activations.
    pub diag_pre: [f64; 3],
    /// `[l21, l31, l32]`.
    pub off: [f64; 3],
}

impl Chol3 {
    pub fn identity() -> Self {
        Self::from_diag_values([1.0; 3], [0.0; 3])
    }

    /// Builds a factor with the given realised diagonal (each `> DIAG_FLOOR`).
    pub fn from_diag_values(diag: [f64; 3], off: [f64; 3]) -> Self {
        Self {
            diag_pre: diag.map(|s| softplus_inv(s - DIAG_FLOOR)),
            off,
        }
    }

    /// Factor of an SPD covariance. Diagonal entries that fall below the floor
    /// (singular or near-singular directions) are clamped to it, with the
    /// pre-activation pinned at `floor_pre`.
    pub fn from_covariance(cov: &[[f64; 3]; 3], floor_pre: f64) -> Self {
        let mut l = [[0.0; 3]; 3];
        let mut pre = [0.0; 3];
        for i in 0..3 {
            for j in 0..=i {
                let mut s = cov[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    let d = s.max(0.0).sqrt();
                    if d - DIAG_FLOOR > softplus(floor_pre) {
                        l[i][i] = d;
                        pre[i] = softplus_inv(d - DIAG_FLOOR);
                    } else {
                        pre[i] = floor_pre;
                        l[i][i] = softplus(floor_pre) + DIAG_FLOOR;
                    }
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        Self {
            diag_pre: pre,
            off: [l[1][0], l[2][0], l[2][1]],
        }
    }

    #[inline]
    pub fn diag(&self) -> [f64; 3] {
        self.diag_pre.map(|d| softplus(d) + DIAG_FLOOR)
    }

    pub fn lower(&self) -> [[f64; 3]; 3] {
        let s = self.diag();
        let [l21, l31, l32] = self.off;
        [[s[0], 0.0, 0.0], [l21, s[1], 0.0], [l31, l32, s[2]]]
    }

    pub fn covariance(&self) -> [[f64; 3]; 3] {
        let l = self.lower();
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| l[i][k] * l[j][k]).sum();
            }
        }
        c
    }

    pub fn log_det_covariance(&self) -> f64 {
        2.0 * self.diag().iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Solves `L z = u` by forward substitution.
    #[inline]
    pub fn solve_lower(&self, u: [f64; 3]) -> [f64; 3] {
        let s = self.diag();
        let [l21, l31, l32] = self.off;
        let z0 = u[0] / s[0];
        let z1 = (u[1] - l21 * z0) / s[1];
        let z2 = (u[2] - l31 * z0 - l32 * z1) / s[2];
        [z0, z1, z2]
    }

    /// `L ε`.
    #[inline]
    pub fn mul(&self, e: [f64; 3]) -> [f64; 3] {
        let s = self.diag();
        let [l21, l31, l32] = self.off;
        [
            s[0] * e[0],
            l21 * e[0] + s[1] * e[1],
            l31 * e[0] + l32 * e[1] + s[2] * e[2],
        ]
    }
}

/// True when every leading principal minor is positive.
pub fn is_positive_definite(m: &[[f64; 3]; 3]) -> bool {
    let m1 = m[0][0];
    let m2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let m3 = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    m1 > 0.0 && m2 > 0.0 && m3 > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvcComponent {
    pub logit: f64,
    pub mean: [f64; 3],
    pub chol: Chol3,
}

impl TvcComponent {
    pub fn new(logit: f64, mean: [f64; 3], chol: Chol3) -> Self {
        Self { logit, mean, chol }
    }

    pub fn standard(mean: [f64; 3]) -> Self {
        Self::new(0.0, mean, Chol3::identity())
    }

    /// Flattened as `logit, μ[3], d[3], l21, l31, l32`.
    pub fn to_params(&self) -> [f64; PARAMS_PER_COMPONENT] {
        let [m0, m1, m2] = self.mean;
        let [d0, d1, d2] = self.chol.diag_pre;
        let [a, b, c] = self.chol.off;
        [self.logit, m0, m1, m2, d0, d1, d2, a, b, c]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            logit: p[0],
            mean: [p[1], p[2], p[3]],
            chol: Chol3 {
                diag_pre: [p[4], p[5], p[6]],
                off: [p[7], p[8], p[9]],
            },
        }
    }
}

/// Softmax of the component logits.
pub fn mixture_weights(components: &[TvcComponent]) -> Vec<f64> {
    let max = components
        .iter()
        .map(|c| c.logit)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = components.iter().map(|c| (c.logit - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-bin mixture parameters over a `frames × bins` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TvcGmmField {
    frames: usize,
    bins: usize,
    k: usize,
    components: Vec<TvcComponent>,
}

impl TvcGmmField {
    /// `components` is bin-major (row-major over `(t, f)`), then component-major.
    pub fn new(frames: usize, bins: usize, k: usize, components: Vec<TvcComponent>) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("mixture needs at least one component"));
        }
        if frames == 0 || bins == 0 {
            return Err(Error::domain("field grid must be non-empty"));
        }
        if components.len() != frames * bins * k {
            return Err(Error::domain(format!(
                "expected {} components for {frames}x{bins}xK={k}, got {}",
                frames * bins * k,
                components.len()
            )));
        }
        if components
            .iter()
            .any(|c| !c.to_params().iter().all(|v| v.is_finite()))
        {
            return Err(Error::domain("field has non-finite parameters"));
        }
        Ok(Self {
            frames,
            bins,
            k,
            components,
        })
    }

    pub fn from_fn(
        frames: usize,
        bins: usize,
        k: usize,
        mut f: impl FnMut(usize, usize, usize) -> TvcComponent,
    ) -> Self {
        let mut components = Vec::with_capacity(frames * bins * k);
        for t in 0..frames {
            for b in 0..bins {
                for c in 0..k {
                    components.push(f(t, b, c));
                }
            }
        }
        Self {
            frames,
            bins,
            k,
            components,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn chain(&self, t: usize, f: usize) -> &[TvcComponent] {
        let start = (t * self.bins + f) * self.k;
        &self.components[start..start + self.k]
    }

    pub fn chain_mut(&mut self, t: usize, f: usize) -> &mut [TvcComponent] {
        let start = (t * self.bins + f) * self.k;
        &mut self.components[start..start + self.k]
    }

    pub fn components(&self) -> &[TvcComponent] {
        &self.components
    }

    pub fn to_params(&self) -> Vec<f64> {
        self.components.iter().flat_map(|c| c.to_params()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.components.len() * PARAMS_PER_COMPONENT);
        for (c, p) in self
            .components
            .iter_mut()
            .zip(params.chunks_exact(PARAMS_PER_COMPONENT))
        {
            *c = TvcComponent::from_params(p);
        }
    }

    /// Mixture mean of the three chain coordinates at `(t, f)`.
    pub fn chain_mean(&self, t: usize, f: usize) -> [f64; 3] {
        let comps = self.chain(t, f);
        let w = mixture_weights(comps);
        let mut m = [0.0; 3];
        for (c, a) in comps.iter().zip(&w) {
            for d in 0..3 {
                m[d] += a * c.mean[d];
            }
        }
        m
    }
}

/// `(y[t,f], y[t+1,f], y[t,f+1])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainTarget(pub [f64; 3]);

/// Chain targets of one spectrogram, row-major over `(t, f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTargets {
    frames: usize,
    bins: usize,
    targets: Vec<ChainTarget>,
}

impl ChainTargets {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize) -> ChainTarget {
        self.targets[t * self.bins + f]
    }

    pub fn as_slice(&self) -> &[ChainTarget] {
        &self.targets
    }
}

/// Shifted-copy targets; the last frame and last bin replicate themselves.
pub fn chain_targets(spec: &MelSpectrogram) -> Result<ChainTargets> {
    let (frames, bins) = spec.shape();
    if frames < 2 || bins < 2 {
        return Err(Error::domain(format!(
            "chain targets need at least 2x2, got {frames}x{bins}"
        )));
    }
    let mut targets = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        for f in 0..bins {
            targets.push(ChainTarget([
                spec.get(t, f),
                spec.get((t + 1).min(frames - 1), f),
                spec.get(t, (f + 1).min(bins - 1)),
            ]));
        }
    }
    Ok(ChainTargets {
        frames,
        bins,
        targets,
    })
}
