//! Synthetic spectrogram data with known multimodal ground truth.
//!
//! Each condition owns `M` smooth mode patterns. A sample picks one mode for
//! the whole grid and adds separable AR(1) noise, so every bin's marginal is
//! an `M`-component Gaussian mixture and neighbouring bins are correlated by
//! `ρ_t^|Δt| · ρ_f^|Δf|`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{pick, stream};
use crate::spectral::MelSpectrogram;
use crate::tvcgmm::{Chol3, TvcComponent, TvcGmmField};

/// Pre-activation used for Cholesky diagonals of exactly duplicated chain
/// coordinates (the replicated last frame/bin); realises the 1e-4 floor.
pub const SINGULAR_PRE_ACTIVATION: f64 = -40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    /// Mode probabilities `π`.
    pub weights: Vec<f64>,
    /// One `frames × bins` pattern per mode, as nested rows.
    pub patterns: Vec<Vec<Vec<f64>>>,
    pub noise_std: f64,
    pub rho_t: f64,
    pub rho_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub frames: usize,
    pub bins: usize,
    pub seed: u64,
    pub conditions: Vec<ConditionSpec>,
}

impl Default for SynthSpec {
    /// 4 conditions on a 16×16 grid, two modes each (offset by 2.0 log units),
    /// `σ_n = 0.4`, `ρ_t = ρ_f = 0.5`.
    fn default() -> Self {
        let (frames, bins) = (16, 16);
        let centers = [(4.0, 5.0), (10.0, 4.0), (6.0, 11.0), (11.0, 10.0)];
        let weights = [[0.5, 0.5], [0.4, 0.6], [0.6, 0.4], [0.5, 0.5]];
        let conditions = centers
            .iter()
            .zip(weights)
            .map(|(&(ct, cf), w)| {
                let bump = |t: usize, f: usize| {
                    let d2 = (t as f64 - ct).powi(2) + (f as f64 - cf).powi(2);
                    (-d2 / (2.0 * 3.5f64.powi(2))).exp()
                };
                let pattern = |offset: f64| {
                    (0..frames)
                        .map(|t| (0..bins).map(|f| 0.5 + offset + 2.0 * bump(t, f)).collect())
                        .collect()
                };
                ConditionSpec {
                    weights: w.to_vec(),
                    patterns: vec![pattern(0.0), pattern(2.0)],
                    noise_std: 0.4,
                    rho_t: 0.5,
                    rho_f: 0.5,
                }
            })
            .collect();
        Self {
            frames,
            bins,
            seed: 0,
            conditions,
        }
    }
}

impl SynthSpec {
    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.bins < 2 {
            return Err(Error::domain("synthetic grid must be at least 2x2"));
        }
        if self.conditions.is_empty() {
            return Err(Error::domain("spec has no conditions"));
        }
        for (c, cond) in self.conditions.iter().enumerate() {
            let m = cond.weights.len();
            if m == 0 || cond.patterns.len() != m {
                return Err(Error::domain(format!(
                    "condition {c}: need one pattern per mode weight"
                )));
            }
            if cond.weights.iter().any(|&w| !(w > 0.0)) {
                return Err(Error::domain(format!("condition {c}: mode weights must be positive")));
            }
            let total: f64 = cond.weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!(
                    "condition {c}: mode weights sum to {total}, expected 1"
                )));
            }
            for (i, p) in cond.patterns.iter().enumerate() {
                if p.len() != self.frames || p.iter().any(|row| row.len() != self.bins) {
                    return Err(Error::domain(format!(
                        "condition {c}: pattern {i} is not {}x{}",
                        self.frames, self.bins
                    )));
                }
                if p.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::domain(format!("condition {c}: pattern {i} not finite")));
                }
            }
            if !(cond.noise_std > 0.0) {
                return Err(Error::domain(format!("condition {c}: noise_std must be positive")));
            }
            for rho in [cond.rho_t, cond.rho_f] {
                if !(0.0..1.0).contains(&rho) {
                    return Err(Error::domain(format!(
                        "condition {c}: correlations must lie in [0, 1), got {rho}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn condition(&self, condition: usize) -> Result<&ConditionSpec> {
        self.conditions.get(condition).ok_or_else(|| {
            Error::domain(format!(
                "condition {condition} out of range (have {})",
                self.conditions.len()
            ))
        })
    }
}

/// One labelled spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub condition: u32,
    pub spec: MelSpectrogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedDataset {
    pub records: Vec<Record>,
    /// Generating spec, when the data came from [`generate`].
    pub spec: Option<SynthSpec>,
}

impl ConditionedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct condition ids.
    pub fn conditions(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.condition).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn for_condition(&self, condition: u32) -> impl Iterator<Item = &MelSpectrogram> {
        self.records
            .iter()
            .filter(move |r| r.condition == condition)
            .map(|r| &r.spec)
    }

    /// Common grid shape, or an error if records disagree.
    pub fn shape(&self) -> Result<(usize, usize)> {
        let first = self
            .records
            .first()
            .ok_or_else(|| Error::domain("dataset is empty"))?
            .spec
            .shape();
        if self.records.iter().any(|r| r.spec.shape() != first) {
            return Err(Error::domain("dataset records have different shapes"));
        }
        Ok(first)
    }
}

/// Separable AR(1) noise field with marginal std `σ`.
pub fn ar_noise(
    frames: usize,
    bins: usize,
    sigma: f64,
    rho_t: f64,
    rho_f: f64,
    rng: &mut impl Rng,
) -> Grid {
    let mut n = Grid::zeros(frames, bins);
    let it = sigma * (1.0 - rho_t * rho_t).sqrt();
    let ifr = sigma * (1.0 - rho_f * rho_f).sqrt();
    let i2 = sigma * ((1.0 - rho_t * rho_t) * (1.0 - rho_f * rho_f)).sqrt();
    for t in 0..frames {
        for f in 0..bins {
            let e: f64 = rng.sample(StandardNormal);
            let v = match (t, f) {
                (0, 0) => sigma * e,
                (0, _) => rho_f * n.get(0, f - 1) + ifr * e,
                (_, 0) => rho_t * n.get(t - 1, 0) + it * e,
                _ => {
                    rho_t * n.get(t - 1, f) + rho_f * n.get(t, f - 1)
                        - rho_t * rho_f * n.get(t - 1, f - 1)
                        + i2 * e
                }
            };
            n.set(t, f, v);
        }
    }
    n
}

/// Draws `n_per_condition` spectrograms for every condition.
pub fn generate(spec: &SynthSpec, n_per_condition: usize) -> Result<ConditionedDataset> {
    spec.validate()?;
    if n_per_condition == 0 {
        return Err(Error::domain("need at least one sample per condition"));
    }
    let jobs: Vec<(usize, usize)> = (0..spec.n_conditions())
        .flat_map(|c| (0..n_per_condition).map(move |i| (c, i)))
        .collect();
    let records = jobs
        .into_par_iter()
        .map(|(c, i)| {
            let cond = &spec.conditions[c];
            let mut rng = stream(spec.seed, c, i);
            let mode = pick(&cond.weights, &mut rng);
            let noise = ar_noise(
                spec.frames,
                spec.bins,
                cond.noise_std,
                cond.rho_t,
                cond.rho_f,
                &mut rng,
            );
            let pattern = &cond.patterns[mode];
            let values = Grid::from_fn(spec.frames, spec.bins, |t, f| {
                pattern[t][f] + noise.get(t, f)
            });
            Record {
                condition: c as u32,
                spec: MelSpectrogram::new(values).expect("finite synthetic values"),
            }
        })
        .collect();
    Ok(ConditionedDataset {
        records,
        spec: Some(spec.clone()),
    })
}

/// Univariate Gaussian mixture with a shared standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub std: f64,
}

impl UnivariateMixture {
    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.std * self.std
            + self
                .weights
                .iter()
                .zip(&self.means)
                .map(|(w, m)| w * (m - mu).powi(2))
                .sum::<f64>()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let norm = 1.0 / (self.std * std::f64::consts::TAU.sqrt());
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * norm * (-0.5 * ((x - m) / self.std).powi(2)).exp())
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * normal_cdf((x - m) / self.std))
            .sum()
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes `erfcc`, |ε| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Exact marginal of bin `(t, f)` under [`generate`].
pub fn true_bin_marginal(
    spec: &SynthSpec,
    condition: usize,
    t: usize,
    f: usize,
) -> Result<UnivariateMixture> {
    let cond = spec.condition(condition)?;
    if t >= spec.frames || f >= spec.bins {
        return Err(Error::domain(format!(
            "bin ({t}, {f}) outside {}x{}",
            spec.frames, spec.bins
        )));
    }
    Ok(UnivariateMixture {
        weights: cond.weights.clone(),
        means: cond.patterns.iter().map(|p| p[t][f]).collect(),
        std: cond.noise_std,
    })
}

/// The TVC-GMM field that exactly describes a condition's chain targets:
/// one component per mode, covariance from the separable AR(1) law. Exactly
/// duplicated coordinates (replicated edges) sit at the variance floor.
pub fn generating_field(spec: &SynthSpec, condition: usize) -> Result<TvcGmmField> {
    let cond = spec.condition(condition)?;
    let (frames, bins) = (spec.frames, spec.bins);
    let s2 = cond.noise_std * cond.noise_std;
    Ok(TvcGmmField::from_fn(frames, bins, cond.weights.len(), |t, f, m| {
        let pos = [
            (t, f),
            ((t + 1).min(frames - 1), f),
            (t, (f + 1).min(bins - 1)),
        ];
        let mut cov = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let dt = pos[i].0.abs_diff(pos[j].0) as i32;
                let df = pos[i].1.abs_diff(pos[j].1) as i32;
                cov[i][j] = s2 * cond.rho_t.powi(dt) * cond.rho_f.powi(df);
            }
        }
        let p = &cond.patterns[m];
        TvcComponent::new(
            cond.weights[m].ln(),
            pos.map(|(a, b)| p[a][b]),
            Chol3::from_covariance(&cov, SINGULAR_PRE_ACTIVATION),
        )
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Pool over time at a fixed frequency bin.
    Time,
    /// Pool over frequency at a fixed frame.
    Frequency,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Self::Time),
            "frequency" | "freq" => Ok(Self::Frequency),
            other => Err(Error::config(format!("unknown axis '{other}'"))),
        }
    }
}

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub low: f64,
    pub width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let lo = self.low + i as f64 * self.width;
        (lo, lo + self.width)
    }

    /// Indices of strict local maxima (plateaus count once).
    pub fn local_maxima(&self) -> Vec<usize> {
        let c = &self.counts;
        let mut out = Vec::new();
        let mut i = 0;
        while i < c.len() {
            let mut j = i;
            while j + 1 < c.len() && c[j + 1] == c[i] {
                j += 1;
            }
            let left = i == 0 || c[i - 1] < c[i];
            let right = j + 1 == c.len() || c[j + 1] < c[i];
            if left && right && c[i] > 0 {
                out.push((i + j) / 2);
            }
            i = j + 1;
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_low", "bin_high", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(i);
            w.write_record([lo.to_string(), hi.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histogram of one condition's values pooled along `axis` at `index` of the
/// other axis, with 64 equal bins over the observed range.
pub fn marginal_histogram(
    dataset: &ConditionedDataset,
    condition: u32,
    axis: Axis,
    index: usize,
) -> Result<Histogram> {
    let mut values = Vec::new();
    for spec in dataset.for_condition(condition) {
        match axis {
            Axis::Time => {
                if index >= spec.bins() {
                    return Err(Error::domain(format!("frequency index {index} out of range")));
                }
                values.extend((0..spec.frames()).map(|t| spec.get(t, index)));
            }
            Axis::Frequency => {
                if index >= spec.frames() {
                    return Err(Error::domain(format!("frame index {index} out of range")));
                }
                values.extend((0..spec.bins()).map(|f| spec.get(index, f)));
            }
        }
    }
    if values.is_empty() {
        return Err(Error::domain(format!("no records for condition {condition}")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (low, width) = if hi > lo {
        (lo, (hi - lo) / HISTOGRAM_BINS as f64)
    } else {
        (lo - 0.5, 1.0 / HISTOGRAM_BINS as f64)
    };
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for v in values {
        let i = (((v - low) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[i] += 1;
    }
    Ok(Histogram { low, width, counts })
}
