use rayon::prelude::*;

use super::{
    chain_targets, mixture_weights, sigmoid, ChainTargets, TvcComponent, TvcGmmField,
    PARAMS_PER_COMPONENT,
};
use crate::error::{Error, Result};
use crate::spectral::MelSpectrogram;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of one trivariate Gaussian component.
pub fn log_density(component: &TvcComponent, x: [f64; 3]) -> f64 {
    Prepared::new(component, 0.0).eval(&x).0
}

fn log_weights(components: &[TvcComponent]) -> Vec<f64> {
    mixture_weights(components).into_iter().map(f64::ln).collect()
}

fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn mixture_log_density(components: &[TvcComponent], x: [f64; 3]) -> f64 {
    let terms: Vec<f64> = components
        .iter()
        .zip(log_weights(components))
        .map(|(c, lw)| lw + log_density(c, x))
        .collect();
    logsumexp(&terms)
}

fn check_shape(field: &TvcGmmField, targets: &ChainTargets) -> Result<()> {
    if field.shape() != targets.shape() {
        return Err(Error::domain(format!(
            "field is {:?} but spectrogram is {:?}",
            field.shape(),
            targets.shape()
        )));
    }
    Ok(())
}

/// Mean over bins of the negative mixture log-likelihood of the chain targets.
pub fn nll(field: &TvcGmmField, spec: &MelSpectrogram) -> Result<f64> {
    nll_batch(field, std::slice::from_ref(&chain_targets(spec)?))
}

/// Mean NLL over bins and over a batch of spectrograms' chain targets.
pub fn nll_batch(field: &TvcGmmField, batch: &[ChainTargets]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    for tg in batch {
        check_shape(field, tg)?;
    }
    let (frames, bins) = field.shape();
    let per_bin: Vec<f64> = (0..frames * bins)
        .into_par_iter()
        .map(|i| {
            let (t, f) = (i / bins, i % bins);
            let comps = field.chain(t, f);
            let prepared: Vec<Prepared> = comps
                .iter()
                .zip(log_weights(comps))
                .map(|(c, la)| Prepared::new(c, la))
                .collect();
            let mut terms = vec![0.0; comps.len()];
            batch
                .iter()
                .map(|tg| {
                    let x = tg.get(t, f).0;
                    for (term, p) in terms.iter_mut().zip(&prepared) {
                        *term = p.eval(&x).0;
                    }
                    -logsumexp(&terms)
                })
                .sum::<f64>()
        })
        .collect();
    Ok(per_bin.iter().sum::<f64>() / (frames * bins * batch.len()) as f64)
}

/// Partial derivatives for one component, in parameter order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComponentGradient {
    pub logit: f64,
    pub mean: [f64; 3],
    pub diag_pre: [f64; 3],
    pub off: [f64; 3],
}

impl ComponentGradient {
    pub fn to_params(&self) -> [f64; PARAMS_PER_COMPONENT] {
        let [m0, m1, m2] = self.mean;
        let [d0, d1, d2] = self.diag_pre;
        let [a, b, c] = self.off;
        [self.logit, m0, m1, m2, d0, d1, d2, a, b, c]
    }
}

/// Gradient of the NLL, laid out like the field's components.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradient {
    pub frames: usize,
    pub bins: usize,
    pub k: usize,
    pub components: Vec<ComponentGradient>,
}

impl FieldGradient {
    pub fn chain(&self, t: usize, f: usize) -> &[ComponentGradient] {
        let start = (t * self.bins + f) * self.k;
        &self.components[start..start + self.k]
    }

    pub fn to_params(&self) -> Vec<f64> {
        self.components.iter().flat_map(|g| g.to_params()).collect()
    }
}

/// Per-component constants hoisted out of the per-target loop.
struct Prepared {
    mean: [f64; 3],
    inv_s: [f64; 3],
    off: [f64; 3],
    /// `log α − ½(3 log 2π + log det Σ)`
    log_norm: f64,
}

impl Prepared {
    fn new(c: &TvcComponent, log_alpha: f64) -> Self {
        let s = c.chol.diag();
        let log_det = 2.0 * (s[0].ln() + s[1].ln() + s[2].ln());
        Self {
            mean: c.mean,
            inv_s: s.map(|v| 1.0 / v),
            off: c.chol.off,
            log_norm: log_alpha - 0.5 * (3.0 * LN_2PI + log_det),
        }
    }

    /// Returns `(log α + log N, z, w)`.
    #[inline(always)]
    fn eval(&self, x: &[f64; 3]) -> (f64, [f64; 3], [f64; 3]) {
        let [l21, l31, l32] = self.off;
        let [i0, i1, i2] = self.inv_s;
        let u = [x[0] - self.mean[0], x[1] - self.mean[1], x[2] - self.mean[2]];
        let z0 = u[0] * i0;
        let z1 = (u[1] - l21 * z0) * i1;
        let z2 = (u[2] - l31 * z0 - l32 * z1) * i2;
        let w2 = z2 * i2;
        let w1 = (z1 - l32 * w2) * i1;
        let w0 = (z0 - l21 * w1 - l31 * w2) * i0;
        (
            self.log_norm - 0.5 * (z0 * z0 + z1 * z1 + z2 * z2),
            [z0, z1, z2],
            [w0, w1, w2],
        )
    }
}

/// Responsibility-weighted sums for one component over a batch.
#[derive(Clone, Copy, Default)]
struct Moments {
    r: f64,
    rw: [f64; 3],
    rwz_diag: [f64; 3],
    /// `Σ r·w_i·z_j` for `(1,0), (2,0), (2,1)`.
    rwz_off: [f64; 3],
}

/// Analytic gradient of [`nll`] with respect to every field parameter.
pub fn nll_gradient(field: &TvcGmmField, spec: &MelSpectrogram) -> Result<FieldGradient> {
    let targets = chain_targets(spec)?;
    Ok(nll_and_gradient(field, std::slice::from_ref(&targets))?.1)
}

/// Batch NLL (as [`nll_batch`]) together with its analytic gradient.
///
/// With responsibilities `r_k`, `z = L⁻¹(x − μ)` and `w = Σ⁻¹(x − μ)`:
/// `∂ log p/∂logit_k = r_k − α_k`, `∂ log p/∂μ_k = r_k w`,
/// `∂ log p/∂L_ij = r_k w_i z_j` below the diagonal and
/// `r_k (w_i z_i − 1/L_ii)·sigmoid(d_i)` for the diagonal pre-activations.
///
/// Bins are processed in parallel; each bin reduces over the batch in order,
/// so results do not depend on thread scheduling.
pub fn nll_and_gradient(
    field: &TvcGmmField,
    batch: &[ChainTargets],
) -> Result<(f64, FieldGradient)> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    for tg in batch {
        check_shape(field, tg)?;
    }
    let (frames, bins) = field.shape();
    let k = field.k();
    let n = batch.len() as f64;
    let scale = 1.0 / (frames * bins * batch.len()) as f64;

    let per_bin: Vec<(f64, Vec<ComponentGradient>)> = (0..frames * bins)
        .into_par_iter()
        .map(|i| {
            let (t, f) = (i / bins, i % bins);
            let comps = field.chain(t, f);
            let alpha = mixture_weights(comps);
            let prepared: Vec<Prepared> = comps
                .iter()
                .zip(&alpha)
                .map(|(c, a)| Prepared::new(c, a.ln()))
                .collect();
            let mut moments = vec![Moments::default(); k];
            let mut evals = vec![(0.0, [0.0; 3], [0.0; 3]); k];
            let mut log_lik = 0.0;
            for tg in batch {
                let x = tg.get(t, f).0;
                let mut max = f64::NEG_INFINITY;
                for (e, p) in evals.iter_mut().zip(&prepared) {
                    *e = p.eval(&x);
                    max = max.max(e.0);
                }
                let total: f64 = evals.iter().map(|e| (e.0 - max).exp()).sum();
                let log_p = max + total.ln();
                log_lik += log_p;
                for (m, (lp, z, w)) in moments.iter_mut().zip(&evals) {
                    let r = (lp - log_p).exp();
                    m.r += r;
                    for d in 0..3 {
                        m.rw[d] += r * w[d];
                        m.rwz_diag[d] += r * w[d] * z[d];
                    }
                    m.rwz_off[0] += r * w[1] * z[0];
                    m.rwz_off[1] += r * w[2] * z[0];
                    m.rwz_off[2] += r * w[2] * z[1];
                }
            }
            let grads = comps
                .iter()
                .zip(&alpha)
                .zip(&moments)
                .map(|((c, a), m)| {
                    let s = c.chol.diag();
                    let mut diag_pre = [0.0; 3];
                    for d in 0..3 {
                        diag_pre[d] = -scale
                            * (m.rwz_diag[d] - m.r / s[d])
                            * sigmoid(c.chol.diag_pre[d]);
                    }
                    ComponentGradient {
                        logit: -scale * (m.r - n * a),
                        mean: m.rw.map(|v| -scale * v),
                        diag_pre,
                        off: m.rwz_off.map(|v| -scale * v),
                    }
                })
                .collect();
            (log_lik, grads)
        })
        .collect();

    let mut total = 0.0;
    let mut components = Vec::with_capacity(frames * bins * k);
    for (log_lik, grads) in per_bin {
        total += log_lik;
        components.extend(grads);
    }
    Ok((
        -total * scale,
        FieldGradient {
            frames,
            bins,
            k,
            components,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::tvcgmm::Chol3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: explicit covariance, cofactor inverse and
    /// determinant, naive sum of exponentials.
    fn naive_mixture_pdf(comps: &[TvcComponent], x: [f64; 3]) -> f64 {
        let total: f64 = comps.iter().map(|c| c.logit.exp()).sum();
        comps
            .iter()
            .map(|c| {
                let m = c.chol.covariance();
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                let inv = [
                    [
                        m[1][1] * m[2][2] - m[1][2] * m[2][1],
                        m[0][2] * m[2][1] - m[0][1] * m[2][2],
                        m[0][1] * m[1][2] - m[0][2] * m[1][1],
                    ],
                    [
                        m[1][2] * m[2][0] - m[1][0] * m[2][2],
                        m[0][0] * m[2][2] - m[0][2] * m[2][0],
                        m[0][2] * m[1][0] - m[0][0] * m[1][2],
                    ],
                    [
                        m[1][0] * m[2][1] - m[1][1] * m[2][0],
                        m[0][1] * m[2][0] - m[0][0] * m[2][1],
                        m[0][0] * m[1][1] - m[0][1] * m[1][0],
                    ],
                ];
                let u: Vec<f64> = (0..3).map(|i| x[i] - c.mean[i]).collect();
                let mut q = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        q += u[i] * inv[i][j] / det * u[j];
                    }
                }
                let norm = (2.0 * std::f64::consts::PI).powf(1.5) * det.sqrt();
                c.logit.exp() / total * (-0.5 * q).exp() / norm
            })
            .sum()
    }

    fn random_instance(seed: u64, n: usize, k: usize) -> (TvcGmmField, MelSpectrogram) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = TvcGmmField::from_fn(n, n, k, |_, _, _| TvcComponent {
            logit: rng.random_range(-1.0..1.0),
            mean: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
            chol: Chol3 {
                diag_pre: [0; 3].map(|_| rng.random_range(-0.5..0.8)),
                off: [0; 3].map(|_| rng.random_range(-0.5..0.5)),
            },
        });
        let spec = MelSpectrogram::from_fn(n, n, |_, _| rng.random_range(-1.5..1.5));
        (field, spec)
    }

    #[test]
    fn standard_peak_density() {
        let c = TvcComponent::standard([0.3, -1.0, 2.0]);
        let v = log_density(&c, [0.3, -1.0, 2.0]);
        assert!((v - (-1.5 * LN_2PI)).abs() < 1e-12);
        assert!((v + 2.756816).abs() < 1e-6);
    }

    #[test]
    fn unit_diagonal_has_zero_log_det() {
        let c = Chol3::from_diag_values([1.0; 3], [0.4, -2.0, 1.1]);
        assert!(c.log_det_covariance().abs() < 1e-12);
    }

    #[test]
    fn diagonal_covariance_closed_form() {
        let c = TvcComponent::new(0.0, [0.0; 3], Chol3::from_diag_values([1.0, 2.0, 3.0], [0.0; 3]));
        let expected = -0.5 * (3.0 * LN_2PI + 36f64.ln() + 3.0);
        assert!((log_density(&c, [1.0, 2.0, 3.0]) - expected).abs() < 1e-10);
        assert!((expected + 6.0485).abs() < 1e-4);
    }

    #[test]
    fn singleton_mixture_ignores_logit() {
        let c = TvcComponent::new(
            3.7,
            [0.1, 0.2, 0.3],
            Chol3::from_diag_values([0.5, 0.6, 0.7], [0.1, 0.2, 0.3]),
        );
        let x = [0.4, -0.2, 1.0];
        assert!((mixture_log_density(&[c], x) - log_density(&c, x)).abs() < 1e-12);
        let mut d = c;
        d.logit = -2.0;
        assert!((mixture_log_density(&[c, d], x) - log_density(&c, x)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_closed_form() {
        let a = TvcComponent::standard([2.0, 0.0, 0.0]);
        let b = TvcComponent::standard([-2.0, 0.0, 0.0]);
        // Both terms equal the standard normal at distance 2.
        let expected = -1.5 * LN_2PI - 2.0;
        assert!((mixture_log_density(&[a, b], [0.0; 3]) - expected).abs() < 1e-12);
    }

    #[test]
    fn peak_nll() {
        let spec = MelSpectrogram::from_fn(4, 5, |t, f| (t as f64 * 0.3 - f as f64 * 0.2).sin());
        let tg = chain_targets(&spec).unwrap();
        let field = TvcGmmField::from_fn(4, 5, 1, |t, f, _| TvcComponent::standard(tg.get(t, f).0));
        let v = nll(&field, &spec).unwrap();
        assert!((v - 1.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn nll_decreases_as_mean_approaches_target() {
        let spec = MelSpectrogram::constant(2, 2, 1.0);
        let at = |m: f64| {
            let field = TvcGmmField::from_fn(2, 2, 1, |_, _, _| TvcComponent::standard([m; 3]));
            nll(&field, &spec).unwrap()
        };
        let mut prev = at(10.0);
        for step in 1..=10 {
            let cur = at(10.0 - 0.9 * step as f64);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let (field, _) = random_instance(1, 4, 2);
        let spec = MelSpectrogram::constant(5, 4, 0.0);
        assert!(matches!(nll(&field, &spec), Err(Error::Domain(_))));
        assert!(matches!(nll_gradient(&field, &spec), Err(Error::Domain(_))));
    }

    #[test]
    fn nll_matches_naive_arithmetic() {
        let (field, spec) = random_instance(42, 5, 3);
        let tg = chain_targets(&spec).unwrap();
        let mut total = 0.0;
        for t in 0..5 {
            for f in 0..5 {
                total -= naive_mixture_pdf(field.chain(t, f), tg.get(t, f).0).ln();
            }
        }
        let oracle = total / 25.0;
        assert!((nll(&field, &spec).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn single_gaussian_mean_gradient_closed_form() {
        let (field, spec) = random_instance(3, 3, 1);
        let tg = chain_targets(&spec).unwrap();
        let g = nll_gradient(&field, &spec).unwrap();
        for t in 0..3 {
            for f in 0..3 {
                let c = field.chain(t, f)[0];
                let x = tg.get(t, f).0;
                // −Σ⁻¹(x − μ) / (T·F) via an explicit solve of Σ v = (x − μ).
                let cov = nalgebra::Matrix3::from_fn(|i, j| c.chol.covariance()[i][j]);
                let u = nalgebra::Vector3::from_fn(|i, _| x[i] - c.mean[i]);
                let v = cov.lu().solve(&u).unwrap();
                for d in 0..3 {
                    let expected = -v[d] / 9.0;
                    assert!((g.chain(t, f)[0].mean[d] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mirrored_pair_has_equal_logit_gradients() {
        let chol = Chol3::from_diag_values([0.8, 0.9, 1.1], [0.0; 3]);
        let field = TvcGmmField::from_fn(2, 2, 2, |_, _, c| {
            let s = if c == 0 { 1.0 } else { -1.0 };
            TvcComponent::new(0.0, [s, 0.0, 0.0], chol)
        });
        let spec = MelSpectrogram::constant(2, 2, 0.0);
        let g = nll_gradient(&field, &spec).unwrap();
        for t in 0..2 {
            for f in 0..2 {
                let ch = g.chain(t, f);
                assert!((ch[0].logit - ch[1].logit).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logit_shift_invariance() {
        let (field, spec) = random_instance(9, 3, 3);
        let mut shifted = field.clone();
        for t in 0..3 {
            for f in 0..3 {
                shifted.chain_mut(t, f).iter_mut().for_each(|c| c.logit += 4.2);
            }
        }
        let a = nll(&field, &spec).unwrap();
        let b = nll(&shifted, &spec).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let (field, spec) = random_instance(11, 3, 3);
        let mut perm = field.clone();
        for t in 0..3 {
            for f in 0..3 {
                perm.chain_mut(t, f).rotate_left(1);
            }
        }
        assert!((nll(&field, &spec).unwrap() - nll(&perm, &spec).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn batch_gradient_is_mean_of_single_gradients() {
        let (field, a) = random_instance(5, 3, 2);
        let (_, b) = random_instance(6, 3, 2);
        let batch = [chain_targets(&a).unwrap(), chain_targets(&b).unwrap()];
        let (loss, g) = nll_and_gradient(&field, &batch).unwrap();
        let ga = nll_gradient(&field, &a).unwrap().to_params();
        let gb = nll_gradient(&field, &b).unwrap().to_params();
        for ((x, y), z) in g.to_params().iter().zip(&ga).zip(&gb) {
            assert!((x - 0.5 * (y + z)).abs() < 1e-14);
        }
        let expected = 0.5 * (nll(&field, &a).unwrap() + nll(&field, &b).unwrap());
        assert!((loss - expected).abs() < 1e-12);
        assert!((nll_batch(&field, &batch).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_normalisation() {
        // Importance sample from a wide Gaussian proposal.
        let comps = [
            TvcComponent::new(0.3, [0.5, 0.0, -0.2], Chol3::from_diag_values([0.5, 0.4, 0.6], [0.2, 0.1, -0.1])),
            TvcComponent::new(-0.2, [-0.5, 0.3, 0.4], Chol3::from_diag_values([0.4, 0.5, 0.3], [-0.1, 0.0, 0.2])),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let sd = 1.5;
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: [f64; 3] = [0; 3].map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let x = e.map(|v| v * sd);
            let log_q = -1.5 * LN_2PI - 3.0 * sd.ln() - 0.5 * e.iter().map(|v| v * v).sum::<f64>();
            acc += (mixture_log_density(&comps, x) - log_q).exp();
        }
        let integral = acc / n as f64;
        assert!((integral - 1.0).abs() < 0.02, "{integral}");
    }

    #[test]
    fn finite_grid_rejects_nonfinite() {
        let bad = TvcComponent::standard([f64::NAN, 0.0, 0.0]);
        assert!(TvcGmmField::new(1, 1, 1, vec![bad]).is_err());
        let _ = Grid::zeros(1, 1);
    }
}
