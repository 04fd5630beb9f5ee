#![allow(dead_code)]

use melmix::tvcgmm::{Chol3, TvcComponent, TvcGmmField};
use melmix::MelSpectrogram;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded random field and spectrogram with well-scaled values.
pub fn random_instance(seed: u64, frames: usize, bins: usize, k: usize) -> (TvcGmmField, MelSpectrogram) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = TvcGmmField::from_fn(frames, bins, k, |_, _, _| TvcComponent {
        logit: rng.random_range(-1.0..1.0),
        mean: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
        chol: Chol3 {
            diag_pre: [0; 3].map(|_| rng.random_range(-0.5..0.8)),
            off: [0; 3].map(|_| rng.random_range(-0.5..0.5)),
        },
    });
    let spec = MelSpectrogram::from_fn(frames, bins, |_, _| rng.random_range(-1.5..1.5));
    (field, spec)
}

/// Central finite differences of the NLL with respect to every parameter.
pub fn finite_difference_gradient(field: &TvcGmmField, spec: &MelSpectrogram, h: f64) -> Vec<f64> {
    let base = field.to_params();
    let mut probe = field.clone();
    let mut params = base.clone();
    (0..base.len())
        .map(|i| {
            params[i] = base[i] + h;
            probe.set_params(&params);
            let up = melmix::tvcgmm::nll(&probe, spec).unwrap();
            params[i] = base[i] - h;
            probe.set_params(&params);
            let down = melmix::tvcgmm::nll(&probe, spec).unwrap();
            params[i] = base[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Fraction of bins whose two fitted component means (first chain
/// coordinate) each lie within `3σ_n/√(π_m·n)` of a true mode value, under
/// the better of the two component orderings.
pub fn mode_recovery_fraction(
    spec: &melmix::synth::SynthSpec,
    condition: usize,
    field: &TvcGmmField,
    n_per_condition: usize,
) -> f64 {
    let cond = &spec.conditions[condition];
    let tol: Vec<f64> = cond
        .weights
        .iter()
        .map(|w| 3.0 * cond.noise_std / (w * n_per_condition as f64).sqrt())
        .collect();
    let mut ok = 0;
    for t in 0..spec.frames {
        for f in 0..spec.bins {
            let c = field.chain(t, f);
            let (a, b) = (c[0].mean[0], c[1].mean[0]);
            let (p0, p1) = (cond.patterns[0][t][f], cond.patterns[1][t][f]);
            let direct = (a - p0).abs() < tol[0] && (b - p1).abs() < tol[1];
            let swapped = (b - p0).abs() < tol[0] && (a - p1).abs() < tol[1];
            if direct || swapped {
                ok += 1;
            }
        }
    }
    ok as f64 / (spec.frames * spec.bins) as f64
}


/// Peak 0.5, leaving headroom for 16-bit WAV files.
pub const TONE_PARTIALS: [(f64, f64); 3] = [(220.0, 0.25), (440.0, 0.15), (660.0, 0.1)];

pub fn tone() -> melmix::AudioBuffer {
    melmix::AudioBuffer::harmonic_tone(&TONE_PARTIALS, 1.0, 22050)
}

pub fn tone_mel() -> MelSpectrogram {
    melmix::spectral::mel_spectrogram(&tone(), &Default::default(), &Default::default()).unwrap()
}

pub fn noise_audio(seed: u64, amplitude: f64, len: usize) -> melmix::AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len).map(|_| rng.random_range(-amplitude..amplitude)).collect();
    melmix::AudioBuffer::new(samples, 22050).unwrap()
}

/// The five non-constant spectrograms the filter properties are checked on.
pub fn fixture_spectrograms() -> Vec<(&'static str, MelSpectrogram)> {
    let noise = melmix::spectral::mel_spectrogram(
        &noise_audio(3, 0.5, 11025),
        &Default::default(),
        &Default::default(),
    )
    .unwrap();
    let synth = melmix::synth::generate(&melmix::synth::SynthSpec::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let random = MelSpectrogram::from_fn(20, 20, |_, _| rng.random_range(-3.0..3.0));
    let bump = MelSpectrogram::from_fn(20, 24, |t, f| {
        let (dt, df) = (t as f64 - 9.0, f as f64 - 12.0);
        4.0 * (-(dt * dt + df * df) / 18.0).exp()
    });
    vec![
        ("tone", tone_mel()),
        ("noise", noise),
        ("synthetic", synth.records[0].spec.clone()),
        ("random", random),
        ("bump", bump),
    ]
}

/// Seeded trivariate mixture with well-conditioned, clearly correlated
/// components.
pub fn random_chain(seed: u64, k: usize) -> Vec<TvcComponent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| TvcComponent {
            logit: rng.random_range(-1.0..1.0),
            mean: [0; 3].map(|_| rng.random_range(-2.0..2.0)),
            chol: Chol3 {
                diag_pre: [0; 3].map(|_| rng.random_range(-0.5..0.5)),
                off: [0; 3].map(|_| rng.random_range(-0.8..0.8)),
            },
        })
        .collect()
}

/// Mean and covariance of a trivariate mixture from its components.
pub fn mixture_moments(components: &[TvcComponent]) -> ([f64; 3], [[f64; 3]; 3]) {
    let w = melmix::tvcgmm::mixture_weights(components);
    let mut mean = [0.0; 3];
    for (c, a) in components.iter().zip(&w) {
        for i in 0..3 {
            mean[i] += a * c.mean[i];
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for (c, a) in components.iter().zip(&w) {
        let s = c.chol.covariance();
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += a * (s[i][j] + (c.mean[i] - mean[i]) * (c.mean[j] - mean[j]));
            }
        }
    }
    (mean, cov)
}

/// Mean and covariance of `(y1, y2) | y0` by evaluating the joint density on
/// an `n × n` grid spanning ±6 standard deviations of every component.
pub fn brute_force_conditional(components: &[TvcComponent], y0: f64, n: usize) -> ([f64; 2], [[f64; 2]; 2]) {
    let range = |i: usize| {
        components.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            let sd = c.chol.covariance()[i][i].sqrt();
            (lo.min(c.mean[i] - 6.0 * sd), hi.max(c.mean[i] + 6.0 * sd))
        })
    };
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    };
    let (a, b) = (axis(range(1)), axis(range(2)));
    let mut mass = 0.0;
    let mut m1 = [0.0; 2];
    let mut m2 = [[0.0; 2]; 2];
    for &y1 in &a {
        for &y2 in &b {
            let p = melmix::tvcgmm::mixture_log_density(components, [y0, y1, y2]).exp();
            mass += p;
            m1[0] += p * y1;
            m1[1] += p * y2;
            m2[0][0] += p * y1 * y1;
            m2[0][1] += p * y1 * y2;
            m2[1][1] += p * y2 * y2;
        }
    }
    let mean = [m1[0] / mass, m1[1] / mass];
    let c01 = m2[0][1] / mass - mean[0] * mean[1];
    let cov = [
        [m2[0][0] / mass - mean[0] * mean[0], c01],
        [c01, m2[1][1] / mass - mean[1] * mean[1]],
    ];
    (mean, cov)
}
