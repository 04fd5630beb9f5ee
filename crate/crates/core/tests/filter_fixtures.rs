mod common;

use melmix::filters::{sharpen, smooth, var_laplacian};

#[test]
fn var_l_orders_smooth_original_sharpen() {
    for (name, spec) in common::fixture_spectrograms() {
        let v = var_laplacian(&spec).unwrap();
        let vs = var_laplacian(&smooth(&spec, 1.0).unwrap()).unwrap();
        let vh = var_laplacian(&sharpen(&spec, 1.0).unwrap()).unwrap();
        assert!(vs < v && v < vh, "{name}: {vs} {v} {vh}");
    }
}

#[test]
fn gaussian_semigroup_on_interior() {
    let mut failures = Vec::new();
    for (name, spec) in common::fixture_spectrograms() {
        let twice = smooth(&smooth(&spec, 1.0).unwrap(), 1.0).unwrap();
        let once = smooth(&spec, std::f64::consts::SQRT_2).unwrap();
        let margin = 6;
        let mut worst: f64 = 0.0;
        for t in margin..spec.frames() - margin {
            for f in margin..spec.bins() - margin {
                worst = worst.max((twice.get(t, f) - once.get(t, f)).abs());
            }
        }
        println!("{name}: max interior difference {worst:.3e}");
        if worst >= 1e-3 {
            failures.push(name);
        }
    }
    assert!(failures.is_empty(), "semigroup off by more than 1e-3 on {failures:?}");
}
