//! Shared helpers for the integration suites: central finite differences,
//! relative-error comparison, a naive matrix-product oracle, and small
//! fixture builders.

#![allow(dead_code)] // each test binary uses its own subset

use comaml_core::data::{generate_family, FamilyConfig, SyntheticFamily};
use comaml_core::meta::TrainSettings;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Relative error with an absolute floor: `|a−b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Central finite-difference gradient of `f` at `x0` with step `h`.
pub fn fd_gradient_with_step(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut g = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = f(&x);
        x[i] = x0[i] - h;
        let down = f(&x);
        x[i] = x0[i];
        g.push((up - down) / (2.0 * h));
    }
    g
}

/// Central finite-difference gradient of `f` at `x0` with the default step.
pub fn fd_gradient(f: impl FnMut(&[f64]) -> f64, x0: &[f64]) -> Vec<f64> {
    fd_gradient_with_step(f, x0, FD_STEP)
}

/// Asserts the analytic gradient matches central differences of `f` at `x0`
/// to `FD_REL_TOL`, component by component. Returns the worst error.
pub fn assert_grads_match_fd(
    label: &str,
    f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
) -> f64 {
    assert_grads_match_fd_with_step(label, f, x0, analytic, FD_STEP)
}

/// Step-parametrized form of [`assert_grads_match_fd`]. Losses built from
/// ReLU or max pooling are only piecewise smooth; when the evaluation point
/// happens to sit within the default step of a kink, a smaller step keeps
/// both central-difference evaluations on one linear piece.
pub fn assert_grads_match_fd_with_step(
    label: &str,
    f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    let numeric = fd_gradient_with_step(f, x0, h);
    assert_eq!(analytic.len(), numeric.len(), "{label}: gradient length");
    let mut worst = 0.0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(a, n);
        assert!(
            e <= FD_REL_TOL,
            "{label}: component {i} analytic {a} vs numeric {n} (rel err {e:.3e})"
        );
        if e > worst {
            worst = e;
        }
    }
    worst
}

/// Triple-loop `[m,k] × [k,n]` product — the independent reference the fast
/// path is checked against.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Deterministic pseudo-random values in [−half, half] for fixture data
/// (quality is irrelevant; only determinism matters).
pub fn fixture_values(seed: u64, n: usize, half: f64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let unit = (state >> 11) as f64 / (1u64 << 53) as f64;
            (2.0 * unit - 1.0) * half
        })
        .collect()
}

/// A mid-sized family for episode-level parity checks: real block structure
/// but few enough dims to run hundreds of episodes quickly.
pub fn parity_family() -> SyntheticFamily {
    generate_family(&FamilyConfig {
        n_concepts: 4,
        n_classes: 30,
        train_classes: 20,
        val_classes: 4,
        test_classes: 6,
        noise_std: 0.2_f64.sqrt(),
        seed: 923,
    })
    .expect("parity family")
}

/// Settings matched to [`parity_family`].
pub fn parity_settings() -> TrainSettings {
    let mut s = TrainSettings::default();
    s.n_way = 5;
    s.k_shot = 5;
    s.q_query = 15;
    s.hidden = 32;
    s.embed_dim = 16;
    s.per_concept_dim = 16;
    s.concepts = 4;
    s.dropout = 0.2;
    s.batch_norm = true;
    s
}
