//! Gumbel noise and relaxed categorical sampling with straight-through
//! gradients.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One draw of a relaxed categorical sample per row.
///
/// `straight_through`'s forward values equal `hard` exactly (the relaxation
/// cancels elementwise as `soft − soft`), while its gradient is the
/// relaxation's: `hard + soft − sg(soft)`.
pub struct StSample {
    /// `softmax((log_probs + G)/λ)` rows.
    pub soft: Tensor,
    /// One-hot rows at the soft argmax (constant).
    pub hard: Tensor,
    /// Forward == hard, backward == soft.
    pub straight_through: Tensor,
    /// Per-row selected category.
    pub labels: Vec<usize>,
}

/// Standard Gumbel(0,1) noise: `−ln(−ln U)`, with U clamped away from 0.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Samples every row of `log_probs` (shape `[..., c]`) via the Gumbel-softmax
/// relaxation at temperature `lambda`. `-inf` log-probabilities (zero-mass
/// categories) are never selected.
pub fn gumbel_softmax_st(log_probs: &Tensor, lambda: f64, rng: &mut ChaCha8Rng) -> StSample {
    assert!(lambda > 0.0, "gumbel_softmax: temperature {lambda} must be > 0");
    let shape = log_probs.shape().to_vec();
    assert!(!shape.is_empty(), "gumbel_softmax: rank-0 input");
    let cols = shape[shape.len() - 1];
    let noise = Tensor::constant(gumbel_noise(rng, log_probs.numel()), &shape);
    let soft = log_probs.add(&noise).scale(1.0 / lambda).softmax_last();

    let rows = soft.numel() / cols;
    let mut hard = vec![0.0; soft.numel()];
    let mut labels = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &soft.data()[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        hard[r * cols + best] = 1.0;
        labels.push(best);
    }
    let hard = Tensor::constant(hard, &shape);
    let straight_through = hard.add(&soft.sub(&soft.detach()));
    StSample {
        soft,
        hard,
        straight_through,
        labels,
    }
}

/// Single-vector convenience form: draws one relaxed categorical sample from
/// a probability simplex. Returns `(soft, onehot)`; with `hard`, downstream
/// consumers should use the straight-through combination (see
/// [`gumbel_softmax_st`]).
pub fn gumbel_softmax_sample(
    probs: &[f64],
    lambda: f64,
    rng: &mut ChaCha8Rng,
    hard: bool,
) -> (Vec<f64>, Vec<f64>) {
    assert!(
        probs.iter().all(|&p| p >= 0.0),
        "gumbel_softmax: negative probability"
    );
    let total: f64 = probs.iter().sum();
    assert!(
        (total - 1.0).abs() <= 1e-9,
        "gumbel_softmax: probabilities sum to {total}, not 1"
    );
    let log_probs = Tensor::constant(probs.iter().map(|&p| p.ln()).collect(), &[probs.len()]);
    let draw = gumbel_softmax_st(&log_probs, lambda, rng);
    let onehot = draw.hard.to_vec();
    let soft = if hard { onehot.clone() } else { draw.soft.to_vec() };
    (soft, onehot)
}

/// Row-wise argmax over the last axis of flat row-major data; ties break to
/// the lowest index.
pub fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    assert!(cols > 0 && data.len() % cols == 0, "argmax_rows: bad layout");
    data.chunks(cols)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
