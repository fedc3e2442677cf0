//! Concept-assignment generators and their regularizers.
//!
//! Two trainable generators map inputs to one-hot feature→concept (or
//! patch→concept) assignments:
//!
//! * **static table** — a `d×c` logit matrix whose row softmax `Ĉ` is
//!   sampled row-wise through a Gumbel-softmax straight-through estimator at
//!   temperature λ, so gradients reach the logits while downstream consumers
//!   always see hard one-hot rows;
//! * **codebook** — `c` centroid vectors; each patch is assigned to its
//!   nearest centroid, trained with stop-gradient quantization losses and a
//!   surrogate entropy over softmin distances.
//!
//! A frozen oracle wraps a fixed assignment (the ground-truth block
//! structure) for parity testing.

use crate::error::CoreError;
use crate::sample::{argmax_rows, gumbel_softmax_st};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

// ── static assignment table ─────────────────────────────────────────────────

/// Trainable `d×c` assignment logits; `Ĉ` is their row softmax.
pub struct AssignmentProbabilities {
    pub logits: Tensor,
}

impl AssignmentProbabilities {
    /// Zero logits: exactly uniform `Ĉ`.
    pub fn uniform(d: usize, c: usize) -> AssignmentProbabilities {
        AssignmentProbabilities {
            logits: Tensor::leaf(vec![0.0; d * c], &[d, c]),
        }
    }

    pub fn from_logits(logits: Tensor) -> AssignmentProbabilities {
        assert!(
            logits.shape().len() == 2,
            "assignment logits must be rank 2, got {:?}",
            logits.shape()
        );
        AssignmentProbabilities { logits }
    }

    pub fn dims(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn concepts(&self) -> usize {
        self.logits.shape()[1]
    }

    /// `Ĉ`: each row a strictly positive simplex.
    pub fn probabilities(&self) -> Tensor {
        self.logits.softmax_last()
    }
}

/// How assignments are drawn: stochastic straight-through during training,
/// deterministic argmax at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignmentMode {
    Sample,
    Argmax,
}

/// A one-hot assignment of `rows` items (feature dims or patches) to `c`
/// concepts. `matrix`'s forward values are exactly one-hot; in sample mode it
/// is the straight-through expression whose gradient reaches the generator.
pub struct ConceptAssignment {
    pub matrix: Tensor,
    /// The relaxed rows backing the straight-through gradient, when sampled.
    pub soft: Option<Tensor>,
    /// Per-row selected concept.
    pub labels: Vec<usize>,
}

impl ConceptAssignment {
    /// Constant one-hot assignment from explicit labels (oracle/argmax).
    pub fn from_labels(labels: &[usize], c: usize) -> ConceptAssignment {
        let mut data = vec![0.0; labels.len() * c];
        for (i, &j) in labels.iter().enumerate() {
            assert!(j < c, "assignment label {j} out of range for {c} concepts");
            data[i * c + j] = 1.0;
        }
        ConceptAssignment {
            matrix: Tensor::constant(data, &[labels.len(), c]),
            soft: None,
            labels: labels.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn concepts(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Column `j` as a length-`rows` vector (broadcasts against `[B, rows]`).
    pub fn column(&self, j: usize) -> Tensor {
        assert!(j < self.concepts(), "concept {j} out of range");
        let rows = self.rows();
        self.matrix.narrow(1, j, 1).reshape(&[rows])
    }
}

/// Draws a one-hot assignment from the table: row-wise Gumbel-softmax with
/// straight-through gradients in sample mode, deterministic row argmax
/// (ties to the lowest concept) in argmax mode.
pub fn sample_static_assignment(
    probs: &AssignmentProbabilities,
    lambda: f64,
    rng: &mut ChaCha8Rng,
    mode: AssignmentMode,
) -> ConceptAssignment {
    match mode {
        AssignmentMode::Sample => {
            let draw = gumbel_softmax_st(&probs.logits.log_softmax_last(), lambda, rng);
            ConceptAssignment {
                matrix: draw.straight_through,
                soft: Some(draw.soft),
                labels: draw.labels,
            }
        }
        AssignmentMode::Argmax => {
            let labels = argmax_rows(probs.logits.data(), probs.concepts());
            ConceptAssignment::from_labels(&labels, probs.concepts())
        }
    }
}

/// Total assignment entropy `H = Σ_i Σ_j −Ĉ[i,j]·ln Ĉ[i,j]`, computed from
/// log-softmax so saturated rows contribute exact zeros instead of NaNs.
pub fn static_entropy(probs: &AssignmentProbabilities) -> Tensor {
    let ls = probs.logits.log_softmax_last();
    ls.exp().mul(&ls).sum_all().neg()
}

/// Multiplies `x` (shape `[rows]` or `[batch, rows]`) by assignment column
/// `j`, zeroing features owned by other concepts. In sample mode the column
/// is the straight-through expression, so the product carries gradients to
/// the generator.
pub fn mask_features(x: &Tensor, assignment: &ConceptAssignment, j: usize) -> Tensor {
    x.mul(&assignment.column(j))
}

// ── temperature schedule ────────────────────────────────────────────────────

/// Exponential decay from `lambda0` to `lambda_min`, reaching the floor at
/// 80% of the training horizon and clamped there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TemperatureSchedule {
    pub lambda0: f64,
    pub lambda_min: f64,
    pub horizon: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> TemperatureSchedule {
        TemperatureSchedule::new(1.0, 0.1, 3000)
    }
}

impl TemperatureSchedule {
    pub fn new(lambda0: f64, lambda_min: f64, horizon: usize) -> TemperatureSchedule {
        assert!(
            lambda0 >= lambda_min && lambda_min > 0.0,
            "temperature schedule needs lambda0 ≥ lambda_min > 0, got {lambda0} and {lambda_min}"
        );
        TemperatureSchedule {
            lambda0,
            lambda_min,
            horizon,
        }
    }

    /// `λ(u) = max(λ_min, λ0·exp(−r·u))` with
    /// `r = ln(λ0/λ_min)/(0.8·horizon)`.
    pub fn lambda(&self, u: usize) -> f64 {
        if self.horizon == 0 || self.lambda0 == self.lambda_min {
            return self.lambda0;
        }
        let r = (self.lambda0 / self.lambda_min).ln() / (0.8 * self.horizon as f64);
        (self.lambda0 * (-r * u as f64).exp()).max(self.lambda_min)
    }
}

// ── vector-quantized assignment ─────────────────────────────────────────────

/// Trainable centroids `e_1..e_c ∈ R^p` with the commitment coefficient ε.
pub struct Codebook {
    pub centroids: Tensor,
    pub commitment_coefficient: f64,
}

impl Codebook {
    pub fn from_centroids(centroids: Tensor, commitment_coefficient: f64) -> Codebook {
        assert!(
            centroids.shape().len() == 2,
            "codebook centroids must be rank 2, got {:?}",
            centroids.shape()
        );
        Codebook {
            centroids,
            commitment_coefficient,
        }
    }

    pub fn concepts(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn patch_dim(&self) -> usize {
        self.centroids.shape()[1]
    }
}

/// Uniform(−1, 1) centroid initialization (patch coordinates live in the
/// sine range [−1, 1]).
pub fn init_codebook_values(c: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..c * p).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Nearest-centroid assignment for a set of patches; ties break to the
/// lowest centroid index. Distances are computed exactly (no graph).
pub fn vq_assign(patches: &[Vec<f64>], codebook: &Codebook) -> (Vec<usize>, ConceptAssignment) {
    let c = codebook.concepts();
    let p = codebook.patch_dim();
    let cents = codebook.centroids.data();
    let indices: Vec<usize> = patches
        .iter()
        .map(|patch| {
            assert_eq!(patch.len(), p, "vq_assign: patch dim {} vs centroid dim {p}", patch.len());
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..c {
                let mut d = 0.0;
                for (k, &v) in patch.iter().enumerate() {
                    let diff = v - cents[j * p + k];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect();
    let assignment = ConceptAssignment::from_labels(&indices, c);
    (indices, assignment)
}

/// Quantization objective, mean over patches:
/// `‖sg[patch] − e_j‖² + ε·‖patch − sg[e_j]‖²`.
///
/// Stop-gradients route the first term's gradient to the centroids only and
/// the second term's to the patches only.
pub fn vq_loss(patches: &Tensor, codebook: &Codebook, indices: &[usize]) -> Tensor {
    let shape = patches.shape();
    assert!(shape.len() == 2, "vq_loss: patches must be rank 2, got {shape:?}");
    assert_eq!(shape[0], indices.len(), "vq_loss: {} patches vs {} indices", shape[0], indices.len());
    assert!(
        indices.iter().all(|&j| j < codebook.concepts()),
        "vq_loss: index out of range"
    );
    let selected = codebook.centroids.select_rows(indices);
    let codebook_term = patches
        .detach()
        .sub(&selected)
        .square()
        .sum_axis(1, false)
        .mean_all();
    let commitment_term = patches
        .sub(&selected.detach())
        .square()
        .sum_axis(1, false)
        .mean_all();
    codebook_term.add(&commitment_term.scale(codebook.commitment_coefficient))
}

/// Mean Shannon entropy (natural log) of the surrogate assignment
/// distribution `softmax(−‖patch − e_j‖)` over unsquared distances.
/// Differentiable with respect to both patches and centroids.
pub fn vq_surrogate_entropy(patches: &Tensor, codebook: &Codebook) -> Tensor {
    assert!(
        patches.shape().len() == 2,
        "vq_surrogate_entropy: patches must be rank 2, got {:?}",
        patches.shape()
    );
    // relu + tiny eps guard exact-zero distances whose sqrt has no gradient
    let dist = patches
        .sq_euclidean(&codebook.centroids)
        .relu()
        .add_scalar(1e-12)
        .sqrt();
    let ls = dist.neg().log_softmax_last();
    ls.exp().mul(&ls).sum_axis(1, false).neg().mean_all()
}

/// Patches-per-centroid counts — the collapse diagnostic.
pub fn usage_histogram(indices: &[usize], c: usize) -> Vec<usize> {
    let mut counts = vec![0usize; c];
    for &j in indices {
        counts[j] += 1;
    }
    counts
}

// ── assignment export ───────────────────────────────────────────────────────

/// Header written alongside every assignment CSV.
#[derive(Debug, Serialize)]
pub struct AssignmentHeader<'a> {
    pub c: usize,
    pub d: usize,
    pub mode: &'a str,
}

/// Writes `(index, argmax_concept, max_probability)` rows to `<stem>.csv`
/// and the `{c, d, mode}` header to `<stem>.json`. The index column is named
/// `feature_index` for the static table and `patch_position` for the
/// codebook.
pub fn export_assignment_csv(
    stem: &Path,
    mode: &str,
    c: usize,
    rows: &[(usize, usize, f64)],
) -> Result<(), CoreError> {
    let index_column = if mode == "vq" { "patch_position" } else { "feature_index" };
    let mut writer = csv::Writer::from_path(stem.with_extension("csv"))?;
    writer.write_record([index_column, "argmax_concept", "max_probability"])?;
    for &(index, concept, prob) in rows {
        writer.write_record([index.to_string(), concept.to_string(), format!("{prob}")])?;
    }
    writer.flush()?;
    let header = AssignmentHeader {
        c,
        d: rows.len(),
        mode,
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(())
}
