//! Parameter storage, feature encoders, and prototype classifier heads.
//!
//! Parameters live in a [`ParamSet`] — an ordered, name-keyed collection of
//! flat float buffers that serializes to JSON and hands out aligned autodiff
//! leaves. Model structs ([`Encoder`], [`ConceptEncoderBank`], [`Head`]) are
//! cheap *views* over tensors: the training loop rebuilds them each
//! iteration over fresh leaves (or adapted non-leaf tensors) so the same
//! forward code serves initial, adapted, and second-order paths.

use crate::concepts::{mask_features, ConceptAssignment};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Batch-standardization variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Additive mask value that makes a patch invisible to max-pooling.
const POOL_MASK: f64 = -1e30;

// ── parameter storage ───────────────────────────────────────────────────────

/// A named flat float buffer with its logical shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> RawTensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "shape {shape:?} vs {} values", values.len());
        RawTensor { shape, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedParam {
    name: String,
    tensor: RawTensor,
}

/// Ordered, name-keyed parameter collection. Order is insertion order and is
/// the contract for gradient/optimizer alignment: [`ParamSet::leaves`]
/// produces autodiff leaves in exactly this order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<NamedParam>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(NamedParam {
            name,
            tensor: RawTensor::new(shape, values),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RawTensor> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RawTensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Buffer sizes in order, for optimizer state allocation.
    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.tensor.values.len()).collect()
    }

    /// Fresh gradient-tracked leaves, one per entry, in insertion order.
    pub fn leaves(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| Tensor::leaf(e.tensor.values.clone(), &e.tensor.shape))
            .collect()
    }

    /// Mutable views over every buffer, in order, for in-place optimizer steps.
    pub fn views_mut(&mut self) -> Vec<&mut [f64]> {
        self.entries
            .iter_mut()
            .map(|e| e.tensor.values.as_mut_slice())
            .collect()
    }

    /// Total scalar count across all buffers.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.values.len()).sum()
    }
}

// ── initialization ──────────────────────────────────────────────────────────

/// Uniform(−L, L) with L = √(6/(fan_in+fan_out)).
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

/// Layer widths of a two-layer relu encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

/// Pushes `{prefix}.w1 .b1 .w2 .b2` (Glorot weights, zero biases). With
/// `batch_norm` it also pushes the per-layer normalization affine parameters
/// `{prefix}.scale1 .shift1 .scale2 .shift2` (ones and zeros), which start as
/// the identity. None of the extra pushes draw from `rng`, so toggling
/// normalization never shifts the weight initialization stream.
pub fn push_encoder_params(
    set: &mut ParamSet,
    prefix: &str,
    shape: EncoderShape,
    batch_norm: bool,
    rng: &mut ChaCha8Rng,
) {
    let EncoderShape { in_dim, hidden, out_dim } = shape;
    set.push(format!("{prefix}.w1"), vec![in_dim, hidden], glorot_uniform(in_dim, hidden, rng));
    set.push(format!("{prefix}.b1"), vec![hidden], vec![0.0; hidden]);
    if batch_norm {
        set.push(format!("{prefix}.scale1"), vec![hidden], vec![1.0; hidden]);
        set.push(format!("{prefix}.shift1"), vec![hidden], vec![0.0; hidden]);
    }
    set.push(format!("{prefix}.w2"), vec![hidden, out_dim], glorot_uniform(hidden, out_dim, rng));
    set.push(format!("{prefix}.b2"), vec![out_dim], vec![0.0; out_dim]);
    if batch_norm {
        set.push(format!("{prefix}.scale2"), vec![out_dim], vec![1.0; out_dim]);
        set.push(format!("{prefix}.shift2"), vec![out_dim], vec![0.0; out_dim]);
    }
}

// ── encoder ─────────────────────────────────────────────────────────────────

/// Whether a forward pass applies stochastic regularization. Batch
/// standardization runs in both modes (within-batch statistics, no running
/// averages); dropout draws from the supplied stream only in `Train`.
pub enum ForwardMode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

/// Learnable per-feature scale and shift applied after batch
/// standardization — together they make the normalization a full batch-norm
/// layer. Scale starts at one and shift at zero (the identity), and both are
/// ordinary parameters: the outer loop can grow the activation scale, which
/// is what lets a small fixed-step inner adaptation move the logits.
#[derive(Clone)]
pub struct BnAffine {
    pub scale: Tensor,
    pub shift: Tensor,
}

/// Two affine layers with a relu between them, viewed over the parameter
/// tensors. Layer order: affine → batch-norm (standardize, then learnable
/// scale/shift) → (relu, first layer only) → dropout. The output layer is
/// linear. Both layers are normalized or neither is.
pub struct Encoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub bn1: Option<BnAffine>,
    pub bn2: Option<BnAffine>,
    pub dropout: f64,
}

impl Encoder {
    pub fn new(
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        bn1: Option<BnAffine>,
        bn2: Option<BnAffine>,
        dropout: f64,
    ) -> Encoder {
        assert_eq!(w1.shape().len(), 2, "w1 must be rank 2");
        assert_eq!(w2.shape().len(), 2, "w2 must be rank 2");
        assert_eq!(w1.shape()[1], w2.shape()[0], "hidden width mismatch");
        assert_eq!(b1.shape(), &[w1.shape()[1]], "b1 shape");
        assert_eq!(b2.shape(), &[w2.shape()[1]], "b2 shape");
        assert_eq!(bn1.is_some(), bn2.is_some(), "normalize both layers or neither");
        if let Some(bn) = &bn1 {
            assert_eq!(bn.scale.shape(), &[w1.shape()[1]], "scale1 shape");
            assert_eq!(bn.shift.shape(), &[w1.shape()[1]], "shift1 shape");
        }
        if let Some(bn) = &bn2 {
            assert_eq!(bn.scale.shape(), &[w2.shape()[1]], "scale2 shape");
            assert_eq!(bn.shift.shape(), &[w2.shape()[1]], "shift2 shape");
        }
        assert!((0.0..1.0).contains(&dropout), "dropout must be in [0,1)");
        Encoder { w1, b1, w2, b2, bn1, bn2, dropout }
    }

    /// View over the leaves named `{prefix}.w1 .b1 .w2 .b2`, plus
    /// `{prefix}.scale1 .shift1 .scale2 .shift2` when `batch_norm` is set.
    pub fn view(
        leaves: &[Tensor],
        set: &ParamSet,
        prefix: &str,
        batch_norm: bool,
        dropout: f64,
    ) -> Encoder {
        let pick = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            let idx = set
                .index_of(&name)
                .unwrap_or_else(|| panic!("missing parameter {name}"));
            leaves[idx].clone()
        };
        let affine = |n: usize| {
            if batch_norm {
                Some(BnAffine { scale: pick(&format!("scale{n}")), shift: pick(&format!("shift{n}")) })
            } else {
                None
            }
        };
        Encoder::new(pick("w1"), pick("b1"), pick("w2"), pick("b2"), affine(1), affine(2), dropout)
    }

    pub fn in_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn batch_norm(&self) -> bool {
        self.bn1.is_some()
    }

    /// `x: [batch, in_dim] → [batch, out_dim]`.
    pub fn forward(&self, x: &Tensor, mode: &mut ForwardMode) -> Tensor {
        let mut h = x.matmul(&self.w1).add(&self.b1);
        if let Some(bn) = &self.bn1 {
            h = h.batch_standardize(BN_EPS).mul(&bn.scale).add(&bn.shift);
        }
        h = h.relu();
        if let ForwardMode::Train { rng } = mode {
            if self.dropout > 0.0 {
                h = h.dropout(self.dropout, rng);
            }
        }
        let mut z = h.matmul(&self.w2).add(&self.b2);
        if let Some(bn) = &self.bn2 {
            z = z.batch_standardize(BN_EPS).mul(&bn.scale).add(&bn.shift);
        }
        if let ForwardMode::Train { rng } = mode {
            if self.dropout > 0.0 {
                z = z.dropout(self.dropout, rng);
            }
        }
        z
    }
}

// ── concept encoder bank ────────────────────────────────────────────────────

/// One encoder per concept, or a single weight-shared encoder serving all
/// concepts (the patch pipeline shares; the masked-feature pipeline does not).
pub struct ConceptEncoderBank {
    encoders: Vec<Encoder>,
    concepts: usize,
    shared: bool,
}

impl ConceptEncoderBank {
    pub fn per_concept(encoders: Vec<Encoder>) -> ConceptEncoderBank {
        assert!(!encoders.is_empty());
        let out = encoders[0].out_dim();
        assert!(encoders.iter().all(|e| e.out_dim() == out), "encoder widths differ");
        let concepts = encoders.len();
        ConceptEncoderBank { encoders, concepts, shared: false }
    }

    pub fn shared(encoder: Encoder, concepts: usize) -> ConceptEncoderBank {
        assert!(concepts >= 1);
        ConceptEncoderBank { encoders: vec![encoder], concepts, shared: true }
    }

    pub fn concepts(&self) -> usize {
        self.concepts
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn encoder_for(&self, j: usize) -> &Encoder {
        assert!(j < self.concepts, "concept {j} out of range");
        if self.shared { &self.encoders[0] } else { &self.encoders[j] }
    }

    pub fn per_concept_dim(&self) -> usize {
        self.encoders[0].out_dim()
    }

    /// Width of the concatenated composite embedding.
    pub fn composite_dim(&self) -> usize {
        self.concepts * self.per_concept_dim()
    }
}

/// Composite embedding for vector inputs: per concept, mask `x` down to that
/// concept's features, encode with the concept's encoder, and concatenate.
/// `x: [batch, d] → [batch, concepts·per_concept_dim]`.
pub fn concept_embed_masked(
    x: &Tensor,
    assignment: &ConceptAssignment,
    bank: &ConceptEncoderBank,
    mode: &mut ForwardMode,
) -> Tensor {
    assert_eq!(assignment.concepts(), bank.concepts(), "assignment/bank concept count");
    let parts: Vec<Tensor> = (0..bank.concepts())
        .map(|j| bank.encoder_for(j).forward(&mask_features(x, assignment, j), mode))
        .collect();
    Tensor::concat(&parts, 1)
}

/// Composite embedding for patch inputs: encode every patch with the shared
/// encoder, then per concept take the elementwise max over each instance's
/// patches assigned to it (zero vector when none are), and concatenate.
///
/// `patches: [batch·n_patches, p]` (instance-major), `assigned[i·n+k]` the
/// concept of instance `i`'s patch `k`. Returns `[batch, c·m]`.
pub fn concept_embed_patches(
    patches: &Tensor,
    assigned: &[usize],
    batch: usize,
    n_patches: usize,
    encoder: &Encoder,
    concepts: usize,
    mode: &mut ForwardMode,
) -> Tensor {
    assert_eq!(patches.shape()[0], batch * n_patches, "patch row count");
    assert_eq!(assigned.len(), batch * n_patches, "assignment length");
    assert!(assigned.iter().all(|&j| j < concepts), "assignment out of range");
    let m = encoder.out_dim();
    let embedded = encoder.forward(patches, mode).reshape(&[batch, n_patches, m]);
    let mut parts = Vec::with_capacity(concepts);
    for j in 0..concepts {
        let mut mask = vec![POOL_MASK; batch * n_patches];
        let mut has = vec![0.0; batch];
        for i in 0..batch {
            for k in 0..n_patches {
                if assigned[i * n_patches + k] == j {
                    mask[i * n_patches + k] = 0.0;
                    has[i] = 1.0;
                }
            }
        }
        let mask = Tensor::constant(mask, &[batch, n_patches, 1]);
        let has = Tensor::constant(has, &[batch, 1]);
        // masked patches sit at −1e30 and lose every max; an instance with no
        // patch in concept j is zeroed by `has`
        let pooled = embedded.add(&mask).max_axis(1, false).mul(&has);
        parts.push(pooled);
    }
    Tensor::concat(&parts, 1)
}

// ── prototypes and heads ────────────────────────────────────────────────────

/// Per-class means of `embeddings: [batch, m]` under `labels`; every class in
/// `0..n_classes` must appear. Returns `[n_classes, m]`.
pub fn class_prototypes(embeddings: &Tensor, labels: &[usize], n_classes: usize) -> Tensor {
    assert_eq!(embeddings.shape()[0], labels.len(), "row/label count");
    let mut parts = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k)
            .map(|(i, _)| i)
            .collect();
        assert!(!idx.is_empty(), "class {k} has no support rows");
        parts.push(embeddings.select_rows(&idx).mean_axis(0, true));
    }
    Tensor::concat(&parts, 0)
}

/// A linear classifier `logits = z·Wᵀ + b`.
pub struct Head {
    pub w: Tensor,
    pub b: Tensor,
}

/// Head induced by prototypes: `W = 2P`, `b_k = −‖p_k‖²`, so that
/// `softmax(Wz + b) = softmax(−‖z − p_k‖²)` exactly.
pub fn prototype_head(prototypes: &Tensor) -> Head {
    Head {
        w: prototypes.scale(2.0),
        b: prototypes.square().sum_axis(1, false).neg(),
    }
}

/// `embeddings: [batch, m] → logits [batch, n_classes]`.
pub fn classify(embeddings: &Tensor, head: &Head) -> Tensor {
    embeddings.matmul(&head.w.transpose()).add(&head.b)
}
