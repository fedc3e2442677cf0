//! Episode-level learners and the bilevel meta-training loop.
//!
//! Five learners share one adaptation engine:
//!
//! * **protonet** — metric classifier over class-mean prototypes, no inner
//!   loop;
//! * **maml** — V gradient steps on the support loss adapt encoder and a
//!   meta-learned linear head;
//! * **protomaml** — the head is *initialized from prototypes* (`W = 2P`,
//!   `b = −‖p‖²`) and then adapted like maml; the initialization stays
//!   differentiable so outer gradients flow through it;
//! * **comet** — per-concept encoders over oracle-masked features, metric
//!   classification on concatenated concept prototypes;
//! * **comaml** — comet's composite embedding with a *trained* assignment
//!   generator (static table or codebook) and protomaml's adapted head.
//!
//! The inner loop treats the current parameters (θ, W, b) as independent
//! variables: each step differentiates the support loss *at* those tensors
//! (graph cuts) without flowing into their construction, then applies an
//! in-graph SGD step. In first-order mode the step directions are constants;
//! in second-order mode they stay differentiable, so the outer gradient
//! includes the adaptation curvature. Generator parameters φ are never
//! adapted within a task.
//!
//! Every stochastic choice draws from a purpose-split seeded stream
//! (episodes, patch permutations, dropout, assignment sampling, init), which
//! makes training bit-deterministic and lets reduced configurations consume
//! identical randomness to their baseline equivalents.

use crate::concepts::{
    init_codebook_values, sample_static_assignment, static_entropy, vq_assign, vq_loss,
    vq_surrogate_entropy, AssignmentMode, AssignmentProbabilities, Codebook, ConceptAssignment,
    TemperatureSchedule,
};
use crate::data::{
    permuted_patch_view, sample_episode, Episode, PatchView, Split, SyntheticFamily, BLOCK_DIM,
};
use crate::error::{ConfigError, CoreError};
use crate::models::{
    class_prototypes, classify, concept_embed_masked, concept_embed_patches,
    prototype_head, push_encoder_params, ConceptEncoderBank, Encoder, EncoderShape, ForwardMode,
    Head, ParamSet,
};
use crate::optim::{sgd_step, Adam};
use crate::rng;
use crate::sample::argmax_rows;
use crate::tensor::{backward, backward_with_cuts, softmax_cross_entropy, Tensor};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Commitment coefficient ε of the codebook quantization loss.
pub const VQ_COMMITMENT: f64 = 0.25;

// ── configuration ───────────────────────────────────────────────────────────

/// Inner/outer loop hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    /// α — within-episode SGD step size.
    pub inner_lr: f64,
    /// V — within-episode step count.
    pub inner_steps: usize,
    /// β — outer Adam learning rate.
    pub outer_lr: f64,
    /// Differentiate through the inner steps (else first-order).
    pub second_order: bool,
    /// γ — weight of the assignment-entropy bonus in the outer objective.
    pub entropy_coefficient: f64,
    pub tasks_per_batch: usize,
}

impl Default for AdaptationConfig {
    fn default() -> AdaptationConfig {
        AdaptationConfig {
            inner_lr: 0.01,
            inner_steps: 1,
            outer_lr: 0.001,
            second_order: false,
            entropy_coefficient: 1.0,
            tasks_per_batch: 4,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.inner_steps > 0 && self.inner_lr <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "inner_lr must be positive when inner_steps > 0, got {}",
                self.inner_lr
            )));
        }
        if self.outer_lr <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "outer_lr must be positive, got {}",
                self.outer_lr
            )));
        }
        if self.tasks_per_batch == 0 {
            return Err(ConfigError::Invalid("tasks_per_batch must be ≥ 1".into()));
        }
        if !self.entropy_coefficient.is_finite() || self.entropy_coefficient < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "entropy_coefficient must be finite and ≥ 0, got {}",
                self.entropy_coefficient
            )));
        }
        Ok(())
    }
}

/// Which learner runs. Ids are the CLI-facing names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "protonet")]
    ProtoNet,
    #[serde(rename = "maml")]
    Maml,
    #[serde(rename = "protomaml")]
    ProtoMaml,
    #[serde(rename = "comet")]
    Comet,
    #[serde(rename = "comaml-static")]
    ComamlStatic,
    #[serde(rename = "comaml-vq")]
    ComamlVq,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::ProtoNet,
        Algorithm::Maml,
        Algorithm::ProtoMaml,
        Algorithm::Comet,
        Algorithm::ComamlStatic,
        Algorithm::ComamlVq,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::ProtoNet => "protonet",
            Algorithm::Maml => "maml",
            Algorithm::ProtoMaml => "protomaml",
            Algorithm::Comet => "comet",
            Algorithm::ComamlStatic => "comaml-static",
            Algorithm::ComamlVq => "comaml-vq",
        }
    }

    pub fn from_id(id: &str) -> Result<Algorithm, ConfigError> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.id() == id)
            .ok_or_else(|| ConfigError::UnknownAlgorithm(id.to_string()))
    }

    /// Uses per-concept encoders and composite embeddings.
    pub fn uses_concept_bank(self) -> bool {
        matches!(
            self,
            Algorithm::Comet | Algorithm::ComamlStatic | Algorithm::ComamlVq
        )
    }

    /// Has trainable generator parameters φ.
    pub fn has_generator(self) -> bool {
        matches!(self, Algorithm::ComamlStatic | Algorithm::ComamlVq)
    }

    /// Operates on permuted patches instead of masked feature vectors.
    pub fn uses_patches(self) -> bool {
        self == Algorithm::ComamlVq
    }
}

/// Model widths and regularization flags shared by every learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: usize,
    /// m — embedding width of single-encoder learners.
    pub embed_dim: usize,
    /// m_c — per-concept embedding width of composite learners.
    pub per_concept_dim: usize,
    /// c — model-side concept count.
    pub concepts: usize,
    pub n_way: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    /// p — patch width of the codebook pipeline.
    pub patch_dim: usize,
    pub n_patches: usize,
}

/// Everything `run_meta_training` needs besides algorithm, family, and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    /// U — outer iteration count.
    pub iterations: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub per_concept_dim: usize,
    pub concepts: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub adaptation: AdaptationConfig,
    pub schedule: TemperatureSchedule,
    /// Validate every this many outer iterations (0 disables validation).
    pub val_every: usize,
    pub val_episodes: usize,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            iterations: 3000,
            n_way: 5,
            k_shot: 5,
            q_query: 15,
            hidden: 64,
            embed_dim: 64,
            per_concept_dim: 16,
            concepts: 10,
            dropout: 0.2,
            batch_norm: true,
            adaptation: AdaptationConfig::default(),
            schedule: TemperatureSchedule::new(1.0, 0.1, 3000),
            val_every: 100,
            val_episodes: 120,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.adaptation.validate()?;
        if self.n_way < 2 || self.k_shot < 1 || self.q_query < 1 {
            return Err(ConfigError::Invalid(format!(
                "episode shape N={}, K={}, Q={} (need N≥2, K≥1, Q≥1)",
                self.n_way, self.k_shot, self.q_query
            )));
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.per_concept_dim == 0 || self.concepts == 0 {
            return Err(ConfigError::Invalid("model dims must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if !(self.schedule.lambda0 >= self.schedule.lambda_min && self.schedule.lambda_min > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "temperature schedule needs λ0 ≥ λ_min > 0, got {} and {}",
                self.schedule.lambda0, self.schedule.lambda_min
            )));
        }
        Ok(())
    }

    pub fn dims(&self, family: &SyntheticFamily) -> ModelDims {
        ModelDims {
            input_dim: family.dim(),
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            per_concept_dim: self.per_concept_dim,
            concepts: self.concepts,
            n_way: self.n_way,
            dropout: self.dropout,
            batch_norm: self.batch_norm,
            patch_dim: BLOCK_DIM,
            n_patches: family.dim() / BLOCK_DIM,
        }
    }
}

// ── results ─────────────────────────────────────────────────────────────────

/// Per-episode scalar outcome. `query_loss` always decomposes as
/// `cross_entropy − entropy_coefficient·entropy_value + vq_value`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub query_loss: f64,
    pub query_accuracy: f64,
    pub cross_entropy: f64,
    pub entropy_value: f64,
    pub vq_value: f64,
}

/// A learner's differentiable per-task outer loss plus its scalar record.
pub struct EpisodeOutput {
    pub loss: Tensor,
    pub result: TaskResult,
    /// Query-class probabilities, row-major `[query_rows, n_way]`.
    pub probabilities: Vec<f64>,
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub entropy: f64,
    pub lambda: f64,
}

/// Trained parameters with their provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub algorithm: Algorithm,
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub best_iteration: Option<usize>,
    pub best_val_accuracy: Option<f64>,
}

/// `run_meta_training` output: the selected model plus the metric series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub model: TrainedModel,
    pub series: Vec<MetricRecord>,
}

/// Mean per-batch training metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub cross_entropy: f64,
    pub entropy: f64,
    pub vq: f64,
}

// ── generators ──────────────────────────────────────────────────────────────

/// Source of concept assignments during an episode.
pub enum Generator {
    /// Trainable d×c logit table (straight-through sampled).
    Static(AssignmentProbabilities),
    /// Trainable nearest-centroid codebook over patches.
    Vq(Codebook),
    /// Fixed assignment — parity-testing harness, no parameters.
    FrozenOracle { labels: Vec<usize>, concepts: usize },
}

impl Generator {
    pub fn concepts(&self) -> usize {
        match self {
            Generator::Static(p) => p.concepts(),
            Generator::Vq(cb) => cb.concepts(),
            Generator::FrozenOracle { concepts, .. } => *concepts,
        }
    }
}

// ── initialization ──────────────────────────────────────────────────────────

/// Builds (θ, φ) for an algorithm. Encoder k draws from stream
/// `(seed, ["init","encoder"], [k])`, so reduced configurations (one-concept
/// composite vs. single-encoder baseline) initialize identically.
pub fn init_model(algorithm: Algorithm, dims: &ModelDims, seed: u64) -> (ParamSet, ParamSet) {
    let mut theta = ParamSet::new();
    let mut phi = ParamSet::new();
    let enc_stream = |k: u64| rng::stream(seed, &["init", "encoder"], &[k]);
    match algorithm {
        Algorithm::ProtoNet | Algorithm::ProtoMaml => {
            push_encoder_params(
                &mut theta,
                "enc",
                EncoderShape { in_dim: dims.input_dim, hidden: dims.hidden, out_dim: dims.embed_dim },
                dims.batch_norm,
                &mut enc_stream(0),
            );
        }
        Algorithm::Maml => {
            push_encoder_params(
                &mut theta,
                "enc",
                EncoderShape { in_dim: dims.input_dim, hidden: dims.hidden, out_dim: dims.embed_dim },
                dims.batch_norm,
                &mut enc_stream(0),
            );
            // Episode class slots are arbitrary permutations, so any fixed
            // nonzero head is spurious asymmetry the outer loop would have to
            // unlearn. Zero is the permutation-symmetric start; one support
            // step from it already yields a prototype-like classifier.
            theta.push(
                "head.w",
                vec![dims.n_way, dims.embed_dim],
                vec![0.0; dims.n_way * dims.embed_dim],
            );
            theta.push("head.b", vec![dims.n_way], vec![0.0; dims.n_way]);
        }
        Algorithm::Comet | Algorithm::ComamlStatic => {
            for j in 0..dims.concepts {
                push_encoder_params(
                    &mut theta,
                    &format!("enc{j}"),
                    EncoderShape { in_dim: dims.input_dim, hidden: dims.hidden, out_dim: dims.per_concept_dim },
                    dims.batch_norm,
                    &mut enc_stream(j as u64),
                );
            }
            if algorithm == Algorithm::ComamlStatic {
                phi.push(
                    "assign.logits",
                    vec![dims.input_dim, dims.concepts],
                    vec![0.0; dims.input_dim * dims.concepts],
                );
            }
        }
        Algorithm::ComamlVq => {
            push_encoder_params(
                &mut theta,
                "patch",
                EncoderShape { in_dim: dims.patch_dim, hidden: dims.hidden, out_dim: dims.per_concept_dim },
                dims.batch_norm,
                &mut enc_stream(0),
            );
            phi.push(
                "codebook.centroids",
                vec![dims.concepts, dims.patch_dim],
                init_codebook_values(
                    dims.concepts,
                    dims.patch_dim,
                    &mut rng::stream(seed, &["init", "codebook"], &[]),
                ),
            );
        }
    }
    (theta, phi)
}

fn generator_view(algorithm: Algorithm, phi_leaves: &[Tensor], phi: &ParamSet) -> Option<Generator> {
    match algorithm {
        Algorithm::ComamlStatic => {
            let idx = phi.index_of("assign.logits").expect("static generator parameters");
            Some(Generator::Static(AssignmentProbabilities::from_logits(
                phi_leaves[idx].clone(),
            )))
        }
        Algorithm::ComamlVq => {
            let idx = phi.index_of("codebook.centroids").expect("codebook parameters");
            Some(Generator::Vq(Codebook::from_centroids(
                phi_leaves[idx].clone(),
                VQ_COMMITMENT,
            )))
        }
        _ => None,
    }
}

fn bank_view(params: &[Tensor], set: &ParamSet, dims: &ModelDims) -> ConceptEncoderBank {
    ConceptEncoderBank::per_concept(
        (0..dims.concepts)
            .map(|j| Encoder::view(params, set, &format!("enc{j}"), dims.batch_norm, dims.dropout))
            .collect(),
    )
}

// ── episode data ────────────────────────────────────────────────────────────

/// An episode plus, for the patch pipeline, per-instance permuted patch views.
pub struct TaskData {
    pub episode: Episode,
    pub support_patches: Option<Vec<PatchView>>,
    pub query_patches: Option<Vec<PatchView>>,
}

/// Samples one episode (and patch views when `with_patches`) from the given
/// streams. Support views are drawn before query views.
pub fn prepare_task(
    family: &SyntheticFamily,
    split: Split,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    with_patches: bool,
    episode_rng: &mut ChaCha8Rng,
    patch_rng: &mut ChaCha8Rng,
) -> Result<TaskData, ConfigError> {
    let episode = sample_episode(family, split, n_way, k_shot, q_query, episode_rng)?;
    let (support_patches, query_patches) = if with_patches {
        let sup = (0..episode.support_rows())
            .map(|i| permuted_patch_view(episode.support_row(i), family, patch_rng))
            .collect();
        let qry = (0..episode.query_rows())
            .map(|i| permuted_patch_view(episode.query_row(i), family, patch_rng))
            .collect();
        (Some(sup), Some(qry))
    } else {
        (None, None)
    };
    Ok(TaskData { episode, support_patches, query_patches })
}

/// Support rows stacked above query rows in one design matrix. Every encoder
/// forward inside an episode runs on this combined batch, so batch
/// normalization always sees within-episode statistics — the same statistics
/// during prototype construction, inner adaptation, and query scoring. The
/// caller slices out the rows it needs afterwards.
fn episode_tensor(e: &Episode) -> Tensor {
    let rows = e.support_rows() + e.query_rows();
    let mut data = Vec::with_capacity(rows * e.dim);
    data.extend_from_slice(&e.support_x);
    data.extend_from_slice(&e.query_x);
    Tensor::constant(data, &[rows, e.dim])
}

/// Flattens patch views to per-patch rows (instance-major) and the matching
/// `[rows·n, p]` tensor.
fn flat_patches(views: &[PatchView]) -> (Vec<Vec<f64>>, Tensor) {
    let rows: Vec<Vec<f64>> = views.iter().flat_map(|v| v.patches.iter().cloned()).collect();
    let p = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let t = Tensor::constant(flat, &[rows.len(), p]);
    (rows, t)
}

fn fwd(enc: &Encoder, x: &Tensor, train: bool, rng: &mut ChaCha8Rng) -> Tensor {
    if train {
        enc.forward(x, &mut ForwardMode::Train { rng })
    } else {
        enc.forward(x, &mut ForwardMode::Eval)
    }
}

fn embed_masked(
    x: &Tensor,
    assignment: &ConceptAssignment,
    bank: &ConceptEncoderBank,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    if train {
        concept_embed_masked(x, assignment, bank, &mut ForwardMode::Train { rng })
    } else {
        concept_embed_masked(x, assignment, bank, &mut ForwardMode::Eval)
    }
}

#[allow(clippy::too_many_arguments)]
fn embed_patches(
    patches: &Tensor,
    assigned: &[usize],
    batch: usize,
    n_patches: usize,
    encoder: &Encoder,
    concepts: usize,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    if train {
        concept_embed_patches(
            patches,
            assigned,
            batch,
            n_patches,
            encoder,
            concepts,
            &mut ForwardMode::Train { rng },
        )
    } else {
        concept_embed_patches(
            patches,
            assigned,
            batch,
            n_patches,
            encoder,
            concepts,
            &mut ForwardMode::Eval,
        )
    }
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let pred = argmax_rows(logits.data(), classes);
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

// ── adaptation engine ───────────────────────────────────────────────────────

/// Runs `steps` in-graph SGD steps. Each step differentiates `loss_fn`'s
/// output at the *current* parameter tensors (treating them as independent
/// variables via graph cuts) and applies `p' = p − α·g`. Returns the adapted
/// tensors and the pre-step support losses.
pub fn adapt_loop(
    start: Vec<Tensor>,
    steps: usize,
    lr: f64,
    second_order: bool,
    mut loss_fn: impl FnMut(&[Tensor]) -> Tensor,
) -> (Vec<Tensor>, Vec<f64>) {
    let mut cur = start;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let loss = loss_fn(&cur);
        trace.push(loss.item());
        let cuts: Vec<&Tensor> = cur.iter().collect();
        let grads = backward_with_cuts(&loss, &cuts);
        let step_grads: Vec<Option<Tensor>> = cur.iter().map(|p| grads.get(p).cloned()).collect();
        cur = sgd_step(&cur, &step_grads, lr, second_order);
    }
    (cur, trace)
}

// ── episode learners ────────────────────────────────────────────────────────

/// Prototype metric classifier: logits are negated squared distances to
/// class-mean prototypes; no adaptation.
pub fn protonet_episode(
    episode: &Episode,
    encoder: &Encoder,
    train: bool,
    dropout_rng: &mut ChaCha8Rng,
) -> EpisodeOutput {
    let x = episode_tensor(episode);
    let (s, q) = (episode.support_rows(), episode.query_rows());
    let z = fwd(encoder, &x, train, dropout_rng);
    let protos = class_prototypes(&z.narrow(0, 0, s), &episode.support_y, episode.n_way);
    let logits = z.narrow(0, s, q).sq_euclidean(&protos).neg();
    let ce = softmax_cross_entropy(&logits, &episode.query_y);
    let ce_val = ce.item();
    EpisodeOutput {
        result: TaskResult {
            query_loss: ce_val,
            query_accuracy: accuracy_of(&logits, &episode.query_y),
            cross_entropy: ce_val,
            entropy_value: 0.0,
            vq_value: 0.0,
        },
        probabilities: logits.softmax_last().to_vec(),
        loss: ce,
    }
}

/// Gradient-based adaptation of encoder plus meta-learned linear head.
pub fn maml_episode(
    episode: &Episode,
    theta: &ParamSet,
    theta_leaves: &[Tensor],
    dims: &ModelDims,
    cfg: &AdaptationConfig,
    train: bool,
    dropout_rng: &mut ChaCha8Rng,
) -> EpisodeOutput {
    assert_eq!(episode.n_way, dims.n_way, "episode width vs meta-learned head");
    let x = episode_tensor(episode);
    let (s, q) = (episode.support_rows(), episode.query_rows());
    let iw = theta.index_of("head.w").expect("maml head parameters");
    let ib = theta.index_of("head.b").expect("maml head parameters");
    let (adapted, _trace) = adapt_loop(
        theta_leaves.to_vec(),
        cfg.inner_steps,
        cfg.inner_lr,
        cfg.second_order,
        |cur| {
            let enc = Encoder::view(cur, theta, "enc", dims.batch_norm, dims.dropout);
            let head = Head { w: cur[iw].clone(), b: cur[ib].clone() };
            let zs = fwd(&enc, &x, train, dropout_rng).narrow(0, 0, s);
            softmax_cross_entropy(&classify(&zs, &head), &episode.support_y)
        },
    );
    let enc = Encoder::view(&adapted, theta, "enc", dims.batch_norm, dims.dropout);
    let head = Head { w: adapted[iw].clone(), b: adapted[ib].clone() };
    let zq = fwd(&enc, &x, train, dropout_rng).narrow(0, s, q);
    let logits = classify(&zq, &head);
    let ce = softmax_cross_entropy(&logits, &episode.query_y);
    let ce_val = ce.item();
    EpisodeOutput {
        result: TaskResult {
            query_loss: ce_val,
            query_accuracy: accuracy_of(&logits, &episode.query_y),
            cross_entropy: ce_val,
            entropy_value: 0.0,
            vq_value: 0.0,
        },
        probabilities: logits.softmax_last().to_vec(),
        loss: ce,
    }
}

/// MAML whose head starts at the prototype-induced classifier. The head
/// initialization remains a differentiable function of the encoder, so outer
/// gradients shape the prototypes even in first-order mode.
pub fn protomaml_episode(
    episode: &Episode,
    theta: &ParamSet,
    theta_leaves: &[Tensor],
    dims: &ModelDims,
    cfg: &AdaptationConfig,
    train: bool,
    dropout_rng: &mut ChaCha8Rng,
) -> EpisodeOutput {
    let x = episode_tensor(episode);
    let (s, q) = (episode.support_rows(), episode.query_rows());
    let enc0 = Encoder::view(theta_leaves, theta, "enc", dims.batch_norm, dims.dropout);
    let zs0 = fwd(&enc0, &x, train, dropout_rng).narrow(0, 0, s);
    let protos = class_prototypes(&zs0, &episode.support_y, episode.n_way);
    let head0 = prototype_head(&protos);

    let n_theta = theta_leaves.len();
    let mut start = theta_leaves.to_vec();
    start.push(head0.w);
    start.push(head0.b);
    let (adapted, _trace) = adapt_loop(
        start,
        cfg.inner_steps,
        cfg.inner_lr,
        cfg.second_order,
        |cur| {
            let enc = Encoder::view(cur, theta, "enc", dims.batch_norm, dims.dropout);
            let head = Head { w: cur[n_theta].clone(), b: cur[n_theta + 1].clone() };
            let zs = fwd(&enc, &x, train, dropout_rng).narrow(0, 0, s);
            softmax_cross_entropy(&classify(&zs, &head), &episode.support_y)
        },
    );
    let enc = Encoder::view(&adapted, theta, "enc", dims.batch_norm, dims.dropout);
    let head = Head { w: adapted[n_theta].clone(), b: adapted[n_theta + 1].clone() };
    let zq = fwd(&enc, &x, train, dropout_rng).narrow(0, s, q);
    let logits = classify(&zq, &head);
    let ce = softmax_cross_entropy(&logits, &episode.query_y);
    let ce_val = ce.item();
    EpisodeOutput {
        result: TaskResult {
            query_loss: ce_val,
            query_accuracy: accuracy_of(&logits, &episode.query_y),
            cross_entropy: ce_val,
            entropy_value: 0.0,
            vq_value: 0.0,
        },
        probabilities: logits.softmax_last().to_vec(),
        loss: ce,
    }
}

/// Metric classifier over concatenated per-concept prototypes with a fixed
/// oracle assignment; the composite squared distance is exactly the sum of
/// per-concept distances.
pub fn comet_episode(
    episode: &Episode,
    bank: &ConceptEncoderBank,
    oracle: &ConceptAssignment,
    train: bool,
    dropout_rng: &mut ChaCha8Rng,
) -> EpisodeOutput {
    let x = episode_tensor(episode);
    let (s, q) = (episode.support_rows(), episode.query_rows());
    let z = embed_masked(&x, oracle, bank, train, dropout_rng);
    let protos = class_prototypes(&z.narrow(0, 0, s), &episode.support_y, episode.n_way);
    let logits = z.narrow(0, s, q).sq_euclidean(&protos).neg();
    let ce = softmax_cross_entropy(&logits, &episode.query_y);
    let ce_val = ce.item();
    EpisodeOutput {
        result: TaskResult {
            query_loss: ce_val,
            query_accuracy: accuracy_of(&logits, &episode.query_y),
            cross_entropy: ce_val,
            entropy_value: 0.0,
            vq_value: 0.0,
        },
        probabilities: logits.softmax_last().to_vec(),
        loss: ce,
    }
}

/// Adapted inner state of a composite-embedding episode.
pub struct InnerResult {
    /// Adapted θ tensors, aligned with the θ parameter order.
    pub adapted_theta: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// Pre-step support losses, one per inner step.
    pub support_trace: Vec<f64>,
    /// The support assignment (over feature dims, or patches in VQ mode).
    pub support_assignment: ConceptAssignment,
    /// Support quantization loss value at step 0 (VQ mode; 0 otherwise).
    pub support_vq: f64,
}

/// Support phase of the composite learner: draw the support assignment once,
/// build concept prototypes and the induced head, then adapt (θ, W, b) for V
/// steps on the support loss. φ is not adapted.
#[allow(clippy::too_many_arguments)]
pub fn comaml_inner(
    task: &TaskData,
    theta: &ParamSet,
    theta_leaves: &[Tensor],
    generator: &Generator,
    dims: &ModelDims,
    cfg: &AdaptationConfig,
    lambda: f64,
    train: bool,
    assign_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> InnerResult {
    let episode = &task.episode;
    let x = episode_tensor(episode);
    let s_rows = episode.support_rows();
    let all_rows = s_rows + episode.query_rows();
    let concepts = generator.concepts();
    assert_eq!(concepts, dims.concepts, "generator/model concept count");

    // Per-pipeline support assignment plus an embedding closure over the
    // combined episode batch; the support slice feeds the prototypes and the
    // inner loss.
    enum Pipeline {
        Masked(ConceptAssignment),
        Patch {
            all_tensor: Tensor,
            all_assigned: Vec<usize>,
            support_tensor: Tensor,
            support_assigned: Vec<usize>,
        },
    }
    let pipeline = match generator {
        Generator::Static(probs) => {
            let mode = if train { AssignmentMode::Sample } else { AssignmentMode::Argmax };
            Pipeline::Masked(sample_static_assignment(probs, lambda, assign_rng, mode))
        }
        Generator::FrozenOracle { labels, concepts } => {
            Pipeline::Masked(ConceptAssignment::from_labels(labels, *concepts))
        }
        Generator::Vq(codebook) => {
            let (s_rows_flat, s_tensor) = flat_patches(
                task.support_patches
                    .as_ref()
                    .expect("patch pipeline requires support patch views"),
            );
            let (q_rows_flat, _) = flat_patches(
                task.query_patches
                    .as_ref()
                    .expect("patch pipeline requires query patch views"),
            );
            let (s_assigned, _) = vq_assign(&s_rows_flat, codebook);
            let (q_assigned, _) = vq_assign(&q_rows_flat, codebook);
            let p = s_rows_flat[0].len();
            let all: Vec<f64> = s_rows_flat
                .iter()
                .chain(q_rows_flat.iter())
                .flatten()
                .copied()
                .collect();
            let n_all = s_rows_flat.len() + q_rows_flat.len();
            let mut all_assigned = s_assigned.clone();
            all_assigned.extend_from_slice(&q_assigned);
            Pipeline::Patch {
                all_tensor: Tensor::constant(all, &[n_all, p]),
                all_assigned,
                support_tensor: s_tensor,
                support_assigned: s_assigned,
            }
        }
    };

    let embed_all = |params: &[Tensor], rng: &mut ChaCha8Rng| -> Tensor {
        match &pipeline {
            Pipeline::Masked(assignment) => {
                let bank = bank_view(params, theta, dims);
                embed_masked(&x, assignment, &bank, train, rng)
            }
            Pipeline::Patch { all_tensor, all_assigned, .. } => {
                let enc = Encoder::view(params, theta, "patch", dims.batch_norm, dims.dropout);
                embed_patches(
                    all_tensor, all_assigned, all_rows, dims.n_patches, &enc, concepts, train, rng,
                )
            }
        }
    };

    let support_vq_term = |codebook: &Codebook| -> Option<Tensor> {
        match &pipeline {
            Pipeline::Patch { support_tensor, support_assigned, .. } => {
                Some(vq_loss(support_tensor, codebook, support_assigned))
            }
            Pipeline::Masked(_) => None,
        }
    };

    let zs0 = embed_all(theta_leaves, dropout_rng).narrow(0, 0, s_rows);
    let protos = class_prototypes(&zs0, &episode.support_y, episode.n_way);
    let head0 = prototype_head(&protos);

    let n_theta = theta_leaves.len();
    let mut start = theta_leaves.to_vec();
    start.push(head0.w);
    start.push(head0.b);

    let mut support_vq = 0.0;
    if let Generator::Vq(codebook) = generator {
        if let Some(term) = support_vq_term(codebook) {
            support_vq = term.item();
        }
    }

    let (adapted, trace) = adapt_loop(
        start,
        cfg.inner_steps,
        cfg.inner_lr,
        cfg.second_order,
        |cur| {
            let zs = embed_all(&cur[..n_theta], dropout_rng).narrow(0, 0, s_rows);
            let head = Head { w: cur[n_theta].clone(), b: cur[n_theta + 1].clone() };
            let logits = classify(&zs, &head);
            let mut loss = softmax_cross_entropy(&logits, &episode.support_y);
            // quantization terms enter the inner objective too (they are
            // constant in (θ, W, b), so they shift the trace, not the steps)
            if let Generator::Vq(codebook) = generator {
                if let Some(term) = support_vq_term(codebook) {
                    loss = loss.add(&term);
                }
            }
            loss
        },
    );

    let support_assignment = match pipeline {
        Pipeline::Masked(assignment) => assignment,
        Pipeline::Patch { support_assigned, .. } => {
            ConceptAssignment::from_labels(&support_assigned, concepts)
        }
    };

    InnerResult {
        adapted_theta: adapted[..n_theta].to_vec(),
        head_w: adapted[n_theta].clone(),
        head_b: adapted[n_theta + 1].clone(),
        support_trace: trace,
        support_assignment,
        support_vq,
    }
}

/// Full composite episode: inner adaptation, a fresh query assignment, then
/// the outer objective `cross-entropy − γ·entropy (+ quantization terms)`.
#[allow(clippy::too_many_arguments)]
pub fn comaml_episode(
    task: &TaskData,
    theta: &ParamSet,
    theta_leaves: &[Tensor],
    generator: &Generator,
    dims: &ModelDims,
    cfg: &AdaptationConfig,
    lambda: f64,
    train: bool,
    assign_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> EpisodeOutput {
    let episode = &task.episode;
    let inner = comaml_inner(
        task, theta, theta_leaves, generator, dims, cfg, lambda, train, assign_rng, dropout_rng,
    );
    let x = episode_tensor(episode);
    let s_rows = episode.support_rows();
    let q_rows = episode.query_rows();
    let head = Head { w: inner.head_w.clone(), b: inner.head_b.clone() };

    // Query phase: regenerate assignments after adaptation. The encoder still
    // runs on the combined episode batch (query scoring sees the same
    // normalization statistics the inner loop saw); only the query slice is
    // classified.
    let (zq, entropy, vq_term) = match generator {
        Generator::Static(probs) => {
            let mode = if train { AssignmentMode::Sample } else { AssignmentMode::Argmax };
            let assignment = sample_static_assignment(probs, lambda, assign_rng, mode);
            let bank = bank_view(&inner.adapted_theta, theta, dims);
            let z = embed_masked(&x, &assignment, &bank, train, dropout_rng);
            (z.narrow(0, s_rows, q_rows), Some(static_entropy(probs)), None)
        }
        Generator::FrozenOracle { labels, concepts } => {
            let assignment = ConceptAssignment::from_labels(labels, *concepts);
            let bank = bank_view(&inner.adapted_theta, theta, dims);
            let z = embed_masked(&x, &assignment, &bank, train, dropout_rng);
            (z.narrow(0, s_rows, q_rows), None, None)
        }
        Generator::Vq(codebook) => {
            let (s_rows_flat, _) = flat_patches(
                task.support_patches
                    .as_ref()
                    .expect("patch pipeline requires support patch views"),
            );
            let (q_rows_flat, q_tensor) = flat_patches(
                task.query_patches
                    .as_ref()
                    .expect("patch pipeline requires query patch views"),
            );
            let (s_assigned, _) = vq_assign(&s_rows_flat, codebook);
            let (q_assigned, _) = vq_assign(&q_rows_flat, codebook);
            let p = s_rows_flat[0].len();
            let all: Vec<f64> = s_rows_flat
                .iter()
                .chain(q_rows_flat.iter())
                .flatten()
                .copied()
                .collect();
            let n_all = s_rows_flat.len() + q_rows_flat.len();
            let all_tensor = Tensor::constant(all, &[n_all, p]);
            let mut all_assigned = s_assigned;
            all_assigned.extend_from_slice(&q_assigned);
            let enc = Encoder::view(&inner.adapted_theta, theta, "patch", dims.batch_norm, dims.dropout);
            let z = embed_patches(
                &all_tensor,
                &all_assigned,
                s_rows + q_rows,
                dims.n_patches,
                &enc,
                generator.concepts(),
                train,
                dropout_rng,
            );
            // Outer quantization terms are computed on the query patches: they
            // are the fresh data the adapted model is judged on.
            let entropy = vq_surrogate_entropy(&q_tensor, codebook);
            let vq = vq_loss(&q_tensor, codebook, &q_assigned);
            (z.narrow(0, s_rows, q_rows), Some(entropy), Some(vq))
        }
    };

    let logits = classify(&zq, &head);
    let ce = softmax_cross_entropy(&logits, &episode.query_y);
    let ce_val = ce.item();
    let mut loss = ce;
    let mut entropy_value = 0.0;
    if let Some(h) = entropy {
        entropy_value = h.item();
        loss = loss.sub(&h.scale(cfg.entropy_coefficient));
    }
    let mut vq_value = 0.0;
    if let Some(v) = vq_term {
        vq_value = v.item();
        loss = loss.add(&v);
    }
    let loss_val = loss.item();
    debug_assert!(
        (loss_val - (ce_val - cfg.entropy_coefficient * entropy_value + vq_value)).abs() <= 1e-12,
        "outer loss must decompose into its logged components"
    );
    EpisodeOutput {
        result: TaskResult {
            query_loss: loss_val,
            query_accuracy: accuracy_of(&logits, &episode.query_y),
            cross_entropy: ce_val,
            entropy_value,
            vq_value,
        },
        probabilities: logits.softmax_last().to_vec(),
        loss,
    }
}

/// Dispatches one episode through the learner for `algorithm`.
#[allow(clippy::too_many_arguments)]
pub fn episode_output(
    algorithm: Algorithm,
    task: &TaskData,
    theta: &ParamSet,
    theta_leaves: &[Tensor],
    phi: &ParamSet,
    phi_leaves: &[Tensor],
    dims: &ModelDims,
    cfg: &AdaptationConfig,
    oracle_labels: &[usize],
    lambda: f64,
    train: bool,
    assign_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> EpisodeOutput {
    match algorithm {
        Algorithm::ProtoNet => {
            let enc = Encoder::view(theta_leaves, theta, "enc", dims.batch_norm, dims.dropout);
            protonet_episode(&task.episode, &enc, train, dropout_rng)
        }
        Algorithm::Maml => {
            maml_episode(&task.episode, theta, theta_leaves, dims, cfg, train, dropout_rng)
        }
        Algorithm::ProtoMaml => {
            protomaml_episode(&task.episode, theta, theta_leaves, dims, cfg, train, dropout_rng)
        }
        Algorithm::Comet => {
            let bank = bank_view(theta_leaves, theta, dims);
            let oracle = ConceptAssignment::from_labels(oracle_labels, dims.concepts);
            comet_episode(&task.episode, &bank, &oracle, train, dropout_rng)
        }
        Algorithm::ComamlStatic | Algorithm::ComamlVq => {
            let generator =
                generator_view(algorithm, phi_leaves, phi).expect("composite learner generator");
            comaml_episode(
                task, theta, theta_leaves, &generator, dims, cfg, lambda, train, assign_rng,
                dropout_rng,
            )
        }
    }
}

// ── outer loop ──────────────────────────────────────────────────────────────

fn collect_raw_grads(leaves: &[Tensor], grads: &crate::tensor::Gradients) -> Vec<Option<Vec<f64>>> {
    leaves.iter().map(|l| grads.get(l).map(|g| g.to_vec())).collect()
}

fn accumulate(acc: &mut [Vec<f64>], task_grads: &[Option<Vec<f64>>]) {
    for (slot, grad) in acc.iter_mut().zip(task_grads) {
        if let Some(grad) = grad {
            for (a, g) in slot.iter_mut().zip(grad) {
                *a += g;
            }
        }
    }
}

fn apply_adam(set: &mut ParamSet, adam: &mut Adam, acc: &[Vec<f64>]) {
    if set.is_empty() {
        return;
    }
    let grads: Vec<&[f64]> = acc.iter().map(|v| v.as_slice()).collect();
    let mut views = set.views_mut();
    adam.step(&mut views, &grads);
}

/// One outer iteration: sample `tasks_per_batch` training tasks, run each
/// episode (in parallel, each on its own graph), average ∂L/∂θ and ∂L/∂φ in
/// task-index order, and take one Adam step per parameter group.
#[allow(clippy::too_many_arguments)]
pub fn comaml_outer_step(
    algorithm: Algorithm,
    family: &SyntheticFamily,
    theta: &mut ParamSet,
    phi: &mut ParamSet,
    settings: &TrainSettings,
    lambda: f64,
    u: usize,
    seed: u64,
    adam_theta: &mut Adam,
    adam_phi: &mut Adam,
) -> Result<BatchMetrics, CoreError> {
    let dims = settings.dims(family);
    let cfg = &settings.adaptation;
    let oracle = family.ground_truth_assignment();
    let with_patches = algorithm.uses_patches();

    let outputs: Result<Vec<_>, ConfigError> = (0..cfg.tasks_per_batch)
        .into_par_iter()
        .map(|t| {
            let ti = t as u64;
            let ui = u as u64;
            let task = prepare_task(
                family,
                Split::Train,
                settings.n_way,
                settings.k_shot,
                settings.q_query,
                with_patches,
                &mut rng::stream(seed, &["episode", Split::Train.tag()], &[ui, ti]),
                &mut rng::stream(seed, &["patchperm", Split::Train.tag()], &[ui, ti]),
            )?;
            let theta_leaves = theta.leaves();
            let phi_leaves = phi.leaves();
            let out = episode_output(
                algorithm,
                &task,
                theta,
                &theta_leaves,
                phi,
                &phi_leaves,
                &dims,
                cfg,
                &oracle,
                lambda,
                true,
                &mut rng::stream(seed, &["assign"], &[ui, ti]),
                &mut rng::stream(seed, &["dropout"], &[ui, ti]),
            );
            let grads = backward(&out.loss);
            Ok((
                out.result,
                collect_raw_grads(&theta_leaves, &grads),
                collect_raw_grads(&phi_leaves, &grads),
            ))
        })
        .collect();
    let outputs = outputs?;

    let batch = outputs.len() as f64;
    let mut metrics = BatchMetrics::default();
    let mut acc_theta: Vec<Vec<f64>> = theta.sizes().iter().map(|&s| vec![0.0; s]).collect();
    let mut acc_phi: Vec<Vec<f64>> = phi.sizes().iter().map(|&s| vec![0.0; s]).collect();
    for (result, tg, pg) in &outputs {
        metrics.loss += result.query_loss / batch;
        metrics.accuracy += result.query_accuracy / batch;
        metrics.cross_entropy += result.cross_entropy / batch;
        metrics.entropy += result.entropy_value / batch;
        metrics.vq += result.vq_value / batch;
        accumulate(&mut acc_theta, tg);
        accumulate(&mut acc_phi, pg);
    }
    if !metrics.loss.is_finite() {
        return Err(CoreError::Diverged { iteration: u, what: "outer batch loss".into() });
    }
    for slot in acc_theta.iter_mut().chain(acc_phi.iter_mut()) {
        for g in slot.iter_mut() {
            *g /= batch;
        }
    }
    apply_adam(theta, adam_theta, &acc_theta);
    apply_adam(phi, adam_phi, &acc_phi);
    Ok(metrics)
}

/// Evaluates fixed parameters on `episodes` seeded episodes of `split`.
/// The episode stream depends only on (seed, split, index), so every
/// algorithm sees the identical sequence. Deterministic: assignments use
/// argmax, no dropout.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    algorithm: Algorithm,
    family: &SyntheticFamily,
    theta: &ParamSet,
    phi: &ParamSet,
    settings: &TrainSettings,
    split: Split,
    episodes: usize,
    seed: u64,
) -> Result<Vec<TaskResult>, CoreError> {
    let dims = settings.dims(family);
    let cfg = &settings.adaptation;
    let oracle = family.ground_truth_assignment();
    let with_patches = algorithm.uses_patches();
    let results: Result<Vec<TaskResult>, ConfigError> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let ii = i as u64;
            let task = prepare_task(
                family,
                split,
                settings.n_way,
                settings.k_shot,
                settings.q_query,
                with_patches,
                &mut rng::stream(seed, &["episode", split.tag()], &[ii]),
                &mut rng::stream(seed, &["patchperm", split.tag()], &[ii]),
            )?;
            let theta_leaves = theta.leaves();
            let phi_leaves = phi.leaves();
            let out = episode_output(
                algorithm,
                &task,
                theta,
                &theta_leaves,
                phi,
                &phi_leaves,
                &dims,
                cfg,
                &oracle,
                settings.schedule.lambda_min,
                false,
                &mut rng::stream(seed, &["assign", split.tag()], &[ii]),
                &mut rng::stream(seed, &["dropout", split.tag()], &[ii]),
            );
            Ok(out.result)
        })
        .collect();
    Ok(results?)
}

/// Meta-trains from a fresh initialization: U outer iterations with annealed
/// temperature, periodic validation, and best-on-validation selection.
/// U = 0 returns the untouched initialization with an empty series.
pub fn run_meta_training(
    algorithm: Algorithm,
    family: &SyntheticFamily,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainingRun, CoreError> {
    settings.validate()?;
    let dims = settings.dims(family);
    let (mut theta, mut phi) = init_model(algorithm, &dims, seed);
    let mut adam_theta = Adam::new(settings.adaptation.outer_lr, &theta.sizes());
    let mut adam_phi = Adam::new(settings.adaptation.outer_lr, &phi.sizes());
    let mut series = Vec::new();
    let mut best: Option<(f64, usize, ParamSet, ParamSet)> = None;

    for u in 0..settings.iterations {
        let lambda = settings.schedule.lambda(u);
        let metrics = comaml_outer_step(
            algorithm, family, &mut theta, &mut phi, settings, lambda, u, seed, &mut adam_theta,
            &mut adam_phi,
        )?;
        series.push(MetricRecord {
            iteration: u,
            split: "train".into(),
            loss: metrics.loss,
            accuracy: metrics.accuracy,
            entropy: metrics.entropy,
            lambda,
        });

        let last = u + 1 == settings.iterations;
        if settings.val_every > 0 && ((u + 1) % settings.val_every == 0 || last) {
            let results = evaluate_model(
                algorithm,
                family,
                &theta,
                &phi,
                settings,
                Split::Val,
                settings.val_episodes,
                seed,
            )?;
            let n = results.len() as f64;
            let acc: f64 = results.iter().map(|r| r.query_accuracy).sum::<f64>() / n;
            let loss: f64 = results.iter().map(|r| r.query_loss).sum::<f64>() / n;
            let entropy: f64 = results.iter().map(|r| r.entropy_value).sum::<f64>() / n;
            series.push(MetricRecord {
                iteration: u,
                split: "val".into(),
                loss,
                accuracy: acc,
                entropy,
                lambda,
            });
            let better = match &best {
                None => true,
                Some((best_acc, ..)) => acc > *best_acc,
            };
            if better {
                best = Some((acc, u, theta.clone(), phi.clone()));
            }
        }
    }

    let (best_iteration, best_val_accuracy, theta, phi) = match best {
        Some((acc, u, t, p)) => (Some(u), Some(acc), t, p),
        None => (None, None, theta, phi),
    };
    Ok(TrainingRun {
        model: TrainedModel { algorithm, theta, phi, best_iteration, best_val_accuracy },
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_family, FamilyConfig};

    fn tiny_family() -> SyntheticFamily {
        generate_family(&FamilyConfig {
            n_concepts: 2,
            n_classes: 12,
            train_classes: 6,
            val_classes: 3,
            test_classes: 3,
            noise_std: (0.2f64).sqrt(),
            seed: 77,
        })
        .unwrap()
    }

    fn tiny_settings() -> TrainSettings {
        TrainSettings {
            iterations: 3,
            n_way: 2,
            k_shot: 2,
            q_query: 3,
            hidden: 8,
            embed_dim: 4,
            per_concept_dim: 4,
            concepts: 2,
            dropout: 0.2,
            batch_norm: true,
            adaptation: AdaptationConfig { tasks_per_batch: 2, ..AdaptationConfig::default() },
            schedule: TemperatureSchedule::new(1.0, 0.1, 3),
            val_every: 2,
            val_episodes: 4,
        }
    }

    fn hand_episode(support: Vec<f64>, support_y: Vec<usize>, query: Vec<f64>, query_y: Vec<usize>, dim: usize) -> Episode {
        let n_way = support_y.iter().max().unwrap() + 1;
        let k_shot = support_y.len() / n_way;
        let query_per_class = query_y.len() / n_way;
        Episode {
            n_way,
            k_shot,
            query_per_class,
            dim,
            class_ids: (0..n_way).collect(),
            support_x: support,
            support_y,
            query_x: query,
            query_y,
        }
    }

    /// Identity-ish encoder on 2 dims (weights I, bn off, dropout 0), so
    /// embeddings equal inputs for non-negative inputs.
    fn identity_encoder() -> Encoder {
        let eye = Tensor::leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let zero = Tensor::leaf(vec![0.0, 0.0], &[2]);
        Encoder::new(eye.clone(), zero.clone(), eye, zero, None, None, 0.0)
    }

    #[test]
    fn algorithm_ids_roundtrip() {
        for a in Algorithm::ALL {
            assert_eq!(Algorithm::from_id(a.id()).unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.id()));
        }
        assert!(Algorithm::from_id("nope").is_err());
    }

    #[test]
    fn adaptation_config_validation() {
        assert!(AdaptationConfig::default().validate().is_ok());
        assert!(AdaptationConfig { inner_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdaptationConfig { inner_lr: 0.0, inner_steps: 0, ..Default::default() }
            .validate()
            .is_ok());
        assert!(AdaptationConfig { outer_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdaptationConfig { tasks_per_batch: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn protonet_dominant_and_symmetric_cases() {
        let enc = identity_encoder();
        let mut r = rng::stream(1, &["d"], &[]);
        // sole support point per class, far apart; query at class 0's point
        let ep = hand_episode(
            vec![10.0, 0.0, 0.0, 10.0],
            vec![0, 1],
            vec![10.0, 0.0, 0.0, 10.0],
            vec![0, 1],
            2,
        );
        let out = protonet_episode(&ep, &enc, false, &mut r);
        assert_eq!(out.result.query_accuracy, 1.0);
        let probs = Tensor::constant(
            {
                let zq = Tensor::constant(ep.query_x.clone(), &[2, 2]);
                let zs = Tensor::constant(ep.support_x.clone(), &[2, 2]);
                zq.sq_euclidean(&zs).neg().softmax_last().to_vec()
            },
            &[2, 2],
        );
        assert!(probs.data()[0] >= 0.99, "dominant prototype wins: {}", probs.data()[0]);

        // equidistant prototypes → exactly 0.5/0.5
        let ep = hand_episode(
            vec![2.0, 0.0, 0.0, 2.0],
            vec![0, 1],
            vec![1.0, 1.0, 1.0, 1.0],
            vec![0, 1],
            2,
        );
        let out = protonet_episode(&ep, &enc, false, &mut r);
        assert!((out.result.cross_entropy - (2.0f64).ln()).abs() < 1e-12, "both classes at ln 2");
    }

    #[test]
    fn protonet_hand_evaluated_two_way_one_shot() {
        let enc = identity_encoder();
        let mut r = rng::stream(2, &["d"], &[]);
        let ep = hand_episode(
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0, 1],
            vec![0.75, 0.5, 0.75, 0.5],
            vec![0, 1],
            2,
        );
        let out = protonet_episode(&ep, &enc, false, &mut r);
        // d0² = 0.0625+0.25, d1² = 0.5625+0.25 → p0 = 1/(1+e^{−0.5})
        let p0 = 1.0 / (1.0 + (-0.5f64).exp());
        let want = -(p0.ln() + (1.0 - p0).ln()) / 2.0;
        assert!((out.result.cross_entropy - want).abs() < 1e-9, "{} vs {want}", out.result.cross_entropy);
    }

    #[test]
    fn adapt_loop_quadratic_hand_derivation_and_order_split() {
        // L(w) = w², V = 1, α = 0.1: w' = w(1 − 2α) = 2.4, L(w') = 5.76
        for (second_order, want_outer) in [(false, 4.8), (true, 3.84)] {
            let w = Tensor::leaf(vec![3.0], &[1]);
            let (adapted, trace) = adapt_loop(vec![w.clone()], 1, 0.1, second_order, |cur| {
                cur[0].square().sum_all()
            });
            assert!((trace[0] - 9.0).abs() < 1e-12);
            assert!((adapted[0].data()[0] - 2.4).abs() < 1e-12);
            let outer = adapted[0].square().sum_all();
            assert!((outer.item() - 5.76).abs() < 1e-12);
            // first-order: dL'/dw = 2w'·1 = 4.8; second-order: 2w'(1−2α) = 3.84
            let g = backward(&outer);
            let got = g.get(&w).unwrap().data()[0];
            assert!((got - want_outer).abs() < 1e-12, "order={second_order}: {got} vs {want_outer}");
        }
    }

    #[test]
    fn maml_v0_and_zero_alpha_match_unadapted() {
        let family = tiny_family();
        let settings = tiny_settings();
        let dims = settings.dims(&family);
        let (theta, _) = init_model(Algorithm::Maml, &dims, 5);
        let task = prepare_task(
            &family, Split::Train, 2, 2, 3, false,
            &mut rng::stream(5, &["episode", "train"], &[0, 0]),
            &mut rng::stream(5, &["patchperm", "train"], &[0, 0]),
        )
        .unwrap();
        let run = |steps: usize, lr: f64| {
            let leaves = theta.leaves();
            let cfg = AdaptationConfig { inner_steps: steps, inner_lr: lr.max(f64::MIN_POSITIVE), ..Default::default() };
            let mut dr = rng::stream(5, &["dropout"], &[0]);
            maml_episode(&task.episode, &theta, &leaves, &dims, &cfg, false, &mut dr)
                .result
                .query_loss
        };
        let unadapted = run(0, 0.01);
        let zero_alpha = run(1, f64::MIN_POSITIVE);
        assert!((unadapted - zero_alpha).abs() < 1e-9, "{unadapted} vs {zero_alpha}");
    }

    #[test]
    fn protomaml_v0_equals_protonet_probabilities() {
        let family = tiny_family();
        let settings = tiny_settings();
        let dims = settings.dims(&family);
        let (theta, _) = init_model(Algorithm::ProtoMaml, &dims, 6);
        let task = prepare_task(
            &family, Split::Val, 2, 2, 3, false,
            &mut rng::stream(6, &["episode", "val"], &[0]),
            &mut rng::stream(6, &["patchperm", "val"], &[0]),
        )
        .unwrap();
        let leaves = theta.leaves();
        let cfg = AdaptationConfig { inner_steps: 0, ..Default::default() };
        let mut dr = rng::stream(6, &["dropout"], &[0]);
        let pm = protomaml_episode(&task.episode, &theta, &leaves, &dims, &cfg, false, &mut dr);
        let enc = Encoder::view(&leaves, &theta, "enc", dims.batch_norm, dims.dropout);
        let mut dr2 = rng::stream(6, &["dropout"], &[1]);
        let pn = protonet_episode(&task.episode, &enc, false, &mut dr2);
        assert!((pm.result.query_loss - pn.result.query_loss).abs() < 1e-9);
        assert_eq!(pm.result.query_accuracy, pn.result.query_accuracy);
    }

    #[test]
    fn comet_single_concept_equals_protonet() {
        let family = tiny_family();
        let mut settings = tiny_settings();
        settings.concepts = 1;
        settings.embed_dim = settings.per_concept_dim;
        let dims = settings.dims(&family);
        let (theta_c, _) = init_model(Algorithm::Comet, &dims, 7);
        let (theta_p, _) = init_model(Algorithm::ProtoNet, &dims, 7);
        let task = prepare_task(
            &family, Split::Test, 2, 2, 3, false,
            &mut rng::stream(7, &["episode", "test"], &[0]),
            &mut rng::stream(7, &["patchperm", "test"], &[0]),
        )
        .unwrap();
        let leaves_c = theta_c.leaves();
        let bank = bank_view(&leaves_c, &theta_c, &dims);
        let full_mask = ConceptAssignment::from_labels(&vec![0; dims.input_dim], 1);
        let mut dr = rng::stream(7, &["dropout"], &[0]);
        let comet = comet_episode(&task.episode, &bank, &full_mask, false, &mut dr);
        let leaves_p = theta_p.leaves();
        let enc = Encoder::view(&leaves_p, &theta_p, "enc", dims.batch_norm, dims.dropout);
        let mut dr2 = rng::stream(7, &["dropout"], &[1]);
        let pn = protonet_episode(&task.episode, &enc, false, &mut dr2);
        assert!((comet.result.query_loss - pn.result.query_loss).abs() < 1e-9);
        assert_eq!(comet.result.query_accuracy, pn.result.query_accuracy);
    }

    #[test]
    fn comaml_single_concept_argmax_equals_protomaml() {
        let family = tiny_family();
        let mut settings = tiny_settings();
        settings.concepts = 1;
        settings.embed_dim = settings.per_concept_dim;
        let dims = settings.dims(&family);
        let (theta_c, phi_c) = init_model(Algorithm::ComamlStatic, &dims, 8);
        let (theta_p, _) = init_model(Algorithm::ProtoMaml, &dims, 8);
        assert_eq!(
            theta_c.get("enc0.w1").unwrap().values,
            theta_p.get("enc.w1").unwrap().values,
            "shared init stream"
        );
        let task = prepare_task(
            &family, Split::Test, 2, 2, 3, false,
            &mut rng::stream(8, &["episode", "test"], &[0]),
            &mut rng::stream(8, &["patchperm", "test"], &[0]),
        )
        .unwrap();
        let cfg = AdaptationConfig::default();
        // train mode with identical dropout streams: trajectories must agree
        for train in [false, true] {
            let leaves_c = theta_c.leaves();
            let phi_leaves = phi_c.leaves();
            let generator = generator_view(Algorithm::ComamlStatic, &phi_leaves, &phi_c).unwrap();
            let mut ar = rng::stream(8, &["assign"], &[0]);
            let mut dr = rng::stream(8, &["dropout"], &[0]);
            let cm = comaml_episode(
                &task, &theta_c, &leaves_c, &generator, &dims, &cfg, 0.5, train, &mut ar, &mut dr,
            );
            let leaves_p = theta_p.leaves();
            let mut dr2 = rng::stream(8, &["dropout"], &[0]);
            let pm = protomaml_episode(&task.episode, &theta_p, &leaves_p, &dims, &cfg, train, &mut dr2);
            assert!(
                (cm.result.cross_entropy - pm.result.cross_entropy).abs() < 1e-9,
                "train={train}: {} vs {}",
                cm.result.cross_entropy,
                pm.result.cross_entropy
            );
            assert_eq!(cm.result.query_accuracy, pm.result.query_accuracy);
            // single-concept assignment entropy is exactly zero
            assert_eq!(cm.result.entropy_value, 0.0);
            assert_eq!(cm.result.query_loss, cm.result.cross_entropy);
        }
    }

    #[test]
    fn comaml_frozen_oracle_v0_matches_comet() {
        let family = tiny_family();
        let settings = tiny_settings();
        let dims = settings.dims(&family);
        let (theta, _) = init_model(Algorithm::ComamlStatic, &dims, 9);
        let oracle_labels = family.ground_truth_assignment();
        let task = prepare_task(
            &family, Split::Test, 2, 2, 3, false,
            &mut rng::stream(9, &["episode", "test"], &[0]),
            &mut rng::stream(9, &["patchperm", "test"], &[0]),
        )
        .unwrap();
        let leaves = theta.leaves();
        let generator = Generator::FrozenOracle { labels: oracle_labels.clone(), concepts: 2 };
        let cfg = AdaptationConfig { inner_steps: 0, ..Default::default() };
        let mut ar = rng::stream(9, &["assign"], &[0]);
        let mut dr = rng::stream(9, &["dropout"], &[0]);
        let cm = comaml_episode(&task, &theta, &leaves, &generator, &dims, &cfg, 0.5, false, &mut ar, &mut dr);
        let bank = bank_view(&leaves, &theta, &dims);
        let oracle = ConceptAssignment::from_labels(&oracle_labels, 2);
        let mut dr2 = rng::stream(9, &["dropout"], &[1]);
        let ct = comet_episode(&task.episode, &bank, &oracle, false, &mut dr2);
        assert!(
            (cm.result.query_loss - ct.result.query_loss).abs() <= 1e-6,
            "{} vs {}",
            cm.result.query_loss,
            ct.result.query_loss
        );
    }

    #[test]
    fn comaml_inner_v0_head_is_prototype_initialization() {
        let family = tiny_family();
        let settings = tiny_settings();
        let dims = settings.dims(&family);
        let (theta, phi) = init_model(Algorithm::ComamlStatic, &dims, 10);
        let task = prepare_task(
            &family, Split::Train, 2, 2, 3, false,
            &mut rng::stream(10, &["episode", "train"], &[0, 0]),
            &mut rng::stream(10, &["patchperm", "train"], &[0, 0]),
        )
        .unwrap();
        let leaves = theta.leaves();
        let phi_leaves = phi.leaves();
        let generator = generator_view(Algorithm::ComamlStatic, &phi_leaves, &phi).unwrap();
        let cfg = AdaptationConfig { inner_steps: 0, ..Default::default() };
        let mut ar = rng::stream(10, &["assign"], &[0]);
        let mut dr = rng::stream(10, &["dropout"], &[0]);
        let inner = comaml_inner(&task, &theta, &leaves, &generator, &dims, &cfg, 0.5, false, &mut ar, &mut dr);
        assert!(inner.support_trace.is_empty());
        // recompute the prototype head directly with the same assignment
        let bank = bank_view(&leaves, &theta, &dims);
        let x = episode_tensor(&task.episode);
        let zs = embed_masked(&x, &inner.support_assignment, &bank, false, &mut dr)
            .narrow(0, 0, task.episode.support_rows());
        let protos = class_prototypes(&zs, &task.episode.support_y, 2);
        let head = prototype_head(&protos);
        assert_eq!(inner.head_w.data(), head.w.data());
        assert_eq!(inner.head_b.data(), head.b.data());
    }

    #[test]
    fn comaml_inner_is_deterministic_given_fixed_assignment() {
        let family = tiny_family();
        let settings = tiny_settings();
        let dims = settings.dims(&family);
        let (theta, _) = init_model(Algorithm::ComamlStatic, &dims, 11);
        let labels = family.ground_truth_assignment();
        let task = prepare_task(
            &family, Split::Train, 2, 2, 3, false,
            &mut rng::stream(11, &["episode", "train"], &[0, 0]),
            &mut rng::stream(11, &["patchperm", "train"], &[0, 0]),
        )
        .unwrap();
        let generator = Generator::FrozenOracle { labels, concepts: 2 };
        let cfg = AdaptationConfig::default();
        let run = || {
            let leaves = theta.leaves();
            let mut ar = rng::stream(11, &["assign"], &[0]);
            let mut dr = rng::stream(11, &["dropout"], &[0]);
            let inner = comaml_inner(&task, &theta, &leaves, &generator, &dims, &cfg, 0.5, false, &mut ar, &mut dr);
            (
                inner.adapted_theta.iter().map(|t| t.to_vec()).collect::<Vec<_>>(),
                inner.head_w.to_vec(),
                inner.support_trace,
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn comaml_static_loss_decomposition() {
        let family = tiny_family();
        let settings = tiny_settings();
        let dims = settings.dims(&family);
        let (theta, phi) = init_model(Algorithm::ComamlStatic, &dims, 12);
        let task = prepare_task(
            &family, Split::Train, 2, 2, 3, false,
            &mut rng::stream(12, &["episode", "train"], &[0, 0]),
            &mut rng::stream(12, &["patchperm", "train"], &[0, 0]),
        )
        .unwrap();
        let leaves = theta.leaves();
        let phi_leaves = phi.leaves();
        let generator = generator_view(Algorithm::ComamlStatic, &phi_leaves, &phi).unwrap();
        let cfg = AdaptationConfig { entropy_coefficient: 0.7, ..Default::default() };
        let mut ar = rng::stream(12, &["assign"], &[0]);
        let mut dr = rng::stream(12, &["dropout"], &[0]);
        let out = comaml_episode(&task, &theta, &leaves, &generator, &dims, &cfg, 0.8, true, &mut ar, &mut dr);
        let r = out.result;
        assert!(
            (r.query_loss - (r.cross_entropy - 0.7 * r.entropy_value + r.vq_value)).abs() <= 1e-12
        );
        // uniform table: entropy exactly d·ln c
        assert!((r.entropy_value - dims.input_dim as f64 * (2.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn comaml_vq_episode_runs_and_decomposes() {
        let family = tiny_family();
        let mut settings = tiny_settings();
        settings.adaptation.entropy_coefficient = 0.5;
        let dims = settings.dims(&family);
        let (theta, phi) = init_model(Algorithm::ComamlVq, &dims, 13);
        let task = prepare_task(
            &family, Split::Train, 2, 2, 3, true,
            &mut rng::stream(13, &["episode", "train"], &[0, 0]),
            &mut rng::stream(13, &["patchperm", "train"], &[0, 0]),
        )
        .unwrap();
        let leaves = theta.leaves();
        let phi_leaves = phi.leaves();
        let generator = generator_view(Algorithm::ComamlVq, &phi_leaves, &phi).unwrap();
        let cfg = settings.adaptation;
        let mut ar = rng::stream(13, &["assign"], &[0]);
        let mut dr = rng::stream(13, &["dropout"], &[0]);
        let out = comaml_episode(&task, &theta, &leaves, &generator, &dims, &cfg, 0.8, true, &mut ar, &mut dr);
        let r = out.result;
        assert!(r.query_loss.is_finite());
        assert!(r.vq_value > 0.0, "random codebook should not match patches exactly");
        assert!(
            (r.query_loss - (r.cross_entropy - 0.5 * r.entropy_value + r.vq_value)).abs() <= 1e-12
        );
        // gradient reaches both θ and φ
        let g = backward(&out.loss);
        assert!(g.get(&leaves[0]).is_some(), "patch encoder gradient");
        assert!(g.get(&phi_leaves[0]).is_some(), "codebook gradient");
    }

    #[test]
    fn outer_step_is_deterministic() {
        let family = tiny_family();
        let settings = tiny_settings();
        let run = || {
            let dims = settings.dims(&family);
            let (mut theta, mut phi) = init_model(Algorithm::ComamlStatic, &dims, 14);
            let mut at = Adam::new(settings.adaptation.outer_lr, &theta.sizes());
            let mut ap = Adam::new(settings.adaptation.outer_lr, &phi.sizes());
            let m = comaml_outer_step(
                Algorithm::ComamlStatic, &family, &mut theta, &mut phi, &settings, 0.9, 0, 14,
                &mut at, &mut ap,
            )
            .unwrap();
            (m, theta, phi)
        };
        let (m1, t1, p1) = run();
        let (m2, t2, p2) = run();
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn outer_step_updates_both_parameter_groups() {
        let family = tiny_family();
        let settings = tiny_settings();
        let dims = settings.dims(&family);
        let (mut theta, mut phi) = init_model(Algorithm::ComamlStatic, &dims, 15);
        let theta0 = theta.clone();
        let phi0 = phi.clone();
        let mut at = Adam::new(settings.adaptation.outer_lr, &theta.sizes());
        let mut ap = Adam::new(settings.adaptation.outer_lr, &phi.sizes());
        comaml_outer_step(
            Algorithm::ComamlStatic, &family, &mut theta, &mut phi, &settings, 0.9, 0, 15,
            &mut at, &mut ap,
        )
        .unwrap();
        assert_ne!(theta, theta0, "encoder parameters move");
        // φ moves only if some assignment gradient is nonzero; the straight-
        // through estimator guarantees that for a sampled assignment
        assert_ne!(phi, phi0, "generator logits move");
    }

    #[test]
    fn run_meta_training_zero_iterations_returns_init() {
        let family = tiny_family();
        let mut settings = tiny_settings();
        settings.iterations = 0;
        let run = run_meta_training(Algorithm::ProtoNet, &family, &settings, 16).unwrap();
        assert!(run.series.is_empty());
        let (theta0, phi0) = init_model(Algorithm::ProtoNet, &settings.dims(&family), 16);
        assert_eq!(run.model.theta, theta0);
        assert_eq!(run.model.phi, phi0);
        assert_eq!(run.model.best_iteration, None);
    }

    #[test]
    fn run_meta_training_is_bit_deterministic() {
        let family = tiny_family();
        let settings = tiny_settings();
        let a = run_meta_training(Algorithm::ComamlStatic, &family, &settings, 17).unwrap();
        let b = run_meta_training(Algorithm::ComamlStatic, &family, &settings, 17).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.model, b.model);
        assert!(!a.series.is_empty());
        assert!(a.series.iter().any(|r| r.split == "val"));
    }

    #[test]
    fn run_meta_training_divergence_guard_aborts() {
        let family = tiny_family();
        let mut settings = tiny_settings();
        settings.adaptation.inner_lr = 1e250;
        settings.adaptation.inner_steps = 2;
        let err = run_meta_training(Algorithm::Maml, &family, &settings, 18).unwrap_err();
        match err {
            CoreError::Diverged { .. } => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_stream_is_algorithm_independent_and_deterministic() {
        let family = tiny_family();
        let settings = tiny_settings();
        let dims = settings.dims(&family);
        let (theta_p, phi_p) = init_model(Algorithm::ProtoNet, &dims, 19);
        let r1 = evaluate_model(Algorithm::ProtoNet, &family, &theta_p, &phi_p, &settings, Split::Test, 6, 19).unwrap();
        let r2 = evaluate_model(Algorithm::ProtoNet, &family, &theta_p, &phi_p, &settings, Split::Test, 6, 19).unwrap();
        assert_eq!(r1, r2, "evaluation is bit-deterministic");
        // the episode stream itself does not depend on the algorithm
        let e1 = prepare_task(
            &family, Split::Test, 2, 2, 3, false,
            &mut rng::stream(19, &["episode", "test"], &[3]),
            &mut rng::stream(19, &["patchperm", "test"], &[3]),
        )
        .unwrap();
        let e2 = prepare_task(
            &family, Split::Test, 2, 2, 3, true,
            &mut rng::stream(19, &["episode", "test"], &[3]),
            &mut rng::stream(19, &["patchperm", "test"], &[3]),
        )
        .unwrap();
        assert_eq!(e1.episode.support_x, e2.episode.support_x);
        assert_eq!(e1.episode.class_ids, e2.episode.class_ids);
    }

    #[test]
    fn settings_validation_rejects_bad_shapes() {
        let mut s = tiny_settings();
        s.n_way = 1;
        assert!(s.validate().is_err());
        let mut s = tiny_settings();
        s.dropout = 1.0;
        assert!(s.validate().is_err());
        let mut s = tiny_settings();
        s.schedule = TemperatureSchedule { lambda0: 0.05, lambda_min: 0.1, horizon: 10 };
        assert!(s.validate().is_err());
    }
}
