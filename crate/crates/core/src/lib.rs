//! Few-shot meta-learning on synthetic concept-structured tasks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine over dense `f64`
//!   tensors (the only numerical substrate used anywhere else),
//! * [`optim`] — SGD steps expressed in-graph plus a standalone Adam,
//! * [`rng`] — deterministic, purpose-keyed random streams,
//! * [`data`] — the synthetic episodic task families,
//! * [`concepts`] — feature-to-concept assignment generators (trainable
//!   softmax table, vector-quantized codebook, frozen oracle),
//! * [`models`] — MLP encoders, concept encoder banks, prototype heads,
//! * [`meta`] — the episode learners (nearest-prototype, gradient
//!   adaptation, prototype-initialized adaptation, concept variants) and
//!   the meta-training loop,
//! * [`harness`] — experiment configs, evaluation, sweeps and exports.

pub mod concepts;
pub mod data;
pub mod error;
pub mod harness;
pub mod meta;
pub mod models;
pub mod optim;
pub mod rng;
pub mod sample;
pub mod tensor;

pub use error::{ConfigError, CoreError};
pub use tensor::{backward, backward_with_cuts, softmax_cross_entropy, Gradients, Tape, Tensor};
