//! Pool-based active learning for binary (bona fide / spoof) classifiers.
//!
//! The engine trains a small classifier on a seed set and grows its training
//! set from a candidate pool, either by selecting the examples with the lowest
//! certainty score ([`selection::iterate_select`]) or by first deleting the
//! highest-scoring examples and then sampling the remainder at random
//! ([`selection::iterate_remove`]). Certainty scores come from the logit
//! energy, the distance to adversarial samples, or a uniform draw
//! ([`scoring`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common case.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod scalar;
pub mod scoring;
pub mod selection;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, Dataset};
pub use error::{Error, Result};
pub use eval::{compute_eer, eer_z_test, holm_correct, EerResult, SignificanceResult, TrialScore};
pub use model::{adam_step, train, AdamConfig, AdamState, Classifier, Example, Gradients, Label, Logits, TrainConfig};
pub use scalar::Scalar;
pub use scoring::{AdvGenConfig, CertaintyScore, ScorerKind};
pub use selection::{run_al, AlConfig, AlState, Algorithm, IterationRecord, RunRecord};
pub use synth::{make_scenario, Scenario, ScenarioSpec};

pub type Classifier64 = Classifier<f64>;
pub type Classifier32 = Classifier<f32>;
pub type Example64 = Example<f64>;
pub type Example32 = Example<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type AlConfig64 = AlConfig<f64>;
pub type AlConfig32 = AlConfig<f32>;
pub type Scenario64 = Scenario<f64>;
pub type Scenario32 = Scenario<f32>;
