//! Multi-task metric learning with coupled low-rank projections.
//!
//! Every task `t` measures squared distance as `||L0 (xi - xj)||^2 + ||Lt (xi - xj)||^2`,
//! where `L0` is shared across tasks and `Lt` is task specific. Both are `d x D` with `d << D`,
//! so the learned metric doubles as a discriminative compression: gallery items are stored as
//! their projections and searched by exact Euclidean nearest-neighbor scan.
//!
//! Modules:
//! - [`model`]: projections, coupled distances, the hinge objective
//! - [`wpca`]: whitened PCA (baseline and initializer)
//! - [`pairs`]: similarity constraints and their samplers
//! - [`trainer`]: round-robin SGD for the coupled model and its single-task siblings
//! - [`retrieval`]: compressed index, sharded k-NN scan, n-call@K evaluation
//! - [`synth`]: synthetic multi-task data
//! - [`io`], [`experiment`]: file formats, experiment runner, grid search

pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod pairs;
pub mod retrieval;
pub mod synth;
pub mod trainer;
pub mod wpca;

pub use data::{Dataset, FeatureSet, DISTRACTOR};
pub use error::{Error, Result};
pub use model::{
    hinge_loss_term, pair_distance_sq, project, total_loss, CoupledModel,
    ProjectionMatrix, Variant,
};
pub use pairs::{generate_pairs, sample_constraint, PairConstraint, PairSet, Task};
pub use retrieval::{build_index, evaluate, n_call_at_k, query_knn, Encoder, EvalReport, RetrievalIndex};
pub use trainer::{distance_gradient, init_model, sgd_step, train, StepRates, TrainConfig, TrainLog};
pub use wpca::{fit_wpca, WpcaResult};
