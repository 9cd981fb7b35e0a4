//! Zero-shot recognition with dual visual-semantic mapping paths (DMaP).
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the shared domain types (feature/embedding matrices,
//!   class splits, label matrices, prototypes).
//! * [`linmap`] learns closed-form linear maps from features into a semantic
//!   space.
//! * [`consistency`] extracts inter-class relationships, measures their
//!   consistency across spaces and pre-inspects a semantic space for classes
//!   that no linear map can tell apart.
//! * [`dmap`] is the training loop with iterative prototype refinement and the
//!   inductive / transductive inference rules.
//! * [`eval`] computes per-class, top-k and confusion statistics.
//! * [`synth`] generates deterministic synthetic datasets with controllable
//!   relationship consistency, noise and semantic defects.
//! * [`io`] and [`pipeline`] implement the on-disk formats and the end-to-end
//!   train / predict / evaluate run used by the CLI.

// `!(x >= 0.0)` is how the validators reject NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consistency;
pub mod dmap;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod linmap;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use consistency::{
    build_relationship_matrix, consistency_measure, extract_relationship, irc_gap, preinspect,
    project_onto_seen_span, DefectReport, Epsilon, ProjectionDecomposition, RelationshipMatrix,
    SourceSpace,
};
pub use dmap::{
    infer_inductive, infer_transductive, knn_prototype, train, DmapConfig, DmapModel,
    MapObjective, Mode, Prediction,
};
pub use error::{DmapError, Result};
pub use eval::{evaluate, EvalReport, GroundTruth};
pub use linmap::{
    predict_semantic, solve_embedding_regression, solve_ridge_map, solve_ridge_map_targets, MapMatrix,
};
pub use model::{
    build_label_matrix, class_mean_prototypes, ClassId, ClassSplit, EmbeddingMatrix,
    FeatureMatrix, LabelMatrix, LabeledDataset, PrototypeSet, PrototypeSource,
};
pub use synth::{generate, SynthConfig, SyntheticData};

/// Re-exported so downstream crates can build matrices without naming the
/// exact `nalgebra` version.
pub use nalgebra::{DMatrix, DVector};
