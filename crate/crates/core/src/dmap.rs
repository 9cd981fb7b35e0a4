//! Dual mapping paths with iterative prototype refinement.
//!
//! Training learns `f_s` from features into the given semantic space, then
//! builds a second semantic space `K̃` whose class prototypes live in the
//! feature space: each prototype is the mean of the training images whose
//! predictions are nearest to the class anchor. A second map `f̃_s` into `K̃` and
//! the prototypes themselves are refined alternately.
//!
//! Inference is either inductive (score `⟨f_s(x), k_c⟩` against the given
//! embeddings) or transductive: unseen prototypes `K̃_u` are built from the test
//! batch itself, starting from `f_s` predictions and refined with `f̃_s`.

use log::warn;
use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DmapError, Result};
use crate::linalg::relative_change;
use crate::linmap::{predict_semantic, solve_embedding_regression, solve_ridge_map, MapMatrix};
use crate::model::{
    build_label_matrix, label_indices, normalize_columns, ClassId, EmbeddingMatrix, FeatureMatrix,
    LabelMatrix, LabeledDataset, PrototypeSet, PrototypeSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Candidates are the unseen classes only.
    #[default]
    Czsr,
    /// Candidates are seen and unseen classes.
    Gzsr,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Czsr => "czsr",
            Mode::Gzsr => "gzsr",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = DmapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "czsr" => Ok(Mode::Czsr),
            "gzsr" => Ok(Mode::Gzsr),
            other => Err(DmapError::InvalidInput(format!(
                "unknown mode `{other}` (expected czsr or gzsr)"
            ))),
        }
    }
}

/// Which closed-form objective learns `f_s` and `f̃_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapObjective {
    /// Fit ±1 label scores `xᵀVk_c` (see [`solve_ridge_map`]).
    #[default]
    LabelScores,
    /// Regress each instance onto its class embedding (see
    /// [`solve_embedding_regression`]); `eta` is unused.
    EmbeddingRegression,
}

impl std::str::FromStr for MapObjective {
    type Err = DmapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_scores" => Ok(MapObjective::LabelScores),
            "embedding_regression" => Ok(MapObjective::EmbeddingRegression),
            other => Err(DmapError::InvalidInput(format!(
                "unknown objective `{other}` (expected label_scores or embedding_regression)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmapConfig {
    /// Neighbours averaged per prototype.
    pub m: usize,
    /// Ridge weight for relationship extraction.
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub train_max_iter: usize,
    pub test_max_iter: usize,
    /// Refinement stops once the relative Frobenius change of `K̃_s` drops
    /// below this.
    pub convergence_tol: f64,
    pub mode: Mode,
    /// Scale feature and embedding columns to unit ℓ2 norm.
    pub normalize: bool,
    /// Subtract the training feature mean.
    pub center: bool,
    pub objective: MapObjective,
}

impl Default for DmapConfig {
    fn default() -> Self {
        Self {
            m: 100,
            lambda: 1e-4,
            gamma: 10f64.powf(1.35),
            eta: 10f64.powf(4.8),
            train_max_iter: 2,
            test_max_iter: 2,
            convergence_tol: 1e-4,
            mode: Mode::Czsr,
            normalize: false,
            center: false,
            objective: MapObjective::LabelScores,
        }
    }
}

impl DmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(DmapError::InvalidInput("m must be at least 1".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DmapError::InvalidInput(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !(self.convergence_tol > 0.0) {
            return Err(DmapError::InvalidInput(format!(
                "convergence_tol must be positive, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

/// Output of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct DmapModel {
    /// Features → given semantic space (`d × p`).
    pub f_s: MapMatrix,
    /// Features → constructed space `K̃` (`d × d`).
    pub f_tilde: MapMatrix,
    /// Refined seen prototypes (`d × k`).
    pub k_tilde_s: PrototypeSet,
    pub train_iterations_run: usize,
    pub config: DmapConfig,
    /// Training feature mean, present when `config.center` is set.
    pub feature_offset: Option<DVector<f64>>,
}

impl DmapModel {
    pub fn seen_classes(&self) -> &[ClassId] {
        self.k_tilde_s.class_ids()
    }

    /// Applies the training-time feature preprocessing.
    pub fn preprocess_features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.f_s.input_dim() {
            return Err(DmapError::DimensionMismatch(format!(
                "model expects {}-dimensional features, got {}",
                self.f_s.input_dim(),
                x.nrows()
            )));
        }
        Ok(preprocess(x, self.feature_offset.as_ref(), self.config.normalize))
    }

    pub fn preprocess_embeddings(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        if self.config.normalize {
            normalize_columns(k)
        } else {
            k.clone()
        }
    }
}

fn preprocess(x: &DMatrix<f64>, offset: Option<&DVector<f64>>, normalize: bool) -> DMatrix<f64> {
    let mut out = x.clone();
    if let Some(mean) = offset {
        for mut col in out.column_iter_mut() {
            col -= mean;
        }
    }
    if normalize {
        out = normalize_columns(&out);
    }
    out
}

/// Scores and decisions for a batch of test instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mode: Mode,
    pub instance_ids: Vec<String>,
    /// Candidate classes; in gZSR the first `seen_candidates` are seen.
    pub candidates: Vec<ClassId>,
    pub seen_candidates: usize,
    pub predicted: Vec<ClassId>,
    /// `candidates × instances`.
    pub scores: DMatrix<f64>,
}

impl Prediction {
    fn from_scores(
        mode: Mode,
        instance_ids: Vec<String>,
        candidates: Vec<ClassId>,
        seen_candidates: usize,
        scores: DMatrix<f64>,
    ) -> Self {
        let predicted = argmax_columns(&scores)
            .into_iter()
            .map(|c| candidates[c].clone())
            .collect();
        Self {
            mode,
            instance_ids,
            candidates,
            seen_candidates,
            predicted,
            scores,
        }
    }

    pub fn unseen_candidates(&self) -> &[ClassId] {
        &self.candidates[self.seen_candidates..]
    }

    /// The same scores restricted to unseen candidates, decided again.
    pub fn restrict_to_unseen(&self) -> Prediction {
        let rows = self.scores.rows(self.seen_candidates, self.candidates.len() - self.seen_candidates);
        Prediction::from_scores(
            Mode::Czsr,
            self.instance_ids.clone(),
            self.unseen_candidates().to_vec(),
            0,
            rows.clone_owned(),
        )
    }

    /// Rebuilds a prediction from stored scores, re-deriving the decisions.
    pub fn new(
        mode: Mode,
        instance_ids: Vec<String>,
        candidates: Vec<ClassId>,
        seen_candidates: usize,
        scores: DMatrix<f64>,
    ) -> Result<Self> {
        if scores.nrows() != candidates.len() || scores.ncols() != instance_ids.len() {
            return Err(DmapError::ShapeMismatch(format!(
                "score matrix is {}x{} for {} candidates and {} instances",
                scores.nrows(),
                scores.ncols(),
                candidates.len(),
                instance_ids.len()
            )));
        }
        if candidates.is_empty() || seen_candidates >= candidates.len() {
            return Err(DmapError::InvalidInput(
                "prediction needs at least one unseen candidate".into(),
            ));
        }
        if mode == Mode::Czsr && seen_candidates != 0 {
            return Err(DmapError::InvalidInput(
                "a cZSR prediction cannot have seen candidates".into(),
            ));
        }
        Ok(Self::from_scores(mode, instance_ids, candidates, seen_candidates, scores))
    }
}

/// Row of the maximum in each column; ties go to the lower row.
pub fn argmax_columns(scores: &DMatrix<f64>) -> Vec<usize> {
    scores
        .column_iter()
        .map(|col| {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate().skip(1) {
                if v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn clamp_m(m: usize, available: usize) -> usize {
    if m > available {
        warn!("m = {m} exceeds the {available} available instances; clamping");
        available
    } else {
        m
    }
}

/// Indices of the `m` columns of `predictions` nearest to `anchor`, nearest
/// first; equal distances go to the lower index.
pub fn nearest_columns(anchor: DVectorView<'_, f64>, predictions: &DMatrix<f64>, m: usize) -> Vec<usize> {
    let m = m.min(predictions.ncols());
    let mut keyed: Vec<(f64, usize)> = predictions
        .column_iter()
        .enumerate()
        .map(|(j, col)| {
            let d: f64 = col.iter().zip(anchor.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, j)
        })
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if m == 0 {
        return Vec::new();
    }
    if m < keyed.len() {
        keyed.select_nth_unstable_by(m - 1, order);
        keyed.truncate(m);
    }
    keyed.sort_unstable_by(order);
    keyed.into_iter().map(|(_, j)| j).collect()
}

/// Mean of the feature columns whose predictions are the `m` nearest to
/// `anchor` (Euclidean, in prediction space), summed nearest first.
pub fn knn_prototype(
    anchor: DVectorView<'_, f64>,
    predictions: &DMatrix<f64>,
    features: &DMatrix<f64>,
    m: usize,
) -> Result<DVector<f64>> {
    if predictions.ncols() != features.ncols() {
        return Err(DmapError::DimensionMismatch(format!(
            "{} predictions for {} feature columns",
            predictions.ncols(),
            features.ncols()
        )));
    }
    if anchor.len() != predictions.nrows() {
        return Err(DmapError::DimensionMismatch(format!(
            "anchor has dimension {}, predictions have {}",
            anchor.len(),
            predictions.nrows()
        )));
    }
    if m == 0 {
        return Err(DmapError::InvalidInput("m must be at least 1".into()));
    }
    if features.ncols() == 0 {
        return Err(DmapError::EmptyTestSet);
    }
    let m = clamp_m(m, features.ncols());
    let neighbours = nearest_columns(anchor, predictions, m);
    let mut sum = DVector::zeros(features.nrows());
    for &j in &neighbours {
        sum += features.column(j);
    }
    Ok(sum / neighbours.len() as f64)
}

/// One prototype per anchor column; the clamp warning is issued once.
fn knn_prototypes(
    anchors: &DMatrix<f64>,
    predictions: &DMatrix<f64>,
    features: &DMatrix<f64>,
    m: usize,
) -> Result<DMatrix<f64>> {
    let m = clamp_m(m, features.ncols());
    let columns: Vec<DVector<f64>> = (0..anchors.ncols())
        .into_par_iter()
        .map(|i| knn_prototype(anchors.column(i), predictions, features, m))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&columns))
}

fn fit_map(
    objective: MapObjective,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    labels: &LabelMatrix,
    label_idx: &[usize],
    config: &DmapConfig,
) -> Result<MapMatrix> {
    match objective {
        MapObjective::LabelScores => solve_ridge_map(x, targets, labels, config.gamma, config.eta),
        MapObjective::EmbeddingRegression => {
            solve_embedding_regression(x, targets, label_idx, config.gamma)
        }
    }
}

pub fn train(dataset: &LabeledDataset, config: &DmapConfig) -> Result<DmapModel> {
    config.validate()?;
    if dataset.features.is_empty() {
        return Err(DmapError::EmptyTrainingSet);
    }
    let seen = dataset.split.seen();
    let raw = dataset.features.data();
    let feature_offset = config.center.then(|| raw.column_mean());
    let x = preprocess(raw, feature_offset.as_ref(), config.normalize);
    let k_s = {
        let k = dataset.seen_embeddings().data().clone();
        if config.normalize {
            normalize_columns(&k)
        } else {
            k
        }
    };
    let labels = build_label_matrix(&dataset.labels, seen)?;
    let label_idx = label_indices(&dataset.labels, seen)?;

    // Step 1: features → given semantic space.
    let f_s = fit_map(config.objective, &x, &k_s, &labels, &label_idx, config)?;

    // Step 2: seen prototypes from nearest predictions.
    let predictions = predict_semantic(&f_s, &x)?;
    let mut k_tilde = knn_prototypes(&k_s, &predictions, &x, config.m)?;

    // Step 3: alternate between f̃_s and K̃_s.
    let mut iterations = 0;
    for _ in 0..config.train_max_iter {
        let f_tilde = fit_map(config.objective, &x, &k_tilde, &labels, &label_idx, config)?;
        let predictions = predict_semantic(&f_tilde, &x)?;
        let refined = knn_prototypes(&k_tilde, &predictions, &x, config.m)?;
        let change = relative_change(&k_tilde, &refined);
        k_tilde = refined;
        iterations += 1;
        if change < config.convergence_tol {
            break;
        }
    }
    let f_tilde = fit_map(config.objective, &x, &k_tilde, &labels, &label_idx, config)?;

    Ok(DmapModel {
        f_s,
        f_tilde,
        k_tilde_s: PrototypeSet::new(k_tilde, seen.to_vec(), PrototypeSource::KnnAverage)?,
        train_iterations_run: iterations,
        config: config.clone(),
        feature_offset,
    })
}

fn check_test_set(x_test: &FeatureMatrix) -> Result<()> {
    if x_test.is_empty() {
        return Err(DmapError::EmptyTestSet);
    }
    Ok(())
}

fn check_embedding_dim(model: &DmapModel, k: &EmbeddingMatrix) -> Result<()> {
    if k.dim() != model.f_s.output_dim() {
        return Err(DmapError::DimensionMismatch(format!(
            "model maps into {} dimensions, embeddings have {}",
            model.f_s.output_dim(),
            k.dim()
        )));
    }
    Ok(())
}

/// Scores `⟨f_s(x), k_c⟩` against the given embeddings.
pub fn infer_inductive(
    model: &DmapModel,
    x_test: &FeatureMatrix,
    k_unseen: &EmbeddingMatrix,
    k_seen: &EmbeddingMatrix,
    mode: Mode,
) -> Result<Prediction> {
    check_test_set(x_test)?;
    check_embedding_dim(model, k_unseen)?;
    if k_unseen.num_classes() == 0 {
        return Err(DmapError::InvalidInput("no unseen candidates".into()));
    }
    let x = model.preprocess_features(x_test.data())?;
    let projected = predict_semantic(&model.f_s, &x)?;
    let (candidates, seen_count, matrix) = match mode {
        Mode::Czsr => (k_unseen.class_ids().to_vec(), 0, k_unseen.data().clone()),
        Mode::Gzsr => {
            check_embedding_dim(model, k_seen)?;
            let mut ids = k_seen.class_ids().to_vec();
            ids.extend_from_slice(k_unseen.class_ids());
            let joined = DMatrix::from_columns(
                &k_seen
                    .data()
                    .column_iter()
                    .chain(k_unseen.data().column_iter())
                    .map(|c| c.clone_owned())
                    .collect::<Vec<_>>(),
            );
            (ids, k_seen.num_classes(), joined)
        }
    };
    let matrix = model.preprocess_embeddings(&matrix);
    let scores = matrix.tr_mul(&projected);
    Ok(Prediction::from_scores(
        mode,
        x_test.instance_ids().to_vec(),
        candidates,
        seen_count,
        scores,
    ))
}

/// Result of one transductive iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TransductiveStep {
    pub prediction: Prediction,
    pub k_tilde_u: PrototypeSet,
}

/// Every iteration of the transductive loop, first to last.
pub fn infer_transductive_history(
    model: &DmapModel,
    x_test: &FeatureMatrix,
    k_unseen: &EmbeddingMatrix,
    mode: Mode,
    iterations: usize,
) -> Result<Vec<TransductiveStep>> {
    check_test_set(x_test)?;
    check_embedding_dim(model, k_unseen)?;
    if iterations == 0 {
        return Err(DmapError::InvalidInput(
            "transductive inference needs at least one iteration".into(),
        ));
    }
    if k_unseen.num_classes() == 0 {
        return Err(DmapError::InvalidInput("no unseen candidates".into()));
    }
    let x = model.preprocess_features(x_test.data())?;
    let k_u = model.preprocess_embeddings(k_unseen.data());
    let m = clamp_m(model.config.m, x.ncols());

    // Jump-start from f_s predictions.
    let semantic = predict_semantic(&model.f_s, &x)?;
    let mut k_tilde_u = knn_prototypes(&k_u, &semantic, &x, m)?;
    let constructed = predict_semantic(&model.f_tilde, &x)?;

    let unseen_ids = k_unseen.class_ids().to_vec();
    let mut history = Vec::with_capacity(iterations);
    for t in 0..iterations {
        if t > 0 {
            k_tilde_u = knn_prototypes(&k_tilde_u, &constructed, &x, m)?;
        }
        let (candidates, seen_count, matrix) = match mode {
            Mode::Czsr => (unseen_ids.clone(), 0, k_tilde_u.clone()),
            Mode::Gzsr => {
                let k_s = model.k_tilde_s.data();
                let mut ids = model.seen_classes().to_vec();
                ids.extend(unseen_ids.iter().cloned());
                let joined = DMatrix::from_columns(
                    &k_s.column_iter()
                        .chain(k_tilde_u.column_iter())
                        .map(|c| c.clone_owned())
                        .collect::<Vec<_>>(),
                );
                (ids, k_s.ncols(), joined)
            }
        };
        let scores = matrix.tr_mul(&constructed);
        history.push(TransductiveStep {
            prediction: Prediction::from_scores(
                mode,
                x_test.instance_ids().to_vec(),
                candidates,
                seen_count,
                scores,
            ),
            k_tilde_u: PrototypeSet::new(
                k_tilde_u.clone(),
                unseen_ids.clone(),
                PrototypeSource::KnnAverage,
            )?,
        });
    }
    Ok(history)
}

/// Final prediction and unseen prototypes after `iterations` rounds.
pub fn infer_transductive(
    model: &DmapModel,
    x_test: &FeatureMatrix,
    k_unseen: &EmbeddingMatrix,
    mode: Mode,
    iterations: usize,
) -> Result<(Prediction, PrototypeSet)> {
    let step = infer_transductive_history(model, x_test, k_unseen, mode, iterations)?
        .pop()
        .expect("at least one iteration");
    Ok((step.prediction, step.k_tilde_u))
}
