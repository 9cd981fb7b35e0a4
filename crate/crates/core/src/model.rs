//! Domain types shared by every stage of the pipeline.
//!
//! All matrices are column-major in the mathematical sense: features are
//! `d × n` (one column per instance), embeddings are `p × c` (one column per
//! class), prototypes are `dim × c`.

use std::collections::{HashMap, HashSet};

use log::warn;
use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{DmapError, Result};
use crate::linalg::all_finite;

pub type ClassId = String;

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(DmapError::InvalidInput(format!("duplicate {what} `{id}`")));
        }
    }
    Ok(())
}

fn index_of(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

/// Instance features, `d × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
    instance_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>, instance_ids: Vec<String>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(DmapError::InvalidInput(format!(
                "feature matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if instance_ids.len() != data.ncols() {
            return Err(DmapError::ShapeMismatch(format!(
                "{} instance ids for {} feature columns",
                instance_ids.len(),
                data.ncols()
            )));
        }
        if !all_finite(&data) {
            return Err(DmapError::InvalidInput(
                "feature matrix contains non-finite values".into(),
            ));
        }
        check_unique(&instance_ids, "instance id")?;
        Ok(Self { data, instance_ids })
    }

    /// Instance ids default to the column index.
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        let ids = (0..data.ncols()).map(|i| i.to_string()).collect();
        Self::new(data, ids)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn into_parts(self) -> (DMatrix<f64>, Vec<String>) {
        (self.data, self.instance_ids)
    }
}

/// Per-class semantic embeddings, `p × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: DMatrix<f64>,
    class_ids: Vec<ClassId>,
}

impl EmbeddingMatrix {
    pub fn new(data: DMatrix<f64>, class_ids: Vec<ClassId>) -> Result<Self> {
        if class_ids.len() != data.ncols() {
            return Err(DmapError::ShapeMismatch(format!(
                "{} class ids for {} embedding columns",
                class_ids.len(),
                data.ncols()
            )));
        }
        if !all_finite(&data) {
            return Err(DmapError::InvalidInput(
                "embedding matrix contains non-finite values".into(),
            ));
        }
        check_unique(&class_ids, "class id")?;
        for (j, col) in data.column_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0) {
                warn!("embedding for class `{}` is identically zero", class_ids[j]);
            }
        }
        Ok(Self { data, class_ids })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.data.ncols()
    }

    pub fn column(&self, class: &str) -> Option<DVectorView<'_, f64>> {
        self.class_ids
            .iter()
            .position(|c| c == class)
            .map(|j| self.data.column(j))
    }

    /// Columns for `classes`, in that order.
    pub fn select(&self, classes: &[ClassId]) -> Result<EmbeddingMatrix> {
        let index = index_of(&self.class_ids);
        let mut cols = Vec::with_capacity(classes.len());
        for c in classes {
            let j = *index
                .get(c.as_str())
                .ok_or_else(|| DmapError::UnknownClass(c.clone()))?;
            cols.push(self.data.column(j).clone_owned());
        }
        let data = if cols.is_empty() {
            DMatrix::zeros(self.dim(), 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Ok(EmbeddingMatrix {
            data,
            class_ids: classes.to_vec(),
        })
    }
}

/// Disjoint seen / unseen class lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    seen: Vec<ClassId>,
    unseen: Vec<ClassId>,
}

impl ClassSplit {
    pub fn new(seen: Vec<ClassId>, unseen: Vec<ClassId>) -> Result<Self> {
        if seen.is_empty() || unseen.is_empty() {
            return Err(DmapError::InvalidInput(
                "split needs at least one seen and one unseen class".into(),
            ));
        }
        check_unique(&seen, "seen class")?;
        check_unique(&unseen, "unseen class")?;
        let seen_set: HashSet<&str> = seen.iter().map(String::as_str).collect();
        if let Some(c) = unseen.iter().find(|c| seen_set.contains(c.as_str())) {
            return Err(DmapError::InvalidInput(format!(
                "class `{c}` is both seen and unseen"
            )));
        }
        Ok(Self { seen, unseen })
    }

    pub fn seen(&self) -> &[ClassId] {
        &self.seen
    }

    pub fn unseen(&self) -> &[ClassId] {
        &self.unseen
    }

    /// Seen classes followed by unseen classes.
    pub fn all(&self) -> Vec<ClassId> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }
}

/// Training data: features of seen-class instances plus the full semantic
/// space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub labels: Vec<ClassId>,
    pub split: ClassSplit,
    pub semantic: EmbeddingMatrix,
}

impl LabeledDataset {
    pub fn new(
        features: FeatureMatrix,
        labels: Vec<ClassId>,
        split: ClassSplit,
        semantic: EmbeddingMatrix,
    ) -> Result<Self> {
        if labels.len() != features.len() {
            return Err(DmapError::ShapeMismatch(format!(
                "{} labels for {} instances",
                labels.len(),
                features.len()
            )));
        }
        let seen: HashSet<&str> = split.seen().iter().map(String::as_str).collect();
        if let Some(l) = labels.iter().find(|l| !seen.contains(l.as_str())) {
            return Err(DmapError::UnknownLabel(l.clone()));
        }
        let known: HashSet<&str> = semantic.class_ids().iter().map(String::as_str).collect();
        if let Some(c) = split.all().into_iter().find(|c| !known.contains(c.as_str())) {
            return Err(DmapError::UnknownClass(c));
        }
        Ok(Self {
            features,
            labels,
            split,
            semantic,
        })
    }

    pub fn seen_embeddings(&self) -> EmbeddingMatrix {
        self.semantic
            .select(self.split.seen())
            .expect("validated in constructor")
    }

    pub fn unseen_embeddings(&self) -> EmbeddingMatrix {
        self.semantic
            .select(self.split.unseen())
            .expect("validated in constructor")
    }
}

/// `n × k` matrix over {−1, +1} with one +1 per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    data: DMatrix<f64>,
}

impl LabelMatrix {
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Column index of the +1 entry in each row.
    pub fn decode(&self) -> Vec<usize> {
        self.data
            .row_iter()
            .map(|row| {
                row.iter()
                    .position(|&v| v > 0.0)
                    .expect("one positive entry per row")
            })
            .collect()
    }
}

pub fn build_label_matrix(labels: &[ClassId], seen: &[ClassId]) -> Result<LabelMatrix> {
    let index = index_of(seen);
    let mut data = DMatrix::from_element(labels.len(), seen.len(), -1.0);
    for (i, label) in labels.iter().enumerate() {
        let j = *index
            .get(label.as_str())
            .ok_or_else(|| DmapError::UnknownLabel(label.clone()))?;
        data[(i, j)] = 1.0;
    }
    Ok(LabelMatrix { data })
}

/// Indices of `labels` into `classes`.
pub(crate) fn label_indices(labels: &[ClassId], classes: &[ClassId]) -> Result<Vec<usize>> {
    let index = index_of(classes);
    labels
        .iter()
        .map(|l| {
            index
                .get(l.as_str())
                .copied()
                .ok_or_else(|| DmapError::UnknownLabel(l.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    ClassMean,
    KnnAverage,
}

/// One prototype column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    data: DMatrix<f64>,
    class_ids: Vec<ClassId>,
    source: PrototypeSource,
}

impl PrototypeSet {
    pub fn new(data: DMatrix<f64>, class_ids: Vec<ClassId>, source: PrototypeSource) -> Result<Self> {
        if data.ncols() != class_ids.len() {
            return Err(DmapError::ShapeMismatch(format!(
                "{} prototype columns for {} classes",
                data.ncols(),
                class_ids.len()
            )));
        }
        if !all_finite(&data) {
            return Err(DmapError::InvalidInput("non-finite prototype".into()));
        }
        check_unique(&class_ids, "class id")?;
        Ok(Self {
            data,
            class_ids,
            source,
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn source(&self) -> PrototypeSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }
}

pub fn class_mean_prototypes(
    features: &FeatureMatrix,
    labels: &[ClassId],
    classes: &[ClassId],
) -> Result<PrototypeSet> {
    if labels.len() != features.len() {
        return Err(DmapError::ShapeMismatch(format!(
            "{} labels for {} instances",
            labels.len(),
            features.len()
        )));
    }
    let index = index_of(classes);
    let d = features.dim();
    let mut sums = DMatrix::zeros(d, classes.len());
    let mut counts = vec![0usize; classes.len()];
    for (i, label) in labels.iter().enumerate() {
        // Instances of classes that were not requested are ignored.
        if let Some(&j) = index.get(label.as_str()) {
            let mut col = sums.column_mut(j);
            col += features.data().column(i);
            counts[j] += 1;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(DmapError::MissingClass(classes[j].clone()));
        }
        let mut col = sums.column_mut(j);
        col /= count as f64;
    }
    PrototypeSet::new(sums, classes.to_vec(), PrototypeSource::ClassMean)
}

/// Scales every non-zero column to unit ℓ2 norm.
pub fn normalize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    out
}

pub fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.column_mean()
}
