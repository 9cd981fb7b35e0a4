//! Accuracy metrics for zero-shot predictions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dmap::{Mode, Prediction};
use crate::error::{DmapError, Result};
use crate::model::ClassId;

/// True class of each test instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    instance_ids: Vec<String>,
    labels: Vec<ClassId>,
}

impl GroundTruth {
    pub fn new(instance_ids: Vec<String>, labels: Vec<ClassId>) -> Result<Self> {
        if instance_ids.len() != labels.len() {
            return Err(DmapError::ShapeMismatch(format!(
                "{} instance ids for {} labels",
                instance_ids.len(),
                labels.len()
            )));
        }
        if instance_ids.is_empty() {
            return Err(DmapError::EmptyTestSet);
        }
        let mut seen = HashSet::new();
        if let Some(dup) = instance_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(DmapError::InvalidInput(format!("duplicate instance id `{dup}`")));
        }
        Ok(Self {
            instance_ids,
            labels,
        })
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    /// Fraction correct within each ground-truth unseen class.
    pub per_class_accuracy: BTreeMap<ClassId, f64>,
    /// Unweighted mean of `per_class_accuracy`; the headline number.
    pub mean_per_class_accuracy: f64,
    /// Instance-weighted top-1 accuracy over all evaluated instances.
    pub top1: f64,
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub candidates: Vec<ClassId>,
    /// `confusion[i][j]` counts instances of candidate `i` predicted as `j`.
    pub confusion: Vec<Vec<u64>>,
    pub num_instances: usize,
}

impl EvalReport {
    /// Confusion matrix as CSV: a header of candidate ids, then one row per
    /// true class.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.candidates {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.candidates.iter().zip(&self.confusion) {
            out.push_str(c);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Position of `target` when candidates are ordered by descending score with
/// ties going to the lower index.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let s_true = scores.clone().nth(target).expect("target in range");
    scores
        .enumerate()
        .filter(|&(c, s)| s > s_true || (s == s_true && c < target))
        .count()
}

/// Scores `prediction` against `truth`.
///
/// In cZSR every ground-truth class must be an unseen candidate; a gZSR
/// prediction is restricted to its unseen candidates first. In gZSR the
/// instance-weighted metrics and the confusion matrix cover every instance,
/// while per-class accuracy covers ground-truth unseen classes only.
pub fn evaluate(
    prediction: &Prediction,
    truth: &GroundTruth,
    mode: Mode,
    ks: &[usize],
) -> Result<EvalReport> {
    let restricted;
    let prediction = match (mode, prediction.mode) {
        (Mode::Czsr, Mode::Gzsr) => {
            restricted = prediction.restrict_to_unseen();
            &restricted
        }
        (Mode::Gzsr, Mode::Czsr) => {
            return Err(DmapError::InvalidInput(
                "a cZSR prediction cannot be evaluated in gZSR mode".into(),
            ))
        }
        _ => prediction,
    };
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(DmapError::InvalidInput(format!("top-k needs k >= 1, got {k}")));
    }

    let candidate_index: HashMap<&str, usize> = prediction
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let instance_index: HashMap<&str, usize> = prediction
        .instance_ids
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let n_cand = prediction.candidates.len();
    let first_unseen = prediction.seen_candidates;

    let mut confusion = vec![vec![0u64; n_cand]; n_cand];
    let mut ranks = Vec::with_capacity(truth.len());
    let mut pred_index: HashMap<&str, usize> = HashMap::new();
    for (id, label) in truth.instance_ids().iter().zip(truth.labels()) {
        let col = *instance_index
            .get(id.as_str())
            .ok_or_else(|| DmapError::MissingInstance(id.clone()))?;
        let t = *candidate_index
            .get(label.as_str())
            .ok_or_else(|| DmapError::UnknownClass(label.clone()))?;
        let predicted = &prediction.predicted[col];
        let p = *pred_index
            .entry(predicted.as_str())
            .or_insert_with(|| candidate_index[predicted.as_str()]);
        confusion[t][p] += 1;
        ranks.push((t, rank_of(prediction.scores.column(col).iter().copied(), t)));
    }

    let n = ranks.len() as f64;
    let top1 = ranks.iter().filter(|&&(_, r)| r == 0).count() as f64 / n;
    let top_k_accuracy = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&(_, r)| r < k).count() as f64 / n))
        .collect();

    let mut per_class_accuracy = BTreeMap::new();
    for (t, row) in confusion.iter().enumerate().skip(first_unseen) {
        let total: u64 = row.iter().sum();
        if total > 0 {
            per_class_accuracy.insert(
                prediction.candidates[t].clone(),
                row[t] as f64 / total as f64,
            );
        }
    }
    if per_class_accuracy.is_empty() {
        return Err(DmapError::InvalidInput(
            "ground truth contains no unseen-class instances".into(),
        ));
    }
    let mean_per_class_accuracy =
        per_class_accuracy.values().sum::<f64>() / per_class_accuracy.len() as f64;

    Ok(EvalReport {
        mode,
        per_class_accuracy,
        mean_per_class_accuracy,
        top1,
        top_k_accuracy,
        candidates: prediction.candidates.clone(),
        confusion,
        num_instances: ranks.len(),
    })
}
