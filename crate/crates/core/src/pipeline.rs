//! End-to-end train → predict → evaluate over a dataset directory.
//!
//! Outputs in the run directory:
//!
//! * `summary.csv` — `iteration,mode,mean_per_class_acc,top1,cm,irc_gap`, one
//!   row per mode and iteration count. Iteration 0 is inductive inference;
//!   iteration `t ≥ 1` is transductive inference with `t` refinement rounds.
//! * `cm.json` — consistency of the class-mean prototypes.
//! * `eval/<mode>_iter<t>.json` and `eval/<mode>_iter<t>_confusion.csv`.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use serde::Serialize;

use crate::consistency::{consistency_report, ConsistencyReport};
use crate::dmap::{infer_inductive, infer_transductive_history, train, DmapConfig, DmapModel, Mode};
use crate::error::{DmapError, Result};
use crate::eval::{evaluate, EvalReport, GroundTruth};
use crate::io::{self, index_ids, DataDir, RunConfig};
use crate::model::{class_mean_prototypes, ClassId, ClassSplit, EmbeddingMatrix, FeatureMatrix, LabeledDataset};

/// Everything a run needs, loaded into memory.
#[derive(Debug, Clone)]
pub struct PipelineData {
    pub train: LabeledDataset,
    pub test_features: FeatureMatrix,
    pub test_labels: Vec<ClassId>,
}

impl PipelineData {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let layout = DataDir::new(dir.as_ref());
        let split = io::load_split(layout.split())?;
        let classes = layout.classes();
        let embeddings = io::load_embeddings(
            DataDir::resolve(layout.embeddings()),
            &split,
            classes.exists().then_some(classes.as_path()),
        )?;
        let train_x = io::load_matrix(DataDir::resolve(layout.train_features()))?;
        let test_x = io::load_matrix(DataDir::resolve(layout.test_features()))?;
        let train_ids = index_ids(train_x.ncols());
        let test_ids = index_ids(test_x.ncols());
        let train = LabeledDataset::new(
            FeatureMatrix::new(train_x, train_ids)?,
            io::load_labels(layout.train_labels())?,
            split,
            embeddings,
        )?;
        Self::new(train, FeatureMatrix::new(test_x, test_ids)?, io::load_labels(layout.test_labels())?)
    }

    pub fn new(train: LabeledDataset, test_features: FeatureMatrix, test_labels: Vec<ClassId>) -> Result<Self> {
        if test_labels.len() != test_features.len() {
            return Err(DmapError::ShapeMismatch(format!(
                "{} test labels for {} test instances",
                test_labels.len(),
                test_features.len()
            )));
        }
        if test_features.dim() != train.features.dim() {
            return Err(DmapError::DimensionMismatch(format!(
                "train features have dimension {}, test features {}",
                train.features.dim(),
                test_features.dim()
            )));
        }
        Ok(Self {
            train,
            test_features,
            test_labels,
        })
    }

    pub fn split(&self) -> &ClassSplit {
        &self.train.split
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        GroundTruth::new(self.test_features.instance_ids().to_vec(), self.test_labels.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub iteration: usize,
    pub mode: Mode,
    pub mean_per_class_acc: f64,
    pub top1: f64,
    pub cm: f64,
    pub irc_gap: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub consistency: ConsistencyReport,
    pub rows: Vec<SummaryRow>,
    /// Reports keyed like the rows.
    pub reports: Vec<EvalReport>,
}

impl PipelineResult {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("iteration,mode,mean_per_class_acc,top1,cm,irc_gap\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?}",
                r.iteration,
                r.mode.as_str(),
                r.mean_per_class_acc,
                r.top1,
                r.cm,
                r.irc_gap
            );
        }
        out
    }

    pub fn row(&self, mode: Mode, iteration: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.mode == mode && r.iteration == iteration)
    }
}

/// Consistency of class-mean prototypes: seen from the training set, unseen
/// from the labelled test set.
pub fn class_mean_consistency(data: &PipelineData, lambda: f64) -> Result<ConsistencyReport> {
    let split = data.split();
    let seen = class_mean_prototypes(&data.train.features, &data.train.labels, split.seen())?;
    let unseen = class_mean_prototypes(&data.test_features, &data.test_labels, split.unseen())?;
    consistency_report(
        &seen,
        &unseen,
        &data.train.seen_embeddings(),
        &data.train.unseen_embeddings(),
        lambda,
    )
}

/// Runs every mode and iteration count without touching the filesystem.
pub fn run(config: &RunConfig, data: &PipelineData) -> Result<PipelineResult> {
    config.validate()?;
    let base = config.dmap_config();
    let truth = data.ground_truth()?;
    let consistency = class_mean_consistency(data, config.lambda)?;
    info!("class-mean CM = {:.6}, irc_gap = {:.6}", consistency.cm, consistency.irc_gap);

    let k_seen: EmbeddingMatrix = data.train.seen_embeddings();
    let k_unseen: EmbeddingMatrix = data.train.unseen_embeddings();
    let modes = [Mode::Czsr, Mode::Gzsr];
    let iterations = config.test_max_iter;

    // With coupling, row t uses a model trained with t refinement rounds;
    // otherwise one model serves every row.
    let models: Vec<DmapModel> = if config.couple_iterations {
        (0..=iterations)
            .map(|t| {
                let cfg = DmapConfig {
                    train_max_iter: t,
                    ..base.clone()
                };
                train(&data.train, &cfg)
            })
            .collect::<Result<_>>()?
    } else {
        vec![train(&data.train, &base)?]
    };

    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for mode in modes {
        let mut per_iteration: Vec<EvalReport> = Vec::with_capacity(iterations + 1);
        let inductive = infer_inductive(&models[0], &data.test_features, &k_unseen, &k_seen, mode)?;
        per_iteration.push(evaluate(&inductive, &truth, mode, &config.topk)?);
        if models.len() == 1 {
            if iterations > 0 {
                let history = infer_transductive_history(
                    &models[0],
                    &data.test_features,
                    &k_unseen,
                    mode,
                    iterations,
                )?;
                for step in &history {
                    per_iteration.push(evaluate(&step.prediction, &truth, mode, &config.topk)?);
                }
            }
        } else {
            for (t, model) in models.iter().enumerate().skip(1) {
                let step = infer_transductive_history(model, &data.test_features, &k_unseen, mode, t)?
                    .pop()
                    .expect("t >= 1");
                per_iteration.push(evaluate(&step.prediction, &truth, mode, &config.topk)?);
            }
        }
        for (t, report) in per_iteration.into_iter().enumerate() {
            info!(
                "{} iteration {t}: mean per-class accuracy {:.4}",
                mode.as_str(),
                report.mean_per_class_accuracy
            );
            rows.push(SummaryRow {
                iteration: t,
                mode,
                mean_per_class_acc: report.mean_per_class_accuracy,
                top1: report.top1,
                cm: consistency.cm,
                irc_gap: consistency.irc_gap,
            });
            reports.push(report);
        }
    }
    Ok(PipelineResult {
        consistency,
        rows,
        reports,
    })
}

/// Runs the pipeline and writes its outputs under `out_dir`.
pub fn run_to_dir(config: &RunConfig, data: &PipelineData, out_dir: impl AsRef<Path>) -> Result<PipelineResult> {
    let result = run(config, data)?;
    let out = out_dir.as_ref();
    io::write_text(out.join("summary.csv"), &result.summary_csv())?;
    io::write_json(out.join("cm.json"), &result.consistency)?;
    for (row, report) in result.rows.iter().zip(&result.reports) {
        let stem = format!("{}_iter{}", row.mode.as_str(), row.iteration);
        io::write_json(out.join("eval").join(format!("{stem}.json")), report)?;
        io::write_text(
            out.join("eval").join(format!("{stem}_confusion.csv")),
            &report.confusion_csv(),
        )?;
    }
    Ok(result)
}
