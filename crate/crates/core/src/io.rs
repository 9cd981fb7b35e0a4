//! On-disk formats: text matrices, label lists, split/config JSON, model
//! directories and prediction files.
//!
//! A matrix file is a header line `dmap-matrix 1 <rows> <cols>` followed by one
//! line per row of space-separated floats. Values are printed in Rust's
//! shortest round-trip form, so `load(save(m)) == m` bit for bit. Paths ending
//! in `.gz` are transparently gzip-compressed.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::consistency::Epsilon;
use crate::dmap::{DmapConfig, DmapModel, MapObjective, Mode, Prediction};
use crate::error::{DmapError, Result};
use crate::linmap::MapMatrix;
use crate::model::{ClassId, ClassSplit, EmbeddingMatrix, PrototypeSet, PrototypeSource};
use crate::synth::SyntheticData;

const MAGIC: &str = "dmap-matrix";
const VERSION: &str = "1";

fn io_context(path: &Path) -> impl FnOnce(io::Error) -> DmapError + '_ {
    move |e| DmapError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn open(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path).map_err(io_context(path))?;
    Ok(if is_gz(path) {
        Box::new(BufReader::new(GzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

fn create(path: &Path) -> Result<Box<dyn Write>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_context(parent))?;
    }
    let file = File::create(path).map_err(io_context(path))?;
    Ok(if is_gz(path) {
        // the default header has mtime 0, so output is reproducible
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    })
}

pub fn write_matrix<W: Write>(mut out: W, m: &DMatrix<f64>) -> io::Result<()> {
    writeln!(out, "{MAGIC} {VERSION} {} {}", m.nrows(), m.ncols())?;
    let mut line = String::new();
    for row in m.row_iter() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            // Debug is the shortest representation that parses back exactly.
            line.push_str(&format!("{v:?}"));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> DmapError {
    DmapError::Parse {
        path: path.display().to_string(),
        line,
        column,
        message: message.into(),
    }
}

/// Whitespace-separated tokens with their 1-based character columns.
fn tokens(line: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut rest = line;
    let mut offset = 0;
    std::iter::from_fn(move || {
        let start = rest.find(|c: char| !c.is_whitespace())?;
        let tail = &rest[start..];
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        let column = line[..offset + start].chars().count() + 1;
        let tok = &tail[..len];
        offset += start + len;
        rest = &tail[len..];
        Some((column, tok))
    })
}

/// Parses a matrix file body; `path` is used only in error messages.
pub fn read_matrix<R: BufRead>(input: R, path: &Path) -> Result<DMatrix<f64>> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(io_context(path))?,
        None => return Err(parse_error(path, 1, 1, "empty file")),
    };
    let head: Vec<(usize, &str)> = tokens(&header).collect();
    if head.len() != 4 || head[0].1 != MAGIC {
        return Err(parse_error(
            path,
            1,
            1,
            format!("expected header `{MAGIC} {VERSION} <rows> <cols>`"),
        ));
    }
    if head[1].1 != VERSION {
        return Err(parse_error(path, 1, head[1].0, format!("unsupported version `{}`", head[1].1)));
    }
    let dim = |(col, tok): (usize, &str)| {
        tok.parse::<usize>()
            .map_err(|_| parse_error(path, 1, col, format!("invalid dimension `{tok}`")))
    };
    let rows = dim(head[2])?;
    let cols = dim(head[3])?;

    let mut data = Vec::with_capacity(rows * cols);
    let mut body_rows = 0;
    let mut trailing_blank = false;
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(io_context(path))?;
        let line_no = idx + 2;
        if line.trim().is_empty() {
            // allow trailing blank lines, and empty rows when cols == 0
            if cols == 0 && body_rows < rows && !trailing_blank {
                body_rows += 1;
                continue;
            }
            trailing_blank = true;
            continue;
        }
        if trailing_blank {
            return Err(parse_error(path, line_no, 1, "data after blank line"));
        }
        body_rows += 1;
        if body_rows > rows {
            return Err(DmapError::ShapeMismatch(format!(
                "{}: header declares {rows} rows, body has more",
                path.display()
            )));
        }
        let mut count = 0;
        for (col, tok) in tokens(&line) {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_error(path, line_no, col, format!("invalid number `{tok}`")))?;
            data.push(v);
            count += 1;
        }
        if count != cols {
            return Err(DmapError::ShapeMismatch(format!(
                "{}: line {line_no} has {count} values, header declares {cols} columns",
                path.display()
            )));
        }
    }
    if body_rows != rows {
        return Err(DmapError::ShapeMismatch(format!(
            "{}: header declares {rows} rows, body has {body_rows}",
            path.display()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    read_matrix(open(path)?, path)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    if is_gz(path) {
        let file = File::create(path).map_err(io_context(path))?;
        let mut gz = flate2::GzBuilder::new()
            .mtime(0)
            .write(BufWriter::new(file), Compression::default());
        write_matrix(&mut gz, m).map_err(io_context(path))?;
        gz.finish().map_err(io_context(path))?.flush().map_err(io_context(path))?;
        return Ok(());
    }
    write_matrix(create(path)?, m).map_err(io_context(path))
}

/// One class id per non-empty line.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<ClassId>> {
    let path = path.as_ref();
    let mut labels = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_context(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.split_whitespace().count() != 1 {
            return Err(parse_error(path, idx + 1, 1, "expected one class id per line"));
        }
        labels.push(trimmed.to_string());
    }
    Ok(labels)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[ClassId]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for l in labels {
        writeln!(out, "{l}").map_err(io_context(path))?;
    }
    out.flush().map_err(io_context(path))
}

/// Instance ids used for matrix-file features: the 0-based column index.
pub fn index_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(io_context(path))?;
    serde_json::from_str(&text).map_err(|e| {
        parse_error(path, e.line(), e.column(), e.to_string())
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut out = create(path)?;
    out.write_all(text.as_bytes()).map_err(io_context(path))?;
    out.flush().map_err(io_context(path))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    out.write_all(text.as_bytes()).map_err(io_context(path))?;
    out.flush().map_err(io_context(path))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    seen: Vec<ClassId>,
    unseen: Vec<ClassId>,
}

pub fn load_split(path: impl AsRef<Path>) -> Result<ClassSplit> {
    let raw: SplitFile = read_json(path)?;
    ClassSplit::new(raw.seen, raw.unseen)
}

pub fn save_split(path: impl AsRef<Path>, split: &ClassSplit) -> Result<()> {
    write_json(path, split)
}

/// Embedding matrix whose columns are named by `classes`, or by
/// `split.seen` followed by `split.unseen` when no class list is given.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    split: &ClassSplit,
    classes: Option<&Path>,
) -> Result<EmbeddingMatrix> {
    let data = load_matrix(path)?;
    let ids = match classes {
        Some(p) => load_labels(p)?,
        None => split.all(),
    };
    EmbeddingMatrix::new(data, ids)
}

/// Run configuration; every field is optional in the JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub m: usize,
    pub train_max_iter: usize,
    pub test_max_iter: usize,
    pub convergence_tol: f64,
    pub mode: Mode,
    pub normalize: bool,
    pub center: bool,
    pub objective: MapObjective,
    /// Absolute pre-inspection threshold; the relative default applies when
    /// absent.
    pub epsilon: Option<f64>,
    pub seed: u64,
    /// Pipeline: train each DMaP-T row with as many refinement rounds as it
    /// runs test iterations.
    pub couple_iterations: bool,
    pub topk: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DmapConfig::default();
        Self {
            lambda: d.lambda,
            gamma: d.gamma,
            eta: d.eta,
            m: d.m,
            train_max_iter: d.train_max_iter,
            test_max_iter: d.test_max_iter,
            convergence_tol: d.convergence_tol,
            mode: d.mode,
            normalize: d.normalize,
            center: d.center,
            objective: d.objective,
            epsilon: None,
            seed: 0,
            couple_iterations: true,
            topk: vec![1, 5],
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dmap_config().validate()?;
        if let Some(e) = self.epsilon {
            if !(e >= 0.0) {
                return Err(DmapError::InvalidInput(format!(
                    "epsilon must be non-negative, got {e}"
                )));
            }
        }
        if self.topk.contains(&0) {
            return Err(DmapError::InvalidInput("topk entries must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dmap_config(&self) -> DmapConfig {
        DmapConfig {
            m: self.m,
            lambda: self.lambda,
            gamma: self.gamma,
            eta: self.eta,
            train_max_iter: self.train_max_iter,
            test_max_iter: self.test_max_iter,
            convergence_tol: self.convergence_tol,
            mode: self.mode,
            normalize: self.normalize,
            center: self.center,
            objective: self.objective,
        }
    }

    pub fn epsilon(&self) -> Epsilon {
        self.epsilon.map(Epsilon::Absolute).unwrap_or_default()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    seen_classes: Vec<ClassId>,
    train_iterations_run: usize,
    config: DmapConfig,
    f_s_gamma: f64,
    f_s_eta: f64,
    f_tilde_gamma: f64,
    f_tilde_eta: f64,
    feature_offset: Option<Vec<f64>>,
}

pub fn save_model(dir: impl AsRef<Path>, model: &DmapModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_context(dir))?;
    save_matrix(dir.join("f_s.mat"), model.f_s.data())?;
    save_matrix(dir.join("f_tilde.mat"), model.f_tilde.data())?;
    save_matrix(dir.join("k_tilde_s.mat"), model.k_tilde_s.data())?;
    let meta = ModelMeta {
        seen_classes: model.seen_classes().to_vec(),
        train_iterations_run: model.train_iterations_run,
        config: model.config.clone(),
        f_s_gamma: model.f_s.gamma(),
        f_s_eta: model.f_s.eta(),
        f_tilde_gamma: model.f_tilde.gamma(),
        f_tilde_eta: model.f_tilde.eta(),
        feature_offset: model.feature_offset.as_ref().map(|v| v.iter().copied().collect()),
    };
    write_json(dir.join("model.json"), &meta)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<DmapModel> {
    let dir = dir.as_ref();
    let meta: ModelMeta = read_json(dir.join("model.json"))?;
    let f_s = MapMatrix::new(load_matrix(dir.join("f_s.mat"))?, meta.f_s_gamma, meta.f_s_eta)?;
    let f_tilde = MapMatrix::new(
        load_matrix(dir.join("f_tilde.mat"))?,
        meta.f_tilde_gamma,
        meta.f_tilde_eta,
    )?;
    let k_tilde_s = PrototypeSet::new(
        load_matrix(dir.join("k_tilde_s.mat"))?,
        meta.seen_classes,
        PrototypeSource::KnnAverage,
    )?;
    let d = f_s.input_dim();
    if f_tilde.input_dim() != d || f_tilde.output_dim() != d || k_tilde_s.dim() != d {
        return Err(DmapError::ShapeMismatch(format!(
            "{}: model matrices disagree on the feature dimension",
            dir.display()
        )));
    }
    let feature_offset = match meta.feature_offset {
        Some(v) if v.len() != d => {
            return Err(DmapError::ShapeMismatch(format!(
                "feature offset has length {}, features have dimension {d}",
                v.len()
            )))
        }
        other => other.map(DVector::from_vec),
    };
    meta.config.validate()?;
    Ok(DmapModel {
        f_s,
        f_tilde,
        k_tilde_s,
        train_iterations_run: meta.train_iterations_run,
        config: meta.config,
        feature_offset,
    })
}

/// JSON form of a [`Prediction`]; `scores[c][i]` is candidate `c` on
/// instance `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub mode: Mode,
    pub instance_ids: Vec<String>,
    pub candidates: Vec<ClassId>,
    pub seen_candidates: usize,
    pub predicted: Vec<ClassId>,
    pub scores: Vec<Vec<f64>>,
}

impl From<&Prediction> for PredictionFile {
    fn from(p: &Prediction) -> Self {
        Self {
            mode: p.mode,
            instance_ids: p.instance_ids.clone(),
            candidates: p.candidates.clone(),
            seen_candidates: p.seen_candidates,
            predicted: p.predicted.clone(),
            scores: p.scores.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl PredictionFile {
    /// Rebuilds the prediction; decisions are re-derived from the scores.
    pub fn into_prediction(self) -> Result<Prediction> {
        let rows = self.scores.len();
        let cols = self.instance_ids.len();
        if let Some(r) = self.scores.iter().find(|r| r.len() != cols) {
            return Err(DmapError::ShapeMismatch(format!(
                "score row has {} entries for {cols} instances",
                r.len()
            )));
        }
        let flat: Vec<f64> = self.scores.into_iter().flatten().collect();
        let scores = DMatrix::from_row_slice(rows, cols, &flat);
        Prediction::new(self.mode, self.instance_ids, self.candidates, self.seen_candidates, scores)
    }
}

pub fn save_prediction(path: impl AsRef<Path>, p: &Prediction) -> Result<()> {
    write_json(path, &PredictionFile::from(p))
}

pub fn load_prediction(path: impl AsRef<Path>) -> Result<Prediction> {
    read_json::<PredictionFile>(path)?.into_prediction()
}

/// File names inside a dataset directory.
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_features(&self) -> PathBuf {
        self.root.join("train_features.mat")
    }

    pub fn train_labels(&self) -> PathBuf {
        self.root.join("train_labels.txt")
    }

    pub fn test_features(&self) -> PathBuf {
        self.root.join("test_features.mat")
    }

    pub fn test_labels(&self) -> PathBuf {
        self.root.join("test_labels.txt")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.mat")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    /// Optional column names for `embeddings.mat`.
    pub fn classes(&self) -> PathBuf {
        self.root.join("classes.txt")
    }

    /// Matrix files may also be stored gzip-compressed.
    pub fn resolve(path: PathBuf) -> PathBuf {
        if path.exists() {
            return path;
        }
        let mut gz = path.clone().into_os_string();
        gz.push(".gz");
        let gz = PathBuf::from(gz);
        if gz.exists() {
            gz
        } else {
            path
        }
    }
}

#[derive(Serialize)]
struct SynthMeta<'a> {
    config: &'a crate::synth::SynthConfig,
    defect_pairs: &'a [(ClassId, ClassId)],
}

/// Writes a synthetic dataset in the data-directory layout, plus
/// `synth.json` describing how it was generated.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    data: &SyntheticData,
    config: &crate::synth::SynthConfig,
) -> Result<()> {
    let layout = DataDir::new(dir.as_ref());
    fs::create_dir_all(dir.as_ref()).map_err(io_context(dir.as_ref()))?;
    save_matrix(layout.train_features(), data.train.features.data())?;
    save_labels(layout.train_labels(), &data.train.labels)?;
    save_matrix(layout.test_features(), data.test_features.data())?;
    save_labels(layout.test_labels(), &data.test_labels)?;
    save_matrix(layout.embeddings(), data.embeddings.data())?;
    save_labels(layout.classes(), data.embeddings.class_ids())?;
    save_split(layout.split(), &data.train.split)?;
    write_json(
        dir.as_ref().join("synth.json"),
        &SynthMeta {
            config,
            defect_pairs: &data.defect_pairs,
        },
    )
}
