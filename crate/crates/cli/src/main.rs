use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dmap_core::consistency::consistency_report;
use dmap_core::io::{self, index_ids, RunConfig};
use dmap_core::pipeline::{self, PipelineData};
use dmap_core::{
    class_mean_prototypes, evaluate, generate, infer_inductive, infer_transductive, preinspect,
    train, ClassSplit, DMatrix, DmapError, EmbeddingMatrix, Epsilon, FeatureMatrix, GroundTruth,
    LabeledDataset, MapObjective, Mode, Result, SynthConfig,
};

#[derive(Parser)]
#[command(name = "dmap", version, about = "Zero-shot recognition with dual visual-semantic mapping paths")]
struct Cli {
    /// Worker threads for parallel kernels (default: all cores). Results do
    /// not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find unseen classes whose embeddings project to the same point of the
    /// seen span.
    Preinspect(PreinspectArgs),
    /// Consistency of inter-class relationships between feature and semantic
    /// space.
    Cm(CmArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score test instances against unseen (and optionally seen) classes.
    Predict(PredictArgs),
    /// Evaluate a prediction file against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train, predict and evaluate for every iteration count.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct EmbeddingArgs {
    /// Embedding matrix, one column per class.
    #[arg(long)]
    embeddings: PathBuf,
    /// Split file (JSON with `seen` and `unseen` class lists).
    #[arg(long)]
    split: PathBuf,
    /// Column names of the embedding matrix, one per line (default: seen
    /// classes then unseen classes, in split order).
    #[arg(long)]
    classes: Option<PathBuf>,
}

impl EmbeddingArgs {
    fn load(&self) -> Result<(ClassSplit, EmbeddingMatrix)> {
        let split = io::load_split(&self.split)?;
        let emb = io::load_embeddings(&self.embeddings, &split, self.classes.as_deref())?;
        Ok((split, emb))
    }
}

#[derive(Args)]
struct PreinspectArgs {
    /// Seen-class embeddings (p × k).
    #[arg(long, requires = "kunseen", conflicts_with = "embeddings")]
    kseen: Option<PathBuf>,
    /// Unseen-class embeddings (p × l).
    #[arg(long)]
    kunseen: Option<PathBuf>,
    /// Names of the unseen columns, one per line (default: column indices).
    #[arg(long, requires = "kunseen")]
    unseen_classes: Option<PathBuf>,
    /// Full embedding matrix, used together with --split.
    #[arg(long, requires = "split")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, requires = "embeddings")]
    classes: Option<PathBuf>,
    /// Absolute distance threshold (default: 1e-6 × median pairwise distance).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CmArgs {
    /// Feature matrices; instances of seen and unseen classes may be spread
    /// over several files.
    #[arg(long, num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    /// Label files matching --features one to one.
    #[arg(long, num_args = 1.., required = true)]
    labels: Vec<PathBuf>,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override the run configuration file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Neighbours averaged per prototype.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    train_max_iter: Option<usize>,
    #[arg(long)]
    test_max_iter: Option<usize>,
    #[arg(long)]
    convergence_tol: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Scale features and embeddings to unit norm.
    #[arg(long)]
    normalize: Option<bool>,
    /// Subtract the training feature mean.
    #[arg(long)]
    center: Option<bool>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            // validated after flags are applied
            Some(p) => io::read_json::<RunConfig>(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v.into(); })*
            };
        }
        set!(lambda, gamma, eta, m, train_max_iter, test_max_iter, convergence_tol, normalize, center);
        if let Some(mode) = self.mode {
            cfg.mode = mode.into();
        }
        if let Some(obj) = self.objective {
            cfg.objective = obj.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Czsr,
    Gzsr,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Czsr => Mode::Czsr,
            ModeArg::Gzsr => Mode::Gzsr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    // same spelling as the JSON config
    #[value(name = "label_scores", alias = "label-scores")]
    LabelScores,
    #[value(name = "embedding_regression", alias = "embedding-regression")]
    EmbeddingRegression,
}

impl From<ObjectiveArg> for MapObjective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::LabelScores => MapObjective::LabelScores,
            ObjectiveArg::EmbeddingRegression => MapObjective::EmbeddingRegression,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    model_dir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    test_features: PathBuf,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Score against the given embeddings instead of refined prototypes.
    #[arg(long)]
    inductive: bool,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the refined unseen prototypes (default: next to --out,
    /// with extension `.k_tilde_u.mat`).
    #[arg(long)]
    prototypes_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth class of each test instance, one per line.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    topk: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the confusion matrix as CSV.
    #[arg(long)]
    confusion_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Noise-free, exactly consistent relationships.
    Exact,
    /// Two indistinguishable unseen pairs.
    Defects,
    /// Noisy instances with distorted unseen prototypes.
    Noisy,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator configuration (JSON); fields left out take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out_dir: PathBuf,
}

fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let m = io::load_matrix(path)?;
    let ids = index_ids(m.ncols());
    FeatureMatrix::new(m, ids)
}

fn run_preinspect(args: &PreinspectArgs) -> Result<()> {
    let (seen, unseen) = match (&args.kseen, &args.kunseen, &args.embeddings, &args.split) {
        (Some(ks), Some(ku), _, _) => {
            let ku = io::load_matrix(ku)?;
            let ids = match &args.unseen_classes {
                Some(p) => io::load_labels(p)?,
                None => index_ids(ku.ncols()),
            };
            (io::load_matrix(ks)?, EmbeddingMatrix::new(ku, ids)?)
        }
        (_, _, Some(emb), Some(split)) => {
            let split = io::load_split(split)?;
            let all = io::load_embeddings(emb, &split, args.classes.as_deref())?;
            (all.select(split.seen())?.data().clone(), all.select(split.unseen())?)
        }
        _ => {
            return Err(DmapError::InvalidInput(
                "give either --kseen and --kunseen, or --embeddings and --split".into(),
            ))
        }
    };
    let epsilon = args.epsilon.map(Epsilon::Absolute).unwrap_or_default();
    let report = preinspect(&seen, &unseen, epsilon)?;
    info!("{} pair(s) flagged at epsilon {:e}", report.flagged_pairs.len(), report.epsilon);
    io::write_json(&args.out, &report)
}

fn run_cm(args: &CmArgs) -> Result<()> {
    if args.features.len() != args.labels.len() {
        return Err(DmapError::InvalidInput(format!(
            "{} feature files but {} label files",
            args.features.len(),
            args.labels.len()
        )));
    }
    let mut columns = Vec::new();
    let mut labels = Vec::new();
    for (f, l) in args.features.iter().zip(&args.labels) {
        let m = io::load_matrix(f)?;
        let l = io::load_labels(l)?;
        if l.len() != m.ncols() {
            return Err(DmapError::ShapeMismatch(format!(
                "{}: {} labels for {} instances",
                f.display(),
                l.len(),
                m.ncols()
            )));
        }
        columns.extend(m.column_iter().map(|c| c.clone_owned()));
        labels.extend(l);
    }
    if columns.is_empty() {
        return Err(DmapError::EmptyTrainingSet);
    }
    let dims: Vec<usize> = columns.iter().map(|c| c.len()).collect();
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(DmapError::DimensionMismatch("feature files differ in dimension".into()));
    }
    let features = FeatureMatrix::new(DMatrix::from_columns(&columns), index_ids(columns.len()))?;
    let (split, emb) = args.embeddings.load()?;
    let seen = class_mean_prototypes(&features, &labels, split.seen())?;
    let unseen = class_mean_prototypes(&features, &labels, split.unseen())?;
    let lambda = args.lambda.unwrap_or(dmap_core::consistency::DEFAULT_LAMBDA);
    let report = consistency_report(
        &seen,
        &unseen,
        &emb.select(split.seen())?,
        &emb.select(split.unseen())?,
        lambda,
    )?;
    info!("CM = {}, irc_gap = {}", report.cm, report.irc_gap);
    io::write_json(&args.out, &report)
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let (split, emb) = args.embeddings.load()?;
    let dataset = LabeledDataset::new(
        load_features(&args.features)?,
        io::load_labels(&args.labels)?,
        split,
        emb,
    )?;
    let model = train(&dataset, &cfg.dmap_config())?;
    info!("trained with {} refinement round(s)", model.train_iterations_run);
    io::save_model(&args.model_dir, &model)
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let model = io::load_model(&args.model_dir)?;
    let (split, emb) = args.embeddings.load()?;
    if split.seen() != model.seen_classes() {
        return Err(DmapError::InvalidInput(
            "split's seen classes differ from the model's".into(),
        ));
    }
    let x = load_features(&args.test_features)?;
    let k_unseen = emb.select(split.unseen())?;
    if args.inductive {
        let k_seen = emb.select(split.seen())?;
        let pred = infer_inductive(&model, &x, &k_unseen, &k_seen, cfg.mode)?;
        return io::save_prediction(&args.out, &pred);
    }
    let (pred, protos) = infer_transductive(&model, &x, &k_unseen, cfg.mode, cfg.test_max_iter)?;
    let protos_path = args
        .prototypes_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("k_tilde_u.mat"));
    io::save_prediction(&args.out, &pred)?;
    io::save_matrix(protos_path, protos.data())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let pred = io::load_prediction(&args.pred)?;
    let labels = io::load_labels(&args.truth)?;
    let truth = GroundTruth::new(index_ids(labels.len()), labels)?;
    let mode = args.mode.map(Mode::from).unwrap_or(pred.mode);
    let report = evaluate(&pred, &truth, mode, &args.topk)?;
    info!("mean per-class accuracy {:.4}", report.mean_per_class_accuracy);
    io::write_json(&args.out, &report)?;
    if let Some(p) = &args.confusion_csv {
        io::write_text(p, &report.confusion_csv())?;
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(0);
    let mut cfg = match (&args.config, args.preset) {
        (Some(p), _) => io::read_json::<SynthConfig>(p)?,
        (None, Some(Preset::Exact)) | (None, None) => SynthConfig::exact(seed),
        (None, Some(Preset::Defects)) => SynthConfig::with_defects(2, seed),
        (None, Some(Preset::Noisy)) => SynthConfig::noisy(0.5, seed),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let data = generate(&cfg)?;
    io::save_dataset(&args.out_dir, &data, &cfg)
}

fn run_pipeline(args: &PipelineArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let data = PipelineData::load(&args.data_dir)?;
    let result = pipeline::run_to_dir(&cfg, &data, &args.out_dir)?;
    for row in &result.rows {
        info!(
            "{} iteration {}: {:.4}",
            row.mode.as_str(),
            row.iteration,
            row.mean_per_class_acc
        );
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preinspect(a) => run_preinspect(a),
        Command::Cm(a) => run_cm(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Pipeline(a) => run_pipeline(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", serde_json::json!({"error": "InvalidInput", "message": e.to_string()}));
            return ExitCode::from(2);
        }
    }

    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
