//! Subcommands of the `phaseseg` binary.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use phaseseg::autodiff::write_checkpoint;
use phaseseg::feature_store::{
    generate_synthetic, interpolate_to_full_rate, read_cache, read_labels, read_vocabulary, reconcile_lengths,
    write_cache, write_label_csv, write_vocabulary, CacheError, LabelError, SynthConfig,
};
use phaseseg::metrics::{aggregate, summarize, EvalVideo, FoldReport, MetricOptions, StudyReport};
use phaseseg::mstcn::{ModelConfig, ModelParams};
use phaseseg::ribbon::RibbonRender;
use phaseseg::splits::{stratified_kfold, DatasetManifest, FoldSpec, ManifestEntry, SplitError};
use phaseseg::training::{dump_predictions, read_prediction, train_fold_with, TrainError};
use phaseseg::{Execution, TrainConfig, Video};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("fold index {index} out of range for {folds} folds")]
    FoldOutOfRange { index: usize, folds: usize },
    #[error("video {video}: prediction has {predicted} frames but labels have {labels}")]
    LengthMismatch {
        video: String,
        predicted: usize,
        labels: usize,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    /// Process exit status for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 3,
            CliError::Config { .. } => 4,
            CliError::FoldOutOfRange { .. } => 5,
            CliError::LengthMismatch { .. } => 6,
            CliError::Input(_) => 7,
            CliError::Io { .. } => 8,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, source: io::Error) -> CliError {
    if source.kind() == io::ErrorKind::NotFound {
        CliError::MissingFile(path.to_path_buf())
    } else {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::Io { path, source } => io_error(&path, source),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::Io { path, source } => io_error(&path, source),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::Io { path, source } => io_error(&path, source),
            SplitError::MissingFile { path, .. } => CliError::MissingFile(path),
            SplitError::FoldOutOfRange { index, folds } => CliError::FoldOutOfRange { index, folds },
            SplitError::Json { path, source } => CliError::Config {
                path,
                reason: source.to_string(),
            },
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { path, source } => io_error(&path, source),
            TrainError::Config(reason) => CliError::Config {
                path: PathBuf::from("<train>"),
                reason,
            },
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "phaseseg", version, about = "Cached-feature surgical phase segmentation")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: caches, labels, vocabulary and manifest.
    Synth(SynthArgs),
    /// Build stratified folds from a dataset manifest.
    Split(SplitArgs),
    /// Train one fold and dump predictions for its held-out videos.
    Train(TrainArgs),
    /// Score one fold's prediction dumps.
    Eval(EvalArgs),
    /// Merge fold reports into a mean ± std table.
    Report(ReportArgs),
    /// Render ground truth and predictions as an SVG ribbon.
    Ribbon(RibbonArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding the feature caches, overriding manifest paths.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    /// Directory holding the label files, overriding manifest paths.
    #[arg(long)]
    pub labels_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output FoldSpec JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long)]
    pub fold: usize,
    /// Run directory for checkpoint, manifests and prediction dumps.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long)]
    pub fold: usize,
    /// Directory of `<video>.pspd` dumps.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Class indices left out of class averages and segment metrics.
    #[arg(long, value_delimiter = ',')]
    pub metrics_exclude: Option<Vec<usize>>,
    /// Output FoldReport JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// FoldReport JSON files.
    #[arg(required = true)]
    pub folds: Vec<PathBuf>,
    /// Output StudyReport JSON; the table is written next to it as `.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RibbonArgs {
    /// Ground-truth label file (CSV or segments JSON).
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub vocabulary: PathBuf,
    /// Prediction dumps, one band each.
    #[arg(long = "predictions", num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub px_per_frame: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything a run can be configured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub folds: usize,
    pub split_seed: u64,
    pub synth: SynthConfig,
    /// Overrides applied on top of the standard head for the data's class
    /// count and feature dimension.
    pub model: Map<String, Value>,
    pub train: TrainConfig,
    pub metrics_exclude: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            split_seed: 0,
            synth: SynthConfig::default(),
            model: Map::new(),
            train: TrainConfig::default(),
            metrics_exclude: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(args: &ConfigArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            None => RunConfig::default(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config {
                    path: path.clone(),
                    reason: e.to_string(),
                })?
            }
        };
        if let Some(seed) = args.seed {
            cfg.split_seed = seed;
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn source(args: &ConfigArgs) -> PathBuf {
        args.config.clone().unwrap_or_else(|| PathBuf::from("<defaults>"))
    }

    /// Standard head for `(classes, feat_dim)` with the `model` overrides.
    pub fn model_config(&self, classes: usize, feat_dim: usize, source: &Path) -> Result<ModelConfig> {
        let bad = |reason: String| CliError::Config {
            path: source.to_path_buf(),
            reason,
        };
        let mut value = serde_json::to_value(ModelConfig::standard(classes, feat_dim)).expect("serializable");
        let obj = value.as_object_mut().expect("object");
        for (k, v) in &self.model {
            if !obj.contains_key(k) {
                return Err(bad(format!("unknown model field `{k}`")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        if cfg.num_classes != classes || cfg.feat_dim != feat_dim {
            return Err(bad(format!(
                "model expects {} classes and {}-d features but the data has {classes} and {feat_dim}",
                cfg.num_classes, cfg.feat_dim
            )));
        }
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Manifest plus the directory its relative paths resolve against.
struct Dataset {
    manifest: DatasetManifest,
    base: PathBuf,
    features_dir: Option<PathBuf>,
    labels_dir: Option<PathBuf>,
    vocabulary: Vec<String>,
}

fn relocate(dir: &Option<PathBuf>, base: &Path, p: &Path) -> PathBuf {
    match dir {
        Some(d) => d.join(p.file_name().unwrap_or(p.as_os_str())),
        None => base.join(p),
    }
}

impl Dataset {
    fn open(args: &DataArgs) -> Result<Self> {
        if !args.manifest.is_file() {
            return Err(CliError::MissingFile(args.manifest.clone()));
        }
        let manifest = DatasetManifest::read(&args.manifest)?;
        let base = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let vocab_path = match &manifest.vocabulary {
            Some(p) => base.join(p),
            None => base.join("vocabulary.json"),
        };
        let vocabulary = read_vocabulary(&vocab_path)?;
        Ok(Self {
            manifest,
            base,
            features_dir: args.features_dir.clone(),
            labels_dir: args.labels_dir.clone(),
            vocabulary,
        })
    }

    fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.manifest
            .get(id)
            .ok_or_else(|| CliError::Input(format!("video {id} is in the fold spec but not in the manifest")))
    }

    fn labels_path(&self, e: &ManifestEntry) -> PathBuf {
        relocate(&self.labels_dir, &self.base, &e.labels)
    }

    /// Reads one video, expanding strided caches to the label frame rate and
    /// truncating both streams to their shared length.
    fn load(&self, id: &str) -> Result<Video> {
        let e = self.entry(id)?;
        let mut feats = read_cache(relocate(&self.features_dir, &self.base, &e.features))?;
        let labels = read_labels(self.labels_path(e), &self.vocabulary)?;
        if feats.stride() > 1 {
            let target = labels.len().max(feats.frame_count());
            feats = interpolate_to_full_rate(&feats, target)?;
        }
        let (features, labels, _) = reconcile_lengths(&feats, &labels)?;
        Ok(Video {
            id: id.to_string(),
            group: e.group.clone(),
            features,
            labels,
        })
    }

    fn load_all(&self, ids: &[String]) -> Result<Vec<Video>> {
        ids.iter().map(|id| self.load(id)).collect()
    }
}

fn execution(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let exec = execution(cli);
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Report(a) => cmd_report(a),
        Command::Ribbon(a) => cmd_ribbon(a),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let videos = generate_synthetic(&cfg.synth).map_err(|e| CliError::Config {
        path: RunConfig::source(&args.config),
        reason: e.to_string(),
    })?;
    let (feat_dir, label_dir) = (args.out.join("features"), args.out.join("labels"));
    create_dir(&feat_dir)?;
    create_dir(&label_dir)?;
    let vocabulary = videos[0].labels.vocabulary().to_vec();
    write_vocabulary(&vocabulary, args.out.join("vocabulary.json"))?;
    let mut entries = Vec::with_capacity(videos.len());
    for v in &videos {
        let features = PathBuf::from("features").join(format!("{}.psfc", v.id));
        let labels = PathBuf::from("labels").join(format!("{}.csv", v.id));
        write_cache(&v.features, args.out.join(&features))?;
        write_label_csv(&v.labels, args.out.join(&labels))?;
        entries.push(ManifestEntry {
            video_id: v.id.clone(),
            group: v.group.clone(),
            features,
            labels,
        });
    }
    let mut manifest = DatasetManifest::new(entries)?;
    manifest.vocabulary = Some(PathBuf::from("vocabulary.json"));
    manifest.write(args.out.join("manifest.json"))?;
    write_json(&cfg, &args.out.join("resolved_config.json"))?;
    println!("wrote {} videos to {}", videos.len(), args.out.display());
    Ok(())
}

pub fn cmd_split(args: &SplitArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    if !args.manifest.is_file() {
        return Err(CliError::MissingFile(args.manifest.clone()));
    }
    let manifest = DatasetManifest::read(&args.manifest)?;
    let spec = stratified_kfold(&manifest, cfg.folds, cfg.split_seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    spec.write(&args.out)?;
    let sizes: Vec<usize> = spec.folds.iter().map(Vec::len).collect();
    println!("wrote {} folds {:?} to {}", spec.k, sizes, args.out.display());
    Ok(())
}

fn fold_ids(splits: &Path, fold: usize) -> Result<(FoldSpec, Vec<String>, Vec<String>)> {
    if !splits.is_file() {
        return Err(CliError::MissingFile(splits.to_path_buf()));
    }
    let spec = FoldSpec::read(splits)?;
    let (train, test) = spec.fold_iter(fold)?;
    Ok((spec, train, test))
}

/// Resolved configuration written next to training outputs.
#[derive(Serialize)]
struct ResolvedTrain<'a> {
    run: &'a RunConfig,
    model: &'a ModelConfig,
    fold: usize,
    split_seed: u64,
}

pub fn cmd_train(args: &TrainArgs, exec: Execution) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let (spec, train_ids, test_ids) = fold_ids(&args.splits, args.fold)?;
    let data = Dataset::open(&args.data)?;
    let train = data.load_all(&train_ids)?;
    let test = data.load_all(&test_ids)?;
    let feat_dim = train
        .first()
        .map(|v| v.features.feat_dim())
        .ok_or_else(|| CliError::Input(format!("fold {} leaves no training videos", args.fold)))?;
    let model = cfg.model_config(data.vocabulary.len(), feat_dim, &RunConfig::source(&args.config))?;

    create_dir(&args.out)?;
    let (params, mut manifest) = train_fold_with(&train, &model, &cfg.train, exec)?;
    let ckpt = args.out.join("model.psck");
    write_checkpoint(&params.to_named(), &ckpt).map_err(|e| CliError::Input(e.to_string()))?;
    write_json(&model, &args.out.join("model_config.json"))?;
    let dumps = dump_predictions(&params, &model, &test, args.out.join("predictions"), exec)?;
    manifest.checkpoint = Some(PathBuf::from("model.psck"));
    manifest.prediction_dumps = dumps
        .iter()
        .map(|p| p.strip_prefix(&args.out).unwrap_or(p).to_path_buf())
        .collect();
    manifest.write(args.out.join("run_manifest.json"))?;
    write_json(
        &ResolvedTrain {
            run: &cfg,
            model: &model,
            fold: args.fold,
            split_seed: spec.seed,
        },
        &args.out.join("resolved_config.json"),
    )?;
    println!(
        "fold {}: trained on {} videos, final loss {:.4}, {} dumps in {}",
        args.fold,
        train.len(),
        manifest.epoch_losses.last().copied().unwrap_or(f64::NAN),
        dumps.len(),
        args.out.join("predictions").display()
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, exec: Execution) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let (_, _, test_ids) = fold_ids(&args.splits, args.fold)?;
    let data = Dataset::open(&args.data)?;
    let classes = data.vocabulary.len();
    let exclude = args.metrics_exclude.clone().unwrap_or(cfg.metrics_exclude);
    if let Some(&c) = exclude.iter().find(|&&c| c >= classes) {
        return Err(CliError::Input(format!("excluded class {c} out of range for {classes} classes")));
    }

    let mut preds = Vec::with_capacity(test_ids.len());
    let mut gts = Vec::with_capacity(test_ids.len());
    for id in &test_ids {
        let path = args.predictions.join(format!("{id}.pspd"));
        if !path.is_file() {
            return Err(CliError::MissingFile(path));
        }
        let pred = read_prediction(&path)?;
        let labels = read_labels(data.labels_path(data.entry(id)?), &data.vocabulary)?;
        if pred.labels.len() != labels.len() {
            return Err(CliError::LengthMismatch {
                video: id.clone(),
                predicted: pred.labels.len(),
                labels: labels.len(),
            });
        }
        let dump_classes = pred.probabilities.dims2().map_or(0, |d| d.0);
        if dump_classes != classes {
            return Err(CliError::Input(format!(
                "{}: {dump_classes} classes in dump, {classes} in vocabulary",
                path.display()
            )));
        }
        preds.push(pred);
        gts.push(labels);
    }
    let videos: Vec<EvalVideo> = test_ids
        .iter()
        .zip(&preds)
        .zip(&gts)
        .map(|((id, p), g)| EvalVideo {
            id,
            prediction: p,
            gt: g.as_slice(),
        })
        .collect();
    let opts = MetricOptions { exclude };
    let mut report = aggregate(&videos, classes, &opts, exec).map_err(|e| CliError::Input(e.to_string()))?;
    report.fold = Some(args.fold);
    write_json(&report, &args.out)?;
    println!(
        "fold {}: accuracy {:.2} edit {:.2} F1@50 {:.2} over {} videos",
        args.fold, report.accuracy, report.edit, report.f1_50, report.num_videos
    );
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let folds: Vec<FoldReport> = args.folds.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let study: StudyReport = summarize(folds).map_err(|e| CliError::Input(e.to_string()))?;
    let table = study.render_table();
    print!("{table}");
    if let Some(out) = &args.out {
        write_json(&study, out)?;
        let txt = out.with_extension("txt");
        fs::write(&txt, &table).map_err(|e| io_error(&txt, e))?;
    }
    Ok(())
}

pub fn cmd_ribbon(args: &RibbonArgs) -> Result<()> {
    let vocabulary = read_vocabulary(&args.vocabulary)?;
    let gt = read_labels(&args.labels, &vocabulary)?;
    let mut rows = vec![("ground truth".to_string(), gt.as_slice().to_vec())];
    let mut seen: HashMap<String, usize> = HashMap::new();
    for p in &args.predictions {
        if !p.is_file() {
            return Err(CliError::MissingFile(p.clone()));
        }
        let pred = read_prediction(p)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let n = seen.entry(stem.clone()).or_insert(0);
        *n += 1;
        let title = if *n > 1 { format!("{stem} ({n})") } else { stem };
        rows.push((title, pred.labels));
    }
    let render = RibbonRender {
        rows,
        class_names: vocabulary,
        px_per_frame: args.px_per_frame,
    };
    let svg = render.to_svg().map_err(|e| match e {
        phaseseg::ribbon::RibbonError::RowLength { row, expected, got } => CliError::LengthMismatch {
            video: row,
            predicted: got,
            labels: expected,
        },
        other => CliError::Input(other.to_string()),
    })?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&args.out, svg).map_err(|e| io_error(&args.out, e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Parameters of a trained run, for callers that want to reload it.
pub fn load_run(dir: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let model: ModelConfig = read_json(&dir.join("model_config.json"))?;
    let ckpt = dir.join("model.psck");
    if !ckpt.is_file() {
        return Err(CliError::MissingFile(ckpt));
    }
    let named = phaseseg::autodiff::read_checkpoint(&ckpt).map_err(|e| CliError::Input(e.to_string()))?;
    let params = ModelParams::from_named(&model, named).map_err(|e| CliError::Input(e.to_string()))?;
    Ok((model, params))
}
