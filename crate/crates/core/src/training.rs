//! Training recipe, run manifests and prediction dumps.
//!
//! Each step consumes one whole video. Loss per video is the sum over stages
//! of frame-mean cross-entropy plus `λ` times the truncated smoothing term on
//! log-probabilities. Adam runs with a multi-step schedule whose milestones
//! are fractions of the epoch budget, and the final-epoch parameters are
//! returned.
//!
//! Prediction dumps (`.pspd`), little-endian:
//!
//! ```text
//! "PSPD" | u8 version (1) | u32 T | u32 C | T x u32 labels | C x T f32 probabilities (class-major)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{multistep_lr, AdamConfig, AdamState, AutodiffError, Graph, Real, Tensor, Var};
use crate::exec::Execution;
pub use crate::feature_store::Video;
use crate::mstcn::{features_to_tensor, forward_graph, predict, ModelConfig, ModelError, ModelParams, Prediction};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("video {video} has feature dimension {got}, expected {expected}")]
    MixedDims { video: String, expected: usize, got: usize },
    #[error("video {video}: {features} feature frames but {labels} labels")]
    LengthMismatch { video: String, features: usize, labels: usize },
    #[error("video {video}: label {label} out of range for {classes} classes")]
    LabelRange { video: String, label: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed prediction dump: {reason}")]
    Dump { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per optimisation step; only 1 is supported.
    pub batch_size: usize,
    pub base_lr: f64,
    pub gamma: f64,
    pub milestone_fractions: Vec<f64>,
    pub seed: u64,
    pub deterministic: bool,
    /// Reshuffle the video order every epoch.
    pub shuffle: bool,
    /// Recorded for completeness; clipping is not supported.
    pub gradient_clipping: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            base_lr: 5e-4,
            gamma: 0.3,
            milestone_fractions: vec![0.6, 0.9],
            seed: 0,
            deterministic: true,
            shuffle: true,
            gradient_clipping: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size {} unsupported; one video per step", self.batch_size));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if let Some(f) = self.milestone_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("milestone fraction {f} outside (0, 1]"));
        }
        if self.gradient_clipping {
            return bad("gradient clipping is not supported".into());
        }
        Ok(())
    }

    /// `round(fraction * epochs)` for each fraction, ascending.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self
            .milestone_fractions
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .collect();
        m.sort_unstable();
        m
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        multistep_lr(self.base_lr, epoch, &self.milestone_epochs(), self.gamma)
    }
}

/// `sum_s [CE(stage_s) + λ * smoothing(log_softmax(stage_s))]`.
pub fn total_loss<R: Real>(
    graph: &mut Graph<R>,
    stages: &[Var],
    labels: &[usize],
    lambda: f64,
    clamp_tau: f64,
) -> Result<Var, AutodiffError> {
    if stages.is_empty() {
        return Err(AutodiffError::Shape {
            op: "total_loss",
            detail: "no stages".into(),
        });
    }
    let shape = graph.value(stages[0]).shape().to_vec();
    let mut terms = Vec::with_capacity(stages.len() * 2);
    for &s in stages {
        if graph.value(s).shape() != shape.as_slice() {
            return Err(AutodiffError::Shape {
                op: "total_loss",
                detail: format!("stage shapes {:?} and {:?}", shape, graph.value(s).shape()),
            });
        }
        terms.push(graph.cross_entropy(s, labels)?);
        if lambda != 0.0 {
            let lp = graph.log_softmax(s)?;
            let sm = graph.smoothing_mse(lp, R::from_f64(clamp_tau))?;
            terms.push(graph.scale(sm, R::from_f64(lambda)));
        }
    }
    graph.sum(&terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// SHA-256 over the training videos' ids, features and labels.
    pub dataset_digest: String,
    pub train_videos: Vec<String>,
    pub parameter_count: usize,
    pub milestones: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Indices into `train_videos`, one list per epoch.
    pub epoch_orders: Vec<Vec<usize>>,
    pub checkpoint: Option<PathBuf>,
    pub prediction_dumps: Vec<PathBuf>,
}

impl RunManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn dataset_digest(videos: &[Video]) -> String {
    let mut h = Sha256::new();
    for v in videos {
        h.update((v.id.len() as u64).to_le_bytes());
        h.update(v.id.as_bytes());
        h.update(v.features.to_bytes().unwrap_or_default());
        for &l in v.labels.as_slice() {
            h.update((l as u32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn check_videos(videos: &[Video], cfg: &ModelConfig) -> Result<(), TrainError> {
    if videos.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    for v in videos {
        if v.features.feat_dim() != cfg.feat_dim {
            return Err(TrainError::MixedDims {
                video: v.id.clone(),
                expected: cfg.feat_dim,
                got: v.features.feat_dim(),
            });
        }
        if v.features.frame_count() != v.labels.len() {
            return Err(TrainError::LengthMismatch {
                video: v.id.clone(),
                features: v.features.frame_count(),
                labels: v.labels.len(),
            });
        }
        if let Some(&label) = v.labels.as_slice().iter().find(|&&l| l >= cfg.num_classes) {
            return Err(TrainError::LabelRange {
                video: v.id.clone(),
                label,
                classes: cfg.num_classes,
            });
        }
        if v.features.stride() != 1 {
            return Err(ModelError::Stride(v.features.stride()).into());
        }
    }
    Ok(())
}

/// Trains on `videos` with the default execution mode.
pub fn train_fold(
    videos: &[Video],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams<f32>, RunManifest), TrainError> {
    train_fold_with(videos, cfg, tcfg, Execution::default())
}

/// Trains on `videos`; `exec` selects how convolution kernels run.
pub fn train_fold_with(
    videos: &[Video],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    exec: Execution,
) -> Result<(ModelParams<f32>, RunManifest), TrainError> {
    cfg.validate()?;
    tcfg.validate()?;
    check_videos(videos, cfg)?;

    let mut params = ModelParams::<f32>::init(cfg, tcfg.seed)?;
    let mut adam = AdamState::new(params.tensors());
    let mut order_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(2));
    let inputs: Vec<Tensor<f32>> = videos.iter().map(|v| features_to_tensor(&v.features)).collect();
    let milestones = tcfg.milestone_epochs();
    log::info!(
        "training {} videos, {} parameters; smoothing window {} is recorded but the loss is the plain truncated MSE",
        videos.len(),
        params.count(),
        cfg.smoothing_window
    );

    let mut manifest = RunManifest {
        model: cfg.clone(),
        train: tcfg.clone(),
        seed: tcfg.seed,
        dataset_digest: dataset_digest(videos),
        train_videos: videos.iter().map(|v| v.id.clone()).collect(),
        parameter_count: params.count(),
        milestones: milestones.clone(),
        learning_rates: Vec::with_capacity(tcfg.epochs),
        epoch_losses: Vec::with_capacity(tcfg.epochs),
        epoch_orders: Vec::with_capacity(tcfg.epochs),
        checkpoint: None,
        prediction_dumps: Vec::new(),
    };

    for epoch in 0..tcfg.epochs {
        let lr = multistep_lr(tcfg.base_lr, epoch, &milestones, tcfg.gamma);
        let mut order: Vec<usize> = (0..videos.len()).collect();
        if tcfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut loss_sum = 0.0;
        for &i in &order {
            let mut g = Graph::with_execution(exec);
            let vars = params.register(&mut g, true);
            let input = g.constant(inputs[i].clone());
            let drop: Option<&mut dyn RngCore> = if cfg.dropout > 0.0 { Some(&mut dropout_rng) } else { None };
            let stages = forward_graph(&mut g, cfg, params.names(), &vars, input, drop)?;
            let loss = total_loss(&mut g, &stages, videos[i].labels.as_slice(), cfg.smoothing_weight, cfg.clamp_tau)?;
            loss_sum += g.value(loss).item() as f64;
            let mut grads = g.backward(loss)?;
            let grad_list: Vec<Tensor<f32>> = vars
                .iter()
                .zip(params.tensors())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            adam.step(params.tensors_mut(), &grad_list, lr, &tcfg.adam);
        }
        let mean = loss_sum / videos.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {mean:.5}");
        manifest.learning_rates.push(lr);
        manifest.epoch_losses.push(mean);
        manifest.epoch_orders.push(order);
    }
    Ok((params, manifest))
}

pub fn prediction_bytes(pred: &Prediction) -> Vec<u8> {
    let (c, t) = pred.probabilities.dims2().expect("[C, T] probabilities");
    let mut out = Vec::with_capacity(13 + 4 * t * (c + 1));
    out.extend_from_slice(b"PSPD");
    out.push(1);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for &l in &pred.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for v in pred.probabilities.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_prediction(bytes: &[u8]) -> Result<Prediction, String> {
    if bytes.len() < 13 {
        return Err(format!("{} bytes is shorter than the 13-byte header", bytes.len()));
    }
    if &bytes[..4] != b"PSPD" {
        return Err("bad magic".into());
    }
    if bytes[4] != 1 {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, c) = (u32_at(5), u32_at(9));
    let expected = 13 + 4 * t * (c + 1);
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let labels: Vec<usize> = (0..t).map(|i| u32_at(13 + 4 * i)).collect();
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(format!("label {l} out of range for {c} classes"));
    }
    let probs: Vec<f32> = bytes[13 + 4 * t..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if probs.iter().any(|p| !p.is_finite()) {
        return Err("non-finite probability".into());
    }
    let probabilities = Tensor::new(vec![c, t], probs).map_err(|e| e.to_string())?;
    Ok(Prediction { labels, probabilities })
}

pub fn write_prediction(pred: &Prediction, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    fs::write(path, prediction_bytes(pred)).map_err(io_err(path))
}

pub fn read_prediction(path: impl AsRef<Path>) -> Result<Prediction, TrainError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_prediction(&bytes).map_err(|reason| TrainError::Dump {
        path: path.to_path_buf(),
        reason,
    })
}

/// Writes `<out_dir>/<video id>.pspd` for every video and returns the paths.
pub fn dump_predictions(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    videos: &[Video],
    out_dir: impl AsRef<Path>,
    exec: Execution,
) -> Result<Vec<PathBuf>, TrainError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let preds = exec.map(videos, |v| predict(params, cfg, &v.features, Execution::Sequential));
    let mut paths = Vec::with_capacity(videos.len());
    for (v, p) in videos.iter().zip(preds) {
        let path = out_dir.join(format!("{}.pspd", v.id));
        write_prediction(&p?, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
