//! MS-TCN++ temporal head.
//!
//! Stage 1 (prediction generation) projects the `d`-dimensional features to
//! `hidden_maps` channels and stacks `pg_layers` dual-dilated residual layers:
//! layer `i` runs two parallel kernel-3 convolutions with dilations
//! `2^(L-1-i)` and `2^i`, concatenates them, fuses back to `hidden_maps` with
//! a 1x1 convolution, applies ReLU and adds the layer input. A 1x1 head emits
//! class logits.
//!
//! Each refinement stage takes the softmax of the previous stage's logits,
//! projects `C -> hidden_maps`, stacks `refine_layers` dilated residual layers
//! (dilation `2^i`, conv → ReLU → 1x1 → residual add) and ends with its own
//! 1x1 head. All convolutions are centered with zero padding.

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{column_softmax, AutodiffError, Graph, NamedTensor, Real, Tensor, Var};
use crate::exec::Execution;
use crate::feature_store::FeatureSequence;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("features have dimension {got}, model expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("features must be at full frame rate (stride 1), got stride {0}")]
    Stride(u32),
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub feat_dim: usize,
    pub hidden_maps: usize,
    pub pg_layers: usize,
    pub refine_stages: usize,
    pub refine_layers: usize,
    pub kernel_size: usize,
    /// Weight of the truncated smoothing term in the training loss.
    pub smoothing_weight: f64,
    /// Clamp on adjacent-frame log-probability differences.
    pub clamp_tau: f64,
    /// Stored for provenance only; the loss does not use a window.
    pub smoothing_window: usize,
    /// Elementwise dropout after each residual branch during training.
    pub dropout: f64,
    /// All refinement stages share one set of weights.
    pub shared_refinement: bool,
}

impl ModelConfig {
    /// 13 prediction-generation layers, 4 refinement stages of 13 layers,
    /// 64 hidden maps, smoothing weight 0.35.
    pub fn standard(num_classes: usize, feat_dim: usize) -> Self {
        Self {
            num_classes,
            feat_dim,
            hidden_maps: 64,
            pg_layers: 13,
            refine_stages: 4,
            refine_layers: 13,
            kernel_size: 3,
            smoothing_weight: 0.35,
            clamp_tau: 4.0,
            smoothing_window: 30,
            dropout: 0.0,
            shared_refinement: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("feat_dim", self.feat_dim),
            ("hidden_maps", self.hidden_maps),
            ("pg_layers", self.pg_layers),
            ("kernel_size", self.kernel_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.refine_stages > 0 && self.refine_layers == 0 {
            return bad("refine_layers must be >= 1".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.pg_layers > 30 || self.refine_layers > 30 {
            return bad("at most 30 layers per stage".into());
        }
        if self.smoothing_weight.is_nan() || self.smoothing_weight < 0.0 || self.clamp_tau.is_nan() || self.clamp_tau <= 0.0 {
            return bad("smoothing_weight must be >= 0 and clamp_tau > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Output stages: prediction generation plus refinements.
    pub fn num_stages(&self) -> usize {
        1 + self.refine_stages
    }

    /// `(2^(L-1-i), 2^i)` for prediction-generation layer `i`.
    pub fn pg_dilations(&self, layer: usize) -> (usize, usize) {
        (1 << (self.pg_layers - 1 - layer), 1 << layer)
    }

    pub fn refine_dilation(&self, layer: usize) -> usize {
        1 << layer
    }

    fn refine_prefix(&self, stage: usize) -> String {
        if self.shared_refinement {
            "refine".to_string()
        } else {
            format!("refine{stage}")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in used for initialisation.
    pub fan_in: usize,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, c_out: usize, c_in: usize, kernel: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![c_out, c_in, kernel],
        fan_in: c_in * kernel,
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![c_out],
        fan_in: c_in * kernel,
    });
}

/// Every parameter tensor in a fixed order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (h, c, k) = (cfg.hidden_maps, cfg.num_classes, cfg.kernel_size);
    let mut out = Vec::new();
    conv_specs(&mut out, "pg.in", h, cfg.feat_dim, 1);
    for i in 0..cfg.pg_layers {
        conv_specs(&mut out, &format!("pg.{i}.dil_a"), h, h, k);
        conv_specs(&mut out, &format!("pg.{i}.dil_b"), h, h, k);
        conv_specs(&mut out, &format!("pg.{i}.fusion"), h, 2 * h, 1);
    }
    conv_specs(&mut out, "pg.out", c, h, 1);
    let distinct = if cfg.shared_refinement { cfg.refine_stages.min(1) } else { cfg.refine_stages };
    for s in 0..distinct {
        let p = cfg.refine_prefix(s);
        conv_specs(&mut out, &format!("{p}.in"), h, c, 1);
        for i in 0..cfg.refine_layers {
            conv_specs(&mut out, &format!("{p}.{i}.dil"), h, h, k);
            conv_specs(&mut out, &format!("{p}.{i}.pw"), h, h, 1);
        }
        conv_specs(&mut out, &format!("{p}.out"), c, h, 1);
    }
    out
}

pub fn parameter_count(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(|p| p.shape.iter().product::<usize>()).sum()
}

/// Parameter tensors in [`layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ModelParams<R> {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = layout(cfg)
            .into_iter()
            .map(|spec| {
                let bound = 1.0 / (spec.fan_in as f64).sqrt();
                let n = spec.shape.iter().product();
                let data = (0..n).map(|_| R::from_f64(rng.random_range(-bound..bound))).collect();
                (spec.name, Tensor::new(spec.shape, data).expect("layout shape"))
            })
            .unzip();
        Ok(Self { names, tensors })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (names, tensors) = layout(cfg)
            .into_iter()
            .map(|spec| (spec.name, Tensor::zeros(spec.shape)))
            .unzip();
        Ok(Self { names, tensors })
    }

    /// Loads named tensors, checking names and shapes against the layout.
    pub fn from_named(cfg: &ModelConfig, named: Vec<NamedTensor>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = layout(cfg);
        if specs.len() != named.len() {
            return Err(ModelError::Params(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::Params(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t.cast());
        }
        Ok(Self { names, tensors })
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names.iter().cloned().zip(self.tensors.iter().map(Tensor::cast)).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a graph leaf, trainable or constant.
    pub fn register(&self, graph: &mut Graph<R>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect()
    }
}

/// `[d, T]` input tensor from a frame-major feature sequence.
pub fn features_to_tensor<R: Real>(feats: &FeatureSequence) -> Tensor<R> {
    let (t, d) = (feats.frame_count(), feats.feat_dim());
    let src = feats.data();
    let mut data = vec![R::zero(); d * t];
    for f in 0..t {
        for j in 0..d {
            data[j * t + f] = R::from_f64(src[f * d + j] as f64);
        }
    }
    Tensor::new(vec![d, t], data).expect("d*T values")
}

fn check_features(cfg: &ModelConfig, feats: &FeatureSequence) -> Result<(), ModelError> {
    if feats.feat_dim() != cfg.feat_dim {
        return Err(ModelError::FeatureDim {
            expected: cfg.feat_dim,
            got: feats.feat_dim(),
        });
    }
    if feats.stride() != 1 {
        return Err(ModelError::Stride(feats.stride()));
    }
    Ok(())
}

struct Builder<'a, 'r, R> {
    graph: &'a mut Graph<R>,
    index: HashMap<&'a str, Var>,
    cfg: &'a ModelConfig,
    dropout: Option<&'r mut dyn RngCore>,
}

impl<R: Real> Builder<'_, '_, R> {
    fn conv(&mut self, x: Var, name: &str, dilation: usize) -> Result<Var, ModelError> {
        let w = self.index[format!("{name}.w").as_str()];
        let b = self.index[format!("{name}.b").as_str()];
        Ok(self.graph.conv1d(x, w, b, dilation)?)
    }

    fn drop(&mut self, x: Var) -> Result<Var, ModelError> {
        let p = self.cfg.dropout;
        let Some(rng) = self.dropout.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = R::from_f64(1.0 / (1.0 - p));
        let n = self.graph.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { R::zero() } else { keep })
            .collect();
        Ok(self.graph.mask(x, mask)?)
    }
}

/// Records the forward pass on `graph` and returns one `[C, T]` logit node per
/// stage.
///
/// `params` must come from [`ModelParams::register`] for the same config.
/// Dropout is applied only when `dropout_rng` is given.
pub fn forward_graph<R: Real>(
    graph: &mut Graph<R>,
    cfg: &ModelConfig,
    param_names: &[String],
    params: &[Var],
    input: Var,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Vec<Var>, ModelError> {
    cfg.validate()?;
    if param_names.len() != params.len() {
        return Err(ModelError::Params("names and vars differ in length".into()));
    }
    let index = param_names.iter().map(String::as_str).zip(params.iter().copied()).collect();
    let mut b = Builder {
        graph,
        index,
        cfg,
        dropout: dropout_rng,
    };

    let mut f = b.conv(input, "pg.in", 1)?;
    for i in 0..cfg.pg_layers {
        let (da, db) = cfg.pg_dilations(i);
        let ya = b.conv(f, &format!("pg.{i}.dil_a"), da)?;
        let yb = b.conv(f, &format!("pg.{i}.dil_b"), db)?;
        let cat = b.graph.concat_channels(ya, yb)?;
        let fused = b.conv(cat, &format!("pg.{i}.fusion"), 1)?;
        let act = b.graph.relu(fused);
        let act = b.drop(act)?;
        f = b.graph.add(act, f)?;
    }
    let mut out = b.conv(f, "pg.out", 1)?;
    let mut stages = vec![out];

    for s in 0..cfg.refine_stages {
        let p = cfg.refine_prefix(s);
        let probs = b.graph.softmax(out)?;
        let mut r = b.conv(probs, &format!("{p}.in"), 1)?;
        for i in 0..cfg.refine_layers {
            let h = b.conv(r, &format!("{p}.{i}.dil"), cfg.refine_dilation(i))?;
            let h = b.graph.relu(h);
            let h = b.conv(h, &format!("{p}.{i}.pw"), 1)?;
            let h = b.drop(h)?;
            r = b.graph.add(r, h)?;
        }
        out = b.conv(r, &format!("{p}.out"), 1)?;
        stages.push(out);
    }
    Ok(stages)
}

/// Inference: per-stage `[C, T]` logits.
pub fn forward(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    feats: &FeatureSequence,
    exec: Execution,
) -> Result<Vec<Tensor<f32>>, ModelError> {
    check_features(cfg, feats)?;
    let mut g = Graph::with_execution(exec);
    let vars = params.register(&mut g, false);
    let input = g.constant(features_to_tensor(feats));
    let stages = forward_graph(&mut g, cfg, params.names(), &vars, input, None)?;
    Ok(stages.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Final-stage frame labels and class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `[C, T]`, columns sum to one.
    pub probabilities: Tensor<f32>,
}

/// Per-column argmax; ties go to the smaller class index.
pub fn argmax_columns<R: Real>(m: &Tensor<R>) -> Vec<usize> {
    let (c, t) = m.dims2().expect("[C, T] matrix");
    (0..t)
        .map(|f| {
            let mut best = 0;
            for k in 1..c {
                if m.at2(k, f) > m.at2(best, f) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    feats: &FeatureSequence,
    exec: Execution,
) -> Result<Prediction, ModelError> {
    let stages = forward(params, cfg, feats, exec)?;
    let last = stages.last().expect("at least one stage");
    let (c, t) = last.dims2().expect("[C, T] logits");
    let probs = Tensor::new(vec![c, t], column_softmax(last.data(), c, t, false))?;
    Ok(Prediction {
        labels: argmax_columns(&probs),
        probabilities: probs,
    })
}
