//! Frame-level, segment-level and overlap metrics for phase segmentation.
//!
//! All scores are percentages in `[0, 100]`.
//!
//! Excluded classes (see [`MetricOptions`]) are dropped from the class
//! averages of macro-F1, mIoU and PR-AUC, and their segments are removed
//! before edit score and segmental F1. Accuracy always counts every frame.

mod report;

use thiserror::Error;

use crate::autodiff::Tensor;

pub use report::{
    aggregate, summarize, EvalVideo, FoldReport, Metric, MetricSummary, StudyReport, VideoMetrics,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} frames but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("empty label sequence")]
    Empty,
    #[error("no class is eligible for {0}")]
    NoEligibleClass(&'static str),
    #[error("invalid probabilities: {0}")]
    Probabilities(String),
    #[error("cannot aggregate an empty set of {0}")]
    EmptyAggregate(&'static str),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricOptions {
    pub exclude: Vec<usize>,
}

impl MetricOptions {
    fn excluded(&self, c: usize) -> bool {
        self.exclude.contains(&c)
    }
}

/// Maximal run of one label; `end` is inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Frame-level intersection over union.
    pub fn iou(&self, other: &Segment) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        let inter = if hi >= lo { hi - lo + 1 } else { 0 };
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

fn check_pair(pred: &[usize], gt: &[usize]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn to_segments(labels: &[usize]) -> Result<Vec<Segment>, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(runs(labels))
}

fn runs(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == l => s.end = t,
            _ => out.push(Segment { label: l, start: t, end: t }),
        }
    }
    out
}

pub fn expand_segments(segments: &[Segment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
        .collect()
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Per-class `(tp, fp, fn)` counts.
fn class_counts(pred: &[usize], gt: &[usize], num_classes: usize) -> Vec<(usize, usize, usize)> {
    let c = num_classes.max(pred.iter().chain(gt).max().map_or(0, |m| m + 1));
    let mut counts = vec![(0, 0, 0); c];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            counts[p].0 += 1;
        } else {
            counts[p].1 += 1;
            counts[g].2 += 1;
        }
    }
    counts
}

/// Unweighted mean of per-class F1 over the classes present in `gt`.
pub fn macro_f1(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64, MetricsError> {
    macro_f1_with(pred, gt, num_classes, &MetricOptions::default())
}

pub fn macro_f1_with(
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
    opts: &MetricOptions,
) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    let counts = class_counts(pred, gt, num_classes);
    let scores: Vec<f64> = counts
        .iter()
        .enumerate()
        .filter(|&(c, &(tp, _, fn_))| tp + fn_ > 0 && !opts.excluded(c))
        .map(|(_, &(tp, fp, fn_))| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        .collect();
    if scores.is_empty() {
        return Err(MetricsError::NoEligibleClass("macro-F1"));
    }
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean over classes appearing in `gt` or `pred` of frame-set IoU.
pub fn mean_iou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64, MetricsError> {
    mean_iou_with(pred, gt, num_classes, &MetricOptions::default())
}

pub fn mean_iou_with(
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
    opts: &MetricOptions,
) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    let counts = class_counts(pred, gt, num_classes);
    let scores: Vec<f64> = counts
        .iter()
        .enumerate()
        .filter(|&(c, &(tp, fp, fn_))| tp + fp + fn_ > 0 && !opts.excluded(c))
        .map(|(_, &(tp, fp, fn_))| tp as f64 / (tp + fp + fn_) as f64)
        .collect();
    if scores.is_empty() {
        return Err(MetricsError::NoEligibleClass("mIoU"));
    }
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Step-rule average precision: `sum_k (R_k - R_{k-1}) * P_k` over
/// descending distinct scores, tied scores forming one threshold. `None`
/// when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Macro-averaged average precision over classes with at least one positive
/// frame, frames pooled across all given videos.
pub fn pr_auc(videos: &[(&Tensor<f32>, &[usize])], num_classes: usize) -> Result<f64, MetricsError> {
    pr_auc_with(videos, num_classes, &MetricOptions::default())
}

pub fn pr_auc_with(
    videos: &[(&Tensor<f32>, &[usize])],
    num_classes: usize,
    opts: &MetricOptions,
) -> Result<f64, MetricsError> {
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    let mut gt_all: Vec<usize> = Vec::new();
    for (probs, gt) in videos {
        let (c, t) = probs
            .dims2()
            .ok_or_else(|| MetricsError::Probabilities(format!("expected [C, T], got {:?}", probs.shape())))?;
        if c != num_classes {
            return Err(MetricsError::Probabilities(format!("{c} rows for {num_classes} classes")));
        }
        if t != gt.len() {
            return Err(MetricsError::LengthMismatch { pred: t, gt: gt.len() });
        }
        for f in 0..t {
            let col: f64 = (0..c).map(|k| probs.at2(k, f) as f64).sum();
            if !col.is_finite() || (col - 1.0).abs() > 1e-4 {
                return Err(MetricsError::Probabilities(format!("column {f} sums to {col}")));
            }
        }
        for (k, scores) in per_class.iter_mut().enumerate() {
            scores.extend(probs.row(k).iter().map(|&v| v as f64));
        }
        gt_all.extend_from_slice(gt);
    }
    let aps: Vec<f64> = (0..num_classes)
        .filter(|&k| !opts.excluded(k))
        .filter_map(|k| {
            let pos: Vec<bool> = gt_all.iter().map(|&g| g == k).collect();
            average_precision(&per_class[k], &pos)
        })
        .collect();
    if aps.is_empty() {
        return Err(MetricsError::NoEligibleClass("PR-AUC"));
    }
    Ok(100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn kept_segments(labels: &[usize], opts: &MetricOptions) -> Vec<Segment> {
    runs(labels).into_iter().filter(|s| !opts.excluded(s.label)).collect()
}

/// `100 * (1 - lev(P, G) / max(|P|, |G|))` on segment label sequences.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64, MetricsError> {
    edit_score_with(pred, gt, &MetricOptions::default())
}

pub fn edit_score_with(pred: &[usize], gt: &[usize], opts: &MetricOptions) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    let p: Vec<usize> = kept_segments(pred, opts).iter().map(|s| s.label).collect();
    let g: Vec<usize> = kept_segments(gt, opts).iter().map(|s| s.label).collect();
    Ok(edit_from_labels(&p, &g))
}

fn edit_from_labels(p: &[usize], g: &[usize]) -> f64 {
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 100.0;
    }
    (100.0 * (1.0 - levenshtein(p, g) as f64 / longest as f64)).clamp(0.0, 100.0)
}

/// Greedy segment matching counts `(tp, fp, fn)` at IoU threshold `tau`.
///
/// Predicted segments are visited in order; each picks the same-label ground
/// truth segment of highest IoU (first on ties). It is a true positive when
/// that IoU reaches `tau` and the segment is still unmatched, otherwise a
/// false positive.
pub fn segment_matches(pred: &[Segment], gt: &[Segment], tau: f64) -> (usize, usize, usize) {
    let mut matched = vec![false; gt.len()];
    let (mut tp, mut fp) = (0, 0);
    for p in pred {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(_, g)| g.label == p.label)
            .map(|(j, g)| (j, p.iou(g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((j, iou)),
            });
        match best {
            Some((j, iou)) if iou >= tau && !matched[j] => {
                matched[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_ = matched.iter().filter(|&&m| !m).count();
    (tp, fp, fn_)
}

/// Segmental F1 over explicit segment lists.
pub fn segmental_f1_segments(pred: &[Segment], gt: &[Segment], tau: f64) -> f64 {
    let (tp, fp, fn_) = segment_matches(pred, gt, tau);
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return 100.0;
    }
    100.0 * (2 * tp) as f64 / denom as f64
}

pub fn segmental_f1(pred: &[usize], gt: &[usize], tau: f64) -> Result<f64, MetricsError> {
    segmental_f1_with(pred, gt, tau, &MetricOptions::default())
}

pub fn segmental_f1_with(pred: &[usize], gt: &[usize], tau: f64, opts: &MetricOptions) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    Ok(segmental_f1_segments(&kept_segments(pred, opts), &kept_segments(gt, opts), tau))
}
