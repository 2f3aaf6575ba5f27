//! Per-video, per-fold and cross-fold aggregation.

use serde::{Deserialize, Serialize};

use super::{
    accuracy, edit_score_with, macro_f1_with, mean_iou_with, pr_auc_with, segmental_f1_with, MetricOptions,
    MetricsError,
};
use crate::exec::Execution;
use crate::mstcn::Prediction;

/// Reported columns, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    MacroF1,
    Edit,
    PrAuc,
    F1At10,
    F1At25,
    F1At50,
    MeanIou,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Accuracy,
        Metric::MacroF1,
        Metric::Edit,
        Metric::PrAuc,
        Metric::F1At10,
        Metric::F1At25,
        Metric::F1At50,
        Metric::MeanIou,
    ];

    pub fn header(self) -> &'static str {
        match self {
            Metric::Accuracy => "Accuracy",
            Metric::MacroF1 => "F1 (macro)",
            Metric::Edit => "Edit",
            Metric::PrAuc => "PR-AUC",
            Metric::F1At10 => "F1@10",
            Metric::F1At25 => "F1@25",
            Metric::F1At50 => "F1@50",
            Metric::MeanIou => "mIoU",
        }
    }
}

/// One video's ground truth and model output.
pub struct EvalVideo<'a> {
    pub id: &'a str,
    pub prediction: &'a Prediction,
    pub gt: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub frames: usize,
    pub accuracy: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: Option<usize>,
    pub num_videos: usize,
    pub num_frames: usize,
    pub excluded_classes: Vec<usize>,
    /// Frame-pooled over the fold.
    pub accuracy: f64,
    /// Frame-pooled over the fold.
    pub macro_f1: f64,
    /// Mean over videos.
    pub edit: f64,
    /// Frame-pooled over the fold.
    pub pr_auc: f64,
    /// Mean over videos.
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    /// Mean over videos.
    pub miou: f64,
    pub videos: Vec<VideoMetrics>,
}

impl FoldReport {
    pub fn value(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::MacroF1 => self.macro_f1,
            Metric::Edit => self.edit,
            Metric::PrAuc => self.pr_auc,
            Metric::F1At10 => self.f1_10,
            Metric::F1At25 => self.f1_25,
            Metric::F1At50 => self.f1_50,
            Metric::MeanIou => self.miou,
        }
    }
}

/// Mean and population standard deviation across folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub num_folds: usize,
    pub summary: Vec<MetricSummary>,
    pub folds: Vec<FoldReport>,
}

impl StudyReport {
    pub fn get(&self, m: Metric) -> Option<&MetricSummary> {
        self.summary.iter().find(|s| s.metric == m)
    }

    /// Two-line text table: headers, then `mean ± std` per column.
    pub fn render_table(&self) -> String {
        let cells: Vec<(String, String)> = self
            .summary
            .iter()
            .map(|s| (s.metric.header().to_string(), format!("{:.2} ± {:.2}", s.mean, s.std)))
            .collect();
        let widths: Vec<usize> = cells
            .iter()
            .map(|(h, v)| h.chars().count().max(v.chars().count()))
            .collect();
        let line = |pick: &dyn Fn(&(String, String)) -> &String| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{:<w$}", pick(c), w = w))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        format!("{}\n{}\n", line(&|c| &c.0), line(&|c| &c.1))
    }
}

fn video_metrics(v: &EvalVideo<'_>, num_classes: usize, opts: &MetricOptions) -> Result<VideoMetrics, MetricsError> {
    let pred = &v.prediction.labels;
    Ok(VideoMetrics {
        video_id: v.id.to_string(),
        frames: v.gt.len(),
        accuracy: accuracy(pred, v.gt)?,
        edit: edit_score_with(pred, v.gt, opts)?,
        f1_10: segmental_f1_with(pred, v.gt, 0.10, opts)?,
        f1_25: segmental_f1_with(pred, v.gt, 0.25, opts)?,
        f1_50: segmental_f1_with(pred, v.gt, 0.50, opts)?,
        miou: mean_iou_with(pred, v.gt, num_classes, opts)?,
    })
}

/// Scores one fold. Accuracy, macro-F1 and PR-AUC pool all frames of the
/// fold; edit, F1@k and mIoU are averaged over videos.
pub fn aggregate(
    videos: &[EvalVideo<'_>],
    num_classes: usize,
    opts: &MetricOptions,
    exec: Execution,
) -> Result<FoldReport, MetricsError> {
    if videos.is_empty() {
        return Err(MetricsError::EmptyAggregate("videos"));
    }
    let per_video = exec
        .map(videos, |v| video_metrics(v, num_classes, opts))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let pred: Vec<usize> = videos.iter().flat_map(|v| v.prediction.labels.iter().copied()).collect();
    let gt: Vec<usize> = videos.iter().flat_map(|v| v.gt.iter().copied()).collect();
    let prob_pairs: Vec<_> = videos.iter().map(|v| (&v.prediction.probabilities, v.gt)).collect();
    let n = per_video.len() as f64;
    let mean = |f: fn(&VideoMetrics) -> f64| per_video.iter().map(f).sum::<f64>() / n;

    Ok(FoldReport {
        fold: None,
        num_videos: videos.len(),
        num_frames: gt.len(),
        excluded_classes: opts.exclude.clone(),
        accuracy: accuracy(&pred, &gt)?,
        macro_f1: macro_f1_with(&pred, &gt, num_classes, opts)?,
        edit: mean(|m| m.edit),
        pr_auc: pr_auc_with(&prob_pairs, num_classes, opts)?,
        f1_10: mean(|m| m.f1_10),
        f1_25: mean(|m| m.f1_25),
        f1_50: mean(|m| m.f1_50),
        miou: mean(|m| m.miou),
        videos: per_video,
    })
}

/// Mean and population std of each column across folds.
pub fn summarize(folds: Vec<FoldReport>) -> Result<StudyReport, MetricsError> {
    if folds.is_empty() {
        return Err(MetricsError::EmptyAggregate("folds"));
    }
    let k = folds.len() as f64;
    let summary = Metric::ALL
        .iter()
        .map(|&m| {
            // Shifted by the first fold, so identical folds give exactly
            // their value and a zero spread.
            let x0 = folds[0].value(m);
            let d: Vec<f64> = folds.iter().map(|f| f.value(m) - x0).collect();
            let md = d.iter().sum::<f64>() / k;
            let var = d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / k;
            MetricSummary {
                metric: m,
                mean: x0 + md,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(StudyReport {
        num_folds: folds.len(),
        summary,
        folds,
    })
}
