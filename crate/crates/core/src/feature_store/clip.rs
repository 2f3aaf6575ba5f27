//! Clip-to-frame assignment for clip-based video encoders.

use super::{CacheError, FeatureSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipSpec {
    pub clip_len: usize,
    pub extraction_stride: usize,
    pub center_offset: usize,
}

impl ClipSpec {
    /// Center offset is `floor(clip_len / 2)`.
    pub fn new(clip_len: usize, extraction_stride: usize) -> Result<Self, CacheError> {
        if clip_len == 0 || extraction_stride == 0 {
            return Err(CacheError::Invalid("clip_len and extraction_stride must be >= 1".into()));
        }
        Ok(Self {
            clip_len,
            extraction_stride,
            center_offset: clip_len / 2,
        })
    }
}

/// One window of the sliding clip plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipPlacement {
    pub clip_start: usize,
    pub assigned_frame: usize,
    /// The video is shorter than one clip; the encoder input is padded by
    /// repeating the edge frames.
    pub padded: bool,
}

/// Sliding-window plan: clip starts advance by the extraction stride while
/// the whole clip fits, and each clip is assigned to its center frame.
pub fn clip_centers(video_frames: usize, spec: &ClipSpec) -> Vec<ClipPlacement> {
    if video_frames == 0 {
        return Vec::new();
    }
    if video_frames < spec.clip_len {
        return vec![ClipPlacement {
            clip_start: 0,
            assigned_frame: spec.center_offset.min(video_frames - 1),
            padded: true,
        }];
    }
    (0..=video_frames - spec.clip_len)
        .step_by(spec.extraction_stride)
        .map(|start| ClipPlacement {
            clip_start: start,
            assigned_frame: (start + spec.center_offset).min(video_frames - 1),
            padded: false,
        })
        .collect()
}

/// Places one embedding per clip at its assigned frame and fills the rest of
/// the video: linear interpolation between assigned frames, edge hold before
/// the first and after the last.
pub fn clip_embeddings_to_frames(
    plan: &[ClipPlacement],
    embeddings: &FeatureSequence,
    video_frames: usize,
) -> Result<FeatureSequence, CacheError> {
    if plan.is_empty() || plan.len() != embeddings.frame_count() {
        return Err(CacheError::Invalid(format!(
            "{} clip embeddings for a plan of {} clips",
            embeddings.frame_count(),
            plan.len()
        )));
    }
    if plan.windows(2).any(|w| w[0].assigned_frame >= w[1].assigned_frame)
        || plan.last().unwrap().assigned_frame >= video_frames
    {
        return Err(CacheError::Invalid("clip plan is not strictly increasing within the video".into()));
    }
    let d = embeddings.feat_dim();
    let mut data = Vec::with_capacity(video_frames * d);
    let mut k = 0;
    for t in 0..video_frames {
        while k + 1 < plan.len() && plan[k + 1].assigned_frame <= t {
            k += 1;
        }
        let a = plan[k].assigned_frame;
        if t <= a || k + 1 == plan.len() {
            data.extend_from_slice(embeddings.frame(k));
            continue;
        }
        let b = plan[k + 1].assigned_frame;
        let span = (b - a) as f64;
        let (fa, fb) = (embeddings.frame(k), embeddings.frame(k + 1));
        data.extend(fa.iter().zip(fb).map(|(&va, &vb)| {
            (((b - t) as f64 * va as f64 + (t - a) as f64 * vb as f64) / span) as f32
        }));
    }
    FeatureSequence::new(video_frames, d, data, embeddings.source_tag(), 1)
}
