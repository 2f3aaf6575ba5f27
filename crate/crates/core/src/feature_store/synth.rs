//! Seeded synthetic videos: Markov-chain phase sequences with
//! class-conditional Gaussian features.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels::default_vocabulary;
use super::{CacheError, FeatureSequence, LabelSequence, Video};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feat_dim: usize,
    pub num_classes: usize,
    /// Every phase run lasts at least this many frames (the last run of a
    /// video may be cut short by the video end).
    pub min_segment: usize,
    pub max_segment: usize,
    /// Minimum distance between any two class means.
    pub mean_separation: f32,
    /// Per-dimension standard deviation around the class mean.
    pub noise: f32,
    /// Procedure groups, assigned to videos round-robin.
    pub groups: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 15,
            min_frames: 150,
            max_frames: 250,
            feat_dim: 16,
            num_classes: 4,
            min_segment: 20,
            max_segment: 60,
            mean_separation: 4.0,
            noise: 1.0,
            groups: vec!["BL".into(), "BN".into(), "SD".into()],
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), CacheError> {
        let bad = |m: &str| Err(CacheError::Invalid(format!("synthetic config: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be >= 1");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min_frames <= max_frames");
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return bad("segment range must satisfy 1 <= min_segment <= max_segment");
        }
        if self.groups.is_empty() {
            return bad("at least one group is required");
        }
        if !(self.noise >= 0.0 && self.mean_separation.is_finite()) {
            return bad("noise must be >= 0 and separation finite");
        }
        Ok(())
    }
}

/// Class `c` sits on axis `c mod d` at distance `separation * (c / d + 1)`,
/// so any two means are at least `separation` apart.
pub fn class_means(cfg: &SynthConfig) -> Vec<Vec<f32>> {
    (0..cfg.num_classes)
        .map(|c| {
            let mut m = vec![0.0f32; cfg.feat_dim];
            m[c % cfg.feat_dim] = cfg.mean_separation * (c / cfg.feat_dim + 1) as f32;
            m
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Video>, CacheError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg);
    let noise = Normal::new(0.0f32, cfg.noise).map_err(|e| CacheError::Invalid(e.to_string()))?;
    let vocabulary = default_vocabulary(cfg.num_classes);
    let classes: Vec<usize> = (0..cfg.num_classes).collect();

    let mut videos = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let group = cfg.groups[v % cfg.groups.len()].clone();
        let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);

        let mut labels = Vec::with_capacity(frames);
        let mut class = rng.random_range(0..cfg.num_classes);
        while labels.len() < frames {
            let run = rng.random_range(cfg.min_segment..=cfg.max_segment);
            let run = run.min(frames - labels.len());
            labels.extend(std::iter::repeat_n(class, run));
            let others: Vec<usize> = classes.iter().copied().filter(|&c| c != class).collect();
            class = *others.choose(&mut rng).expect("at least two classes");
        }

        let mut data = Vec::with_capacity(frames * cfg.feat_dim);
        for &y in &labels {
            data.extend(means[y].iter().map(|&m| m + noise.sample(&mut rng)));
        }
        let id = format!("{group}_{v:04}");
        videos.push(Video {
            features: FeatureSequence::new(frames, cfg.feat_dim, data, format!("synthetic:{id}"), 1)?,
            labels: LabelSequence::new(labels, vocabulary.clone()).expect("labels drawn from vocabulary"),
            id,
            group,
        });
    }
    Ok(videos)
}
