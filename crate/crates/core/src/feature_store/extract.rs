//! Producer side of the cache format.
//!
//! The real extractor runs frozen vision encoders outside this crate. The
//! [`RandomExtractor`] stands in for it with seeded Gaussian embeddings of the
//! right shape, so the whole pipeline runs without any encoder installed.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{clip_centers, clip_embeddings_to_frames, write_cache, CacheError, ClipSpec, EncoderSpec, FeatureSequence};

pub trait FeatureExtractor {
    fn encoder(&self) -> &EncoderSpec;

    /// Features for a video of `frames` frames. Frame encoders return one
    /// row every `stride` frames; clip encoders return full-rate rows.
    fn extract(&mut self, video_id: &str, frames: usize) -> Result<FeatureSequence, CacheError>;

    /// Extracts and writes `<dir>/<video_id>.psfc`.
    fn extract_to_dir(&mut self, video_id: &str, frames: usize, dir: &Path) -> Result<PathBuf, CacheError> {
        let seq = self.extract(video_id, frames)?;
        let path = dir.join(format!("{video_id}.psfc"));
        write_cache(&seq, &path)?;
        Ok(path)
    }
}

/// Seeded random embeddings with an encoder's output shape and sampling.
#[derive(Clone, Debug)]
pub struct RandomExtractor {
    pub encoder: EncoderSpec,
    pub stride: usize,
    pub seed: u64,
}

impl RandomExtractor {
    pub fn new(encoder: EncoderSpec, stride: usize, seed: u64) -> Result<Self, CacheError> {
        if stride == 0 {
            return Err(CacheError::Invalid("stride must be >= 1".into()));
        }
        Ok(Self { encoder, stride, seed })
    }

    fn rng(&self, video_id: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.encoder.name.as_bytes());
        h.update(video_id.as_bytes());
        let digest = h.finalize();
        ChaCha8Rng::from_seed(digest.into())
    }

    fn rows(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n * self.encoder.feat_dim).map(|_| StandardNormal.sample(rng)).collect()
    }
}

impl FeatureExtractor for RandomExtractor {
    fn encoder(&self) -> &EncoderSpec {
        &self.encoder
    }

    fn extract(&mut self, video_id: &str, frames: usize) -> Result<FeatureSequence, CacheError> {
        if frames == 0 {
            return Err(CacheError::Invalid(format!("{video_id}: empty video")));
        }
        let mut rng = self.rng(video_id);
        let (d, tag) = (self.encoder.feat_dim, self.encoder.name);
        match self.encoder.clip_len {
            None => {
                let samples = frames.div_ceil(self.stride);
                let data = self.rows(&mut rng, samples);
                FeatureSequence::new(samples, d, data, tag, self.stride as u32)
            }
            Some(clip_len) => {
                let plan = clip_centers(frames, &ClipSpec::new(clip_len as usize, self.stride)?);
                let data = self.rows(&mut rng, plan.len());
                let clips = FeatureSequence::new(plan.len(), d, data, tag, self.stride as u32)?;
                clip_embeddings_to_frames(&plan, &clips, frames)
            }
        }
    }
}
