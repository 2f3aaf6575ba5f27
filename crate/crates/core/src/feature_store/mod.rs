//! Per-frame feature cache.
//!
//! A [`FeatureSequence`] is the frozen encoder output for one video: `T` rows
//! of `d` features, frame-major. Caches are stored in the `PSFC` binary
//! format:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "PSFC"
//! 4       1         format version (1)
//! 5       4         frame count T        (u32 LE)
//! 9       4         feature dim d        (u32 LE)
//! 13      4         raw sampling stride  (u32 LE)
//! 17      4         source tag length n  (u32 LE)
//! 21      n         source tag (UTF-8)
//! 21+n    4*T*d     payload, f32 LE, frame-major
//! ```

mod clip;
mod extract;
mod labels;
mod synth;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use clip::{clip_centers, clip_embeddings_to_frames, ClipPlacement, ClipSpec};
pub use extract::{FeatureExtractor, RandomExtractor};
pub use labels::{
    default_vocabulary, read_label_csv, read_labels, read_segments_json, read_vocabulary,
    write_label_csv, write_vocabulary, LabelError, LabelSequence,
};
pub use synth::{class_means, generate_synthetic, SynthConfig};

pub const CACHE_MAGIC: &[u8; 4] = b"PSFC";
pub const CACHE_VERSION: u8 = 1;
const HEADER_LEN: usize = 21;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"PSFC\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported cache format version {0}")]
    UnsupportedVersion(u8),
    #[error("header truncated: {0} bytes")]
    TruncatedHeader(usize),
    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    PayloadSize { expected: usize, actual: usize },
    #[error("non-finite feature value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },
    #[error("source tag is not valid UTF-8")]
    BadTag,
    #[error("invalid feature sequence: {0}")]
    Invalid(String),
}

/// `T x d` matrix of per-frame embeddings plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frame_count: usize,
    feat_dim: usize,
    data: Vec<f32>,
    source_tag: String,
    stride: u32,
}

impl FeatureSequence {
    pub fn new(
        frame_count: usize,
        feat_dim: usize,
        data: Vec<f32>,
        source_tag: impl Into<String>,
        stride: u32,
    ) -> Result<Self, CacheError> {
        if frame_count == 0 || feat_dim == 0 {
            return Err(CacheError::Invalid(format!(
                "frame_count and feat_dim must be >= 1 (got T={frame_count}, d={feat_dim})"
            )));
        }
        if stride == 0 {
            return Err(CacheError::Invalid("stride must be >= 1".into()));
        }
        if data.len() != frame_count * feat_dim {
            return Err(CacheError::Invalid(format!(
                "data has {} entries, expected {}",
                data.len(),
                frame_count * feat_dim
            )));
        }
        check_finite(&data, feat_dim)?;
        Ok(Self {
            frame_count,
            feat_dim,
            data,
            source_tag: source_tag.into(),
            stride,
        })
    }

    /// Builds a full-rate sequence from per-frame rows.
    pub fn from_rows(rows: &[Vec<f32>], source_tag: impl Into<String>) -> Result<Self, CacheError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(CacheError::Invalid("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), d, data, source_tag, 1)
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.feat_dim..(t + 1) * self.feat_dim]
    }

    /// First `len` frames.
    pub fn prefix(&self, len: usize) -> Result<Self, CacheError> {
        let len = len.min(self.frame_count);
        Self::new(
            len,
            self.feat_dim,
            self.data[..len * self.feat_dim].to_vec(),
            self.source_tag.clone(),
            self.stride,
        )
    }

    /// Serialized `PSFC` bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CacheError> {
        check_finite(&self.data, self.feat_dim)?;
        let tag = self.source_tag.as_bytes();
        let mut out = Vec::with_capacity(HEADER_LEN + tag.len() + 4 * self.data.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.push(CACHE_VERSION);
        for v in [self.frame_count, self.feat_dim, self.stride as usize, tag.len()] {
            out.extend_from_slice(&to_u32(v)?.to_le_bytes());
        }
        out.extend_from_slice(tag);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CacheError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != CACHE_MAGIC {
                return Err(CacheError::BadMagic {
                    found: bytes[..4].try_into().unwrap(),
                });
            }
            return Err(CacheError::TruncatedHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != CACHE_MAGIC {
            return Err(CacheError::BadMagic { found: magic });
        }
        if bytes[4] != CACHE_VERSION {
            return Err(CacheError::UnsupportedVersion(bytes[4]));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let (t, d, stride, tag_len) = (word(0), word(1), word(2), word(3));
        let tag_end = HEADER_LEN + tag_len;
        if bytes.len() < tag_end {
            return Err(CacheError::TruncatedHeader(bytes.len()));
        }
        let tag = std::str::from_utf8(&bytes[HEADER_LEN..tag_end]).map_err(|_| CacheError::BadTag)?;
        let payload = &bytes[tag_end..];
        let expected = t
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CacheError::Invalid(format!("T={t}, d={d} overflows")))?;
        if payload.len() != expected {
            return Err(CacheError::PayloadSize {
                expected,
                actual: payload.len(),
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(t, d, data, tag, stride as u32)
    }
}

fn to_u32(v: usize) -> Result<u32, CacheError> {
    u32::try_from(v).map_err(|_| CacheError::Invalid(format!("{v} does not fit the u32 header field")))
}

fn check_finite(data: &[f32], feat_dim: usize) -> Result<(), CacheError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(CacheError::NonFinite {
            frame: i / feat_dim,
            dim: i % feat_dim,
        }),
        None => Ok(()),
    }
}

pub fn write_cache(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<(), CacheError> {
    let path = path.as_ref();
    let bytes = seq.to_bytes()?;
    let io_err = |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<FeatureSequence, CacheError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    FeatureSequence::from_bytes(&bytes)
}

/// Expands a strided extraction to full frame rate.
///
/// Row `i` of `seq` is taken to be the feature at frame `i * stride`. Frames
/// strictly between two samples are linearly interpolated; frames past the
/// last sample repeat it.
pub fn interpolate_to_full_rate(
    seq: &FeatureSequence,
    target_frames: usize,
) -> Result<FeatureSequence, CacheError> {
    let stride = seq.stride as usize;
    if stride == 0 {
        return Err(CacheError::Invalid("stride must be >= 1".into()));
    }
    let samples = seq.frame_count;
    if target_frames < samples {
        return Err(CacheError::Invalid(format!(
            "target length {target_frames} is shorter than the {samples} raw samples"
        )));
    }
    let d = seq.feat_dim;
    let mut data = Vec::with_capacity(target_frames * d);
    for t in 0..target_frames {
        let i = t / stride;
        if i + 1 >= samples {
            data.extend_from_slice(seq.frame(samples - 1));
            continue;
        }
        let a = (i * stride) as f64;
        let b = a + stride as f64;
        let (fa, fb) = (seq.frame(i), seq.frame(i + 1));
        let tt = t as f64;
        data.extend(fa.iter().zip(fb).map(|(&va, &vb)| {
            (((b - tt) * va as f64 + (tt - a) * vb as f64) / stride as f64) as f32
        }));
    }
    FeatureSequence::new(target_frames, d, data, seq.source_tag.clone(), 1)
}

/// One reconciled video: cached features, labels and its procedure group.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub group: String,
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}

/// Frames dropped from each stream by [`reconcile_lengths`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Truncation {
    pub dropped_features: usize,
    pub dropped_labels: usize,
}

/// Truncates features and labels to their shared prefix length.
pub fn reconcile_lengths(
    feat: &FeatureSequence,
    labels: &LabelSequence,
) -> Result<(FeatureSequence, LabelSequence, Option<Truncation>), CacheError> {
    let n = feat.frame_count.min(labels.len());
    if n == 0 {
        return Err(CacheError::Invalid("no shared frames between features and labels".into()));
    }
    let truncation = Truncation {
        dropped_features: feat.frame_count - n,
        dropped_labels: labels.len() - n,
    };
    if truncation.dropped_features == 0 && truncation.dropped_labels == 0 {
        return Ok((feat.clone(), labels.clone(), None));
    }
    log::warn!(
        "{}: truncating to {n} frames ({} feature frames, {} label frames dropped)",
        feat.source_tag,
        truncation.dropped_features,
        truncation.dropped_labels
    );
    Ok((feat.prefix(n)?, labels.prefix(n), Some(truncation)))
}

/// Per-frame feature dimensionality of the encoders the pipeline is used with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub name: &'static str,
    pub input_resolution: u32,
    /// Clip length for video encoders.
    pub clip_len: Option<u32>,
    pub feat_dim: usize,
}

pub const KNOWN_ENCODERS: [EncoderSpec; 7] = [
    EncoderSpec { name: "resnet50-imagenet", input_resolution: 224, clip_len: None, feat_dim: 2048 },
    EncoderSpec { name: "i3d-r50-kinetics", input_resolution: 224, clip_len: Some(16), feat_dim: 2048 },
    EncoderSpec { name: "dinov3-vitb16", input_resolution: 224, clip_len: None, feat_dim: 768 },
    EncoderSpec { name: "dinov3-vitl16", input_resolution: 224, clip_len: None, feat_dim: 1024 },
    EncoderSpec { name: "dinov3-vit7b16", input_resolution: 224, clip_len: None, feat_dim: 4096 },
    EncoderSpec { name: "vjepa2-vitl", input_resolution: 256, clip_len: Some(64), feat_dim: 1024 },
    EncoderSpec { name: "vjepa2-vitg16", input_resolution: 384, clip_len: Some(64), feat_dim: 1408 },
];
