//! Per-frame phase labels and their on-disk formats.
//!
//! Labels are stored as CSV with header `frame,label` (one row per frame,
//! frames `0..T` each exactly once) next to a vocabulary JSON file holding the
//! ordered array of phase names. A segments JSON
//! (`[{"label": 3, "start": 0, "end": 41}, ...]`, inclusive ends) is also
//! accepted and expanded to frames.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("label {label} at frame {frame} is outside the {classes}-class vocabulary")]
    OutOfRange {
        frame: usize,
        label: usize,
        classes: usize,
    },
    #[error("duplicate phase name {0:?} in vocabulary")]
    DuplicateName(String),
    #[error("{0}")]
    Invalid(String),
}

/// Length-`T` sequence of class indices with its phase vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    labels: Vec<usize>,
    vocabulary: Vec<String>,
}

impl LabelSequence {
    pub fn new(labels: Vec<usize>, vocabulary: Vec<String>) -> Result<Self, LabelError> {
        let mut seen = HashSet::new();
        for name in &vocabulary {
            if !seen.insert(name.as_str()) {
                return Err(LabelError::DuplicateName(name.clone()));
            }
        }
        if let Some((frame, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= vocabulary.len()) {
            return Err(LabelError::OutOfRange {
                frame,
                label,
                classes: vocabulary.len(),
            });
        }
        Ok(Self { labels, vocabulary })
    }

    /// Vocabulary `phase_00 .. phase_{C-1}`.
    pub fn with_default_vocabulary(labels: Vec<usize>, num_classes: usize) -> Result<Self, LabelError> {
        Self::new(labels, default_vocabulary(num_classes))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self {
            labels: self.labels[..len.min(self.labels.len())].to_vec(),
            vocabulary: self.vocabulary.clone(),
        }
    }
}

pub fn default_vocabulary(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("phase_{c:02}")).collect()
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    frame: usize,
    label: usize,
}

#[derive(Deserialize)]
struct SegmentRecord {
    label: usize,
    start: usize,
    end: usize,
}

fn parse_err(path: &Path, message: impl Into<String>) -> LabelError {
    LabelError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_string(path: &Path) -> Result<String, LabelError> {
    fs::read_to_string(path).map_err(|source| LabelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<Vec<String>, LabelError> {
    let path = path.as_ref();
    let vocab: Vec<String> =
        serde_json::from_str(&read_string(path)?).map_err(|e| parse_err(path, e.to_string()))?;
    // Runs the duplicate check.
    LabelSequence::new(Vec::new(), vocab.clone())?;
    Ok(vocab)
}

pub fn write_vocabulary(vocabulary: &[String], path: impl AsRef<Path>) -> Result<(), LabelError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(vocabulary).map_err(|e| parse_err(path, e.to_string()))?;
    fs::write(path, json).map_err(|source| LabelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_label_csv(path: impl AsRef<Path>, vocabulary: &[String]) -> Result<LabelSequence, LabelError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["frame", "label"] {
        return Err(parse_err(path, format!("expected header `frame,label`, found {headers:?}")));
    }
    let mut slots: Vec<Option<usize>> = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| parse_err(path, e.to_string()))?;
        if row.frame >= slots.len() {
            slots.resize(row.frame + 1, None);
        }
        if slots[row.frame].replace(row.label).is_some() {
            return Err(parse_err(path, format!("frame {} listed twice", row.frame)));
        }
    }
    let labels = slots
        .into_iter()
        .enumerate()
        .map(|(f, l)| l.ok_or_else(|| parse_err(path, format!("frame {f} missing"))))
        .collect::<Result<Vec<_>, _>>()?;
    if labels.is_empty() {
        return Err(parse_err(path, "no frames"));
    }
    LabelSequence::new(labels, vocabulary.to_vec())
}

pub fn write_label_csv(labels: &LabelSequence, path: impl AsRef<Path>) -> Result<(), LabelError> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    for (frame, &label) in labels.as_slice().iter().enumerate() {
        writer
            .serialize(CsvRow { frame, label })
            .map_err(|e| parse_err(path, e.to_string()))?;
    }
    writer.flush().map_err(|source| LabelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_segments_json(path: impl AsRef<Path>, vocabulary: &[String]) -> Result<LabelSequence, LabelError> {
    let path = path.as_ref();
    let segments: Vec<SegmentRecord> =
        serde_json::from_str(&read_string(path)?).map_err(|e| parse_err(path, e.to_string()))?;
    let mut labels = Vec::new();
    for s in &segments {
        if s.start != labels.len() || s.end < s.start {
            return Err(parse_err(
                path,
                format!("segment [{}, {}] does not continue at frame {}", s.start, s.end, labels.len()),
            ));
        }
        labels.extend(std::iter::repeat_n(s.label, s.end - s.start + 1));
    }
    if labels.is_empty() {
        return Err(parse_err(path, "no segments"));
    }
    LabelSequence::new(labels, vocabulary.to_vec())
}

/// Dispatches on extension: `.json` is read as segments, anything else as CSV.
pub fn read_labels(path: impl AsRef<Path>, vocabulary: &[String]) -> Result<LabelSequence, LabelError> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_segments_json(path, vocabulary),
        _ => read_label_csv(path, vocabulary),
    }
}
