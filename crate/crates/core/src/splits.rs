//! Stratified K-fold splits balanced by procedure-type prefix.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("K must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("duplicate video id {0}")]
    DuplicateId(String),
    #[error("fold index {index} out of range for {folds} folds")]
    FoldOutOfRange { index: usize, folds: usize },
    #[error("manifest entry {video}: missing file {path}")]
    MissingFile { video: String, path: PathBuf },
    #[error("fold spec is not a partition: {0}")]
    NotPartition(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub group: String,
    pub features: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Class-name list shared by every label file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<PathBuf>,
    pub entries: Vec<ManifestEntry>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SplitError> {
    let text = fs::read_to_string(path).map_err(|source| SplitError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| SplitError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), SplitError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|source| SplitError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, SplitError> {
        let m = Self { vocabulary: None, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.video_id.as_str()) {
                return Err(SplitError::DuplicateId(e.video_id.clone()));
            }
        }
        Ok(())
    }

    /// Fails on the first entry whose feature or label file is absent.
    /// Relative paths resolve against `base`.
    pub fn check_files(&self, base: &Path) -> Result<(), SplitError> {
        for e in &self.entries {
            for p in [&e.features, &e.labels] {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(SplitError::MissingFile {
                        video: e.video_id.clone(),
                        path: full,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, video_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.video_id == video_id)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SplitError> {
        let m: Self = read_json(path.as_ref())?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SplitError> {
        write_json(self, path.as_ref())
    }
}

/// Held-out membership of each fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub folds: Vec<Vec<String>>,
}

impl FoldSpec {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, SplitError> {
        let spec: Self = read_json(path.as_ref())?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SplitError> {
        write_json(self, path.as_ref())
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        if self.k < 2 {
            return Err(SplitError::TooFewFolds(self.k));
        }
        if self.folds.len() != self.k {
            return Err(SplitError::NotPartition(format!("K = {} but {} folds listed", self.k, self.folds.len())));
        }
        let mut seen = HashSet::new();
        for id in self.folds.iter().flatten() {
            if !seen.insert(id) {
                return Err(SplitError::NotPartition(format!("{id} appears in more than one fold")));
            }
        }
        Ok(())
    }

    pub fn num_videos(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    /// `(train ids, test ids)` with fold `k` held out.
    pub fn fold_iter(&self, k: usize) -> Result<(Vec<String>, Vec<String>), SplitError> {
        if k >= self.k {
            return Err(SplitError::FoldOutOfRange { index: k, folds: self.k });
        }
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        Ok((train, self.folds[k].clone()))
    }
}

/// Shuffles each prefix group with `seed` and deals the videos round-robin
/// into `k` folds.
///
/// Groups are processed in name order and the dealing pointer carries over
/// from one group to the next, so fold sizes also differ by at most one.
pub fn stratified_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldSpec, SplitError> {
    if k < 2 {
        return Err(SplitError::TooFewFolds(k));
    }
    if manifest.entries.is_empty() {
        return Err(SplitError::EmptyManifest);
    }
    manifest.validate()?;

    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        groups.entry(e.group.as_str()).or_default().push(e.video_id.as_str());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (name, mut ids) in groups {
        if ids.len() < k {
            log::warn!("group {name} has {} videos for {k} folds; some folds get none", ids.len());
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids {
            folds[next].push(id.to_string());
            next = (next + 1) % k;
        }
    }
    Ok(FoldSpec { seed, k, folds })
}
