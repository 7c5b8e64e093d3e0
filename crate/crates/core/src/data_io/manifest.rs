//! JSON dataset manifest.
//!
//! ```json
//! {
//!   "classes": ["action0", "action1"],
//!   "videos": [
//!     {
//!       "id": "train_000",
//!       "features": "features/train_000.vqkf",
//!       "fps": 25.0,
//!       "frames_per_segment": 16,
//!       "labels": ["action1"],
//!       "segments": [{ "class": "action1", "t_start": 3.2, "t_end": 7.04 }]
//!     }
//!   ]
//! }
//! ```
//!
//! Feature paths are resolved relative to the manifest's directory.
//! `frames_per_segment`, `labels` and `segments` are optional.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::read_features;
use crate::error::{Error, Result};
use crate::eval::GroundTruthSegment;
use crate::inference::SegmentTiming;
use crate::losses::LabelVector;
use crate::tensor::Tensor;

fn default_frames_per_segment() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub class: String,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub features: PathBuf,
    pub fps: f64,
    #[serde(default = "default_frames_per_segment")]
    pub frames_per_segment: usize,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub segments: Vec<SegmentAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub videos: Vec<VideoEntry>,
}

/// A manifest entry with its features loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: Tensor,
    pub label: Option<LabelVector>,
    pub timing: SegmentTiming,
    pub ground_truth: Vec<GroundTruthSegment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn ground_truth(&self) -> Vec<GroundTruthSegment> {
        self.videos.iter().flat_map(|v| v.ground_truth.iter().cloned()).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.cols())
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Structural checks that need no file access.
    pub fn validate_entries(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::Manifest(format!("duplicate class `{c}`")));
            }
        }
        if self.classes.is_empty() {
            return Err(Error::Manifest("empty class vocabulary".into()));
        }
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(&v.id) {
                return Err(Error::Manifest(format!("duplicate video id `{}`", v.id)));
            }
            if !(v.fps > 0.0) || v.frames_per_segment == 0 {
                return Err(Error::Manifest(format!(
                    "video `{}`: fps and frames_per_segment must be positive",
                    v.id
                )));
            }
            let names = v.labels.iter().chain(v.segments.iter().map(|s| &s.class));
            for name in names {
                if self.class_index(name).is_none() {
                    return Err(Error::Manifest(format!(
                        "video `{}`: unknown class `{name}`",
                        v.id
                    )));
                }
            }
            if let Some(s) = v.segments.iter().find(|s| !(s.t_start < s.t_end)) {
                return Err(Error::Manifest(format!(
                    "video `{}`: segment [{}, {}] is empty",
                    v.id, s.t_start, s.t_end
                )));
            }
        }
        Ok(())
    }

    /// Full validation: structure, then every feature file must exist and
    /// parse. Returns the loaded dataset.
    pub fn load_videos(&self, base_dir: &Path) -> Result<Dataset> {
        self.validate_entries()?;
        let mut width = None;
        let mut videos = Vec::with_capacity(self.videos.len());
        for entry in &self.videos {
            let path = base_dir.join(&entry.features);
            if !path.is_file() {
                return Err(Error::Manifest(format!(
                    "video `{}`: feature file {} does not exist",
                    entry.id,
                    path.display()
                )));
            }
            let features = read_features(&path)?;
            let d = features.cols();
            if *width.get_or_insert(d) != d {
                return Err(Error::Manifest(format!(
                    "video `{}`: feature width {d} differs from {}",
                    entry.id,
                    width.unwrap_or(0)
                )));
            }
            let label = if entry.labels.is_empty() {
                None
            } else {
                let idx: Vec<usize> = entry
                    .labels
                    .iter()
                    .filter_map(|l| self.class_index(l))
                    .collect();
                Some(LabelVector::from_indices(self.classes.len(), &idx)?)
            };
            videos.push(Video {
                id: entry.id.clone(),
                features,
                label,
                timing: SegmentTiming {
                    fps: entry.fps,
                    frames_per_segment: entry.frames_per_segment,
                },
                ground_truth: entry
                    .segments
                    .iter()
                    .map(|s| GroundTruthSegment {
                        video: entry.id.clone(),
                        class: s.class.clone(),
                        t_start: s.t_start,
                        t_end: s.t_end,
                    })
                    .collect(),
            });
        }
        Ok(Dataset {
            classes: self.classes.clone(),
            videos,
        })
    }
}

/// Reads, validates and loads the manifest at `path`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.load_videos(base)
}
