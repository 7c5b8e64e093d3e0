//! Seeded synthetic stand-in for pre-extracted two-stream features.
//!
//! Each class has a prototype vector. A video is a per-video background
//! vector plus white noise; every planted action instance blends its class
//! prototype in over the instance span, with a one-segment half-strength
//! ramp on either side.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::write_features;
use super::manifest::{DatasetManifest, SegmentAnnotation, Video, VideoEntry};
use crate::error::{Error, Result};
use crate::eval::GroundTruthSegment;
use crate::inference::SegmentTiming;
use crate::losses::LabelVector;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-segment white noise.
    pub noise: f64,
    /// Standard deviation of the per-video background vector entries.
    pub background_level: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Probability that a video carries a second action class.
    pub multi_label_prob: f64,
    pub fps: f64,
    pub frames_per_segment: usize,
    pub min_prototype_distance: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            train_videos: 50,
            test_videos: 20,
            min_segments: 60,
            max_segments: 60,
            feature_dim: 32,
            noise: 0.1,
            background_level: 0.5,
            min_instances: 1,
            max_instances: 2,
            min_duration: 4,
            max_duration: 10,
            multi_label_prob: 0.3,
            fps: 25.0,
            frames_per_segment: 16,
            min_prototype_distance: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_classes == 0 || self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return fail("need at least one class and an even feature_dim");
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return fail("segment range is empty");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return fail("duration range is empty");
        }
        if self.max_duration + 4 > self.min_segments {
            return fail("max_duration + 4 must fit inside min_segments");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail("instance range is empty");
        }
        if !(self.noise >= 0.0 && self.fps > 0.0 && self.frames_per_segment > 0) {
            return fail("noise must be nonnegative; fps and frames_per_segment positive");
        }
        Ok(())
    }

    pub fn timing(&self) -> SegmentTiming {
        SegmentTiming {
            fps: self.fps,
            frames_per_segment: self.frames_per_segment,
        }
    }
}

/// Ground truth expressed in segment indices, inclusive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpan {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub video: Video,
    pub spans: Vec<PlantedSpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub classes: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
    pub train: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-12)
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn prototypes(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..10_000 {
        let candidate: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| gaussian(rng, spec.feature_dim, 1.0))
            .collect();
        let ok = (0..candidate.len()).all(|i| {
            (i + 1..candidate.len())
                .all(|j| cosine_distance(&candidate[i], &candidate[j]) >= spec.min_prototype_distance)
        });
        if ok {
            return Ok(candidate);
        }
    }
    Err(Error::Config(format!(
        "could not draw {} prototypes {} apart in {} dimensions",
        spec.num_classes, spec.min_prototype_distance, spec.feature_dim
    )))
}

fn place_instances(
    spec: &SyntheticSpec,
    t_len: usize,
    classes: &[usize],
    rng: &mut impl Rng,
) -> Vec<PlantedSpan> {
    let mut spans: Vec<PlantedSpan> = Vec::new();
    let gap = 2;
    for &class_id in classes {
        let count = rng.gen_range(spec.min_instances..=spec.max_instances);
        let mut placed = 0;
        for _ in 0..count * 200 {
            if placed == count {
                break;
            }
            let dur = rng.gen_range(spec.min_duration..=spec.max_duration);
            let start = rng.gen_range(1..=t_len - dur - 1);
            let end = start + dur - 1;
            let clear = spans
                .iter()
                .all(|s| end + gap < s.start || s.end + gap < start);
            if clear {
                spans.push(PlantedSpan {
                    class_id,
                    start,
                    end,
                });
                placed += 1;
            }
        }
    }
    spans.sort_by_key(|s| s.start);
    spans
}

fn render(
    spec: &SyntheticSpec,
    t_len: usize,
    spans: &[PlantedSpan],
    protos: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Tensor {
    let d = spec.feature_dim;
    let background = gaussian(rng, d, spec.background_level);
    let mut data = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        let mut blend = 0.0;
        let mut class = None;
        for s in spans {
            let w = if (s.start..=s.end).contains(&t) {
                1.0
            } else if t + 1 == s.start || t == s.end + 1 {
                0.5
            } else {
                0.0
            };
            if w > blend {
                blend = w;
                class = Some(s.class_id);
            }
        }
        let noise = gaussian(rng, d, spec.noise);
        for j in 0..d {
            let fg = class.map_or(0.0, |c| protos[c][j]);
            data.push((1.0 - blend) * background[j] + blend * fg + noise[j]);
        }
    }
    Tensor::from_parts(vec![t_len, d], data)
}

fn make_video(
    spec: &SyntheticSpec,
    id: String,
    classes: &[String],
    protos: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<SyntheticVideo> {
    let t_len = rng.gen_range(spec.min_segments..=spec.max_segments);
    let mut chosen = vec![rng.gen_range(0..spec.num_classes)];
    if spec.num_classes > 1 && rng.gen_bool(spec.multi_label_prob.clamp(0.0, 1.0)) {
        let mut rest: Vec<usize> = (0..spec.num_classes).filter(|c| *c != chosen[0]).collect();
        rest.shuffle(rng);
        chosen.push(rest[0]);
    }
    let spans = place_instances(spec, t_len, &chosen, rng);
    let mut present: Vec<usize> = spans.iter().map(|s| s.class_id).collect();
    present.sort_unstable();
    present.dedup();
    let features = render(spec, t_len, &spans, protos, rng);
    let timing = spec.timing();
    let ground_truth = spans
        .iter()
        .map(|s| GroundTruthSegment {
            video: id.clone(),
            class: classes[s.class_id].clone(),
            t_start: timing.seconds(s.start),
            t_end: timing.seconds(s.end + 1),
        })
        .collect();
    Ok(SyntheticVideo {
        video: Video {
            id,
            features,
            label: Some(LabelVector::from_indices(spec.num_classes, &present)?),
            timing,
            ground_truth,
        },
        spans,
    })
}

/// Deterministic for a given (spec, seed).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<String> = (0..spec.num_classes).map(|c| format!("action{c}")).collect();
    let protos = prototypes(spec, &mut rng)?;
    let train = (0..spec.train_videos)
        .map(|i| make_video(spec, format!("train_{i:03}"), &classes, &protos, &mut rng))
        .collect::<Result<_>>()?;
    let test = (0..spec.test_videos)
        .map(|i| make_video(spec, format!("test_{i:03}"), &classes, &protos, &mut rng))
        .collect::<Result<_>>()?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        classes,
        prototypes: protos,
        train,
        test,
    })
}

impl SyntheticDataset {
    pub fn train_videos(&self) -> Vec<Video> {
        self.train.iter().map(|v| v.video.clone()).collect()
    }

    pub fn test_videos(&self) -> Vec<Video> {
        self.test.iter().map(|v| v.video.clone()).collect()
    }

    fn manifest(&self, split: &[SyntheticVideo]) -> DatasetManifest {
        DatasetManifest {
            classes: self.classes.clone(),
            videos: split
                .iter()
                .map(|v| {
                    let label = v.video.label.as_ref().expect("synthetic videos are labelled");
                    VideoEntry {
                        id: v.video.id.clone(),
                        features: PathBuf::from("features").join(format!("{}.vqkf", v.video.id)),
                        fps: v.video.timing.fps,
                        frames_per_segment: v.video.timing.frames_per_segment,
                        labels: label.active().map(|c| self.classes[c].clone()).collect(),
                        segments: v
                            .video
                            .ground_truth
                            .iter()
                            .map(|g| SegmentAnnotation {
                                class: g.class.clone(),
                                t_start: g.t_start,
                                t_end: g.t_end,
                            })
                            .collect(),
                    }
                })
                .collect(),
        }
    }

    /// Writes `features/*.vqkf`, `train.json` and `test.json` under `dir`.
    /// Returns the two manifest paths.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let feat_dir = dir.join("features");
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        for v in self.train.iter().chain(&self.test) {
            write_features(&feat_dir.join(format!("{}.vqkf", v.video.id)), &v.video.features)?;
        }
        let train = dir.join("train.json");
        let test = dir.join("test.json");
        self.manifest(&self.train).save(&train)?;
        self.manifest(&self.test).save(&test)?;
        Ok((train, test))
    }
}
