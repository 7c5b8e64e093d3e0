//! Turning model outputs into scored temporal proposals: video-level class
//! filtering, multi-threshold segment extraction on the foreground score,
//! outer-inner contrastive scoring and soft-NMS.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{tiou_unchecked, Detection};
use crate::data_io::Video;
use crate::model::{forward, ModelConfig, ModelOutputs, ModelParams, QueryMode};
use crate::tensor::{topk_indices, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionProposal {
    pub t_start: f64,
    pub t_end: f64,
    /// Zero-based foreground class index.
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub class_threshold: f64,
    pub proposal_thresholds: Vec<f64>,
    pub nms_iou: f64,
    pub oic_inflation: f64,
    pub min_score: f64,
    /// Top-k divisor used for the video-level class probability.
    pub m: usize,
    /// Multiply the outer-inner score by the video-level class probability.
    pub fuse_class_probability: bool,
}

/// 0.1, 0.18, ..., 0.9.
pub fn default_proposal_thresholds() -> Vec<f64> {
    (0..=10).map(|i| 0.1 + 0.08 * f64::from(i)).collect()
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            class_threshold: 0.2,
            proposal_thresholds: default_proposal_thresholds(),
            nms_iou: 0.7,
            oic_inflation: 0.25,
            min_score: 0.0,
            m: 7,
            fuse_class_probability: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let th = &self.proposal_thresholds;
        if th.is_empty()
            || th.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || th.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "proposal thresholds must be strictly increasing inside (0, 1): {th:?}"
            )));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seconds per segment index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentTiming {
    pub fps: f64,
    pub frames_per_segment: usize,
}

impl Default for SegmentTiming {
    fn default() -> Self {
        Self {
            fps: 25.0,
            frames_per_segment: 16,
        }
    }
}

impl SegmentTiming {
    pub fn seconds(&self, index: usize) -> f64 {
        index as f64 * self.frames_per_segment as f64 / self.fps
    }
}

/// Foreground class probabilities from the suppressed T-CAM: top-k pooling
/// per class, softmax over all C+1 classes, background dropped.
pub fn video_class_probs(tcam_suppressed: &Tensor, m: usize) -> Vec<f64> {
    let t_len = tcam_suppressed.cols();
    let k = crate::losses::topk_size(t_len, m);
    let scores: Vec<f64> = (0..tcam_suppressed.rows())
        .map(|c| {
            let row = tcam_suppressed.row(c);
            topk_indices(row, k)
                .iter()
                .map(|&i| row[i])
                .sum::<f64>()
                / k as f64
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp[..exp.len() - 1].iter().map(|e| e / total).collect()
}

/// Maximal runs of consecutive indices with `s[t] >= threshold`, as
/// inclusive (start, end) pairs.
pub fn extract_segments(s: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &v) in s.iter().enumerate() {
        match (v >= threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(b)) => {
                runs.push((b, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(b) = start {
        runs.push((b, s.len() - 1));
    }
    runs
}

/// Inner mean over `[start, end]` minus the mean over a collar of
/// ⌈inflation·len⌉ segments on each side (clipped to the sequence).
pub fn oic_score(row: &[f64], start: usize, end: usize, inflation: f64) -> f64 {
    let len = end - start + 1;
    let inner = row[start..=end].iter().sum::<f64>() / len as f64;
    let collar = (inflation * len as f64).ceil() as usize;
    let lo = start.saturating_sub(collar);
    let hi = (end + collar).min(row.len() - 1);
    let outer: Vec<f64> = row[lo..start].iter().chain(&row[end + 1..=hi]).copied().collect();
    let outer_mean = if outer.is_empty() {
        0.0
    } else {
        outer.iter().sum::<f64>() / outer.len() as f64
    };
    inner - outer_mean
}

/// Per-class linear soft-NMS: overlapping proposals above `iou_threshold`
/// have their score multiplied by (1 − tIoU); anything at or below
/// `min_score` is dropped. Output is sorted by descending score.
pub fn soft_nms(proposals: &[ActionProposal], iou_threshold: f64, min_score: f64) -> Vec<ActionProposal> {
    let mut classes: Vec<usize> = proposals.iter().map(|p| p.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::new();
    for class in classes {
        let mut pool: Vec<ActionProposal> = proposals
            .iter()
            .filter(|p| p.class_id == class && p.score > min_score)
            .cloned()
            .collect();
        while !pool.is_empty() {
            let best = (0..pool.len())
                .max_by(|&a, &b| {
                    pool[a]
                        .score
                        .total_cmp(&pool[b].score)
                        .then(pool[b].t_start.total_cmp(&pool[a].t_start))
                        .then(b.cmp(&a))
                })
                .expect("non-empty");
            let top = pool.swap_remove(best);
            for p in pool.iter_mut() {
                let overlap = tiou_unchecked((top.t_start, top.t_end), (p.t_start, p.t_end));
                if overlap > iou_threshold {
                    p.score *= 1.0 - overlap;
                }
            }
            pool.retain(|p| p.score > min_score);
            kept.push(top);
        }
    }
    kept.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.t_start.total_cmp(&b.t_start))
    });
    kept
}

/// Full proposal generation for one video.
pub fn localize(outputs: &ModelOutputs, timing: SegmentTiming, config: &InferenceConfig) -> Vec<ActionProposal> {
    let a_hat = &outputs.tcam_suppressed;
    let probs = video_class_probs(a_hat, config.m);
    let keep: Vec<usize> = (0..probs.len())
        .filter(|&c| probs[c] >= config.class_threshold)
        .collect();
    if keep.is_empty() {
        return Vec::new();
    }
    let s = outputs.s.data();
    let mut pool = Vec::new();
    for &threshold in &config.proposal_thresholds {
        for (start, end) in extract_segments(s, threshold) {
            for &c in &keep {
                let mut score = oic_score(a_hat.row(c), start, end, config.oic_inflation);
                if config.fuse_class_probability {
                    score *= probs[c];
                }
                pool.push(ActionProposal {
                    t_start: timing.seconds(start),
                    t_end: timing.seconds(end + 1),
                    class_id: c,
                    score,
                });
            }
        }
    }
    soft_nms(&pool, config.nms_iou, config.min_score)
}

/// One line of the proposal file. Fields serialize in declaration order:
/// video, class, t_start, t_end, score.
pub type ProposalRecord = Detection;

pub fn write_proposals(path: &Path, records: &[ProposalRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::parse(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_proposals(path: &Path) -> Result<Vec<ProposalRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        if !(rec.t_start < rec.t_end) || !rec.score.is_finite() {
            return Err(Error::parse(path, format!("line {}: invalid proposal", n + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Runs the model over whole videos (no resampling) and returns named
/// detections ready for evaluation or the proposal file.
pub fn detect_videos(
    videos: &[Video],
    classes: &[String],
    params: &ModelParams,
    model_config: &ModelConfig,
    mode: QueryMode,
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    config.validate()?;
    let mut out = Vec::new();
    for video in videos {
        let outputs = forward(&video.features, params, model_config, mode)?;
        for p in localize(&outputs, video.timing, config) {
            out.push(Detection {
                video: video.id.clone(),
                class: classes[p.class_id].clone(),
                t_start: p.t_start,
                t_end: p.t_end,
                score: p.score,
            });
        }
    }
    Ok(out)
}
