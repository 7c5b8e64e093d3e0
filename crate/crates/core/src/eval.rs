//! Temporal IoU, per-class average precision and mAP tables.
//!
//! Matching follows the usual benchmark semantics: detections are visited
//! in descending score order (ties broken by video id, then start time); a
//! detection is a true positive when the best-overlapping ground truth in
//! its video that is still unmatched reaches the tIoU threshold, and that
//! ground truth is then consumed. AP is the sum of precision at every true
//! positive divided by the number of ground-truth instances.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: String,
    pub class: String,
    pub t_start: f64,
    pub t_end: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSegment {
    pub video: String,
    pub class: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// Intersection over union of two time intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s < e) {
            return Err(Error::Argument(format!("degenerate interval [{s}, {e}]")));
        }
    }
    Ok(tiou_unchecked(a, b))
}

pub(crate) fn tiou_unchecked(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn ranking(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.video.cmp(&b.video))
        .then_with(|| a.t_start.total_cmp(&b.t_start))
        .then_with(|| a.t_end.total_cmp(&b.t_end))
}

/// AP of one class's detections against that class's ground truth.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruthSegment],
    threshold: f64,
) -> f64 {
    if detections.is_empty() || ground_truth.is_empty() {
        return 0.0;
    }
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| ranking(a, b));

    let mut by_video: HashMap<&str, Vec<(usize, (f64, f64))>> = HashMap::new();
    for (i, g) in ground_truth.iter().enumerate() {
        by_video
            .entry(g.video.as_str())
            .or_default()
            .push((i, (g.t_start, g.t_end)));
    }
    let mut matched = vec![false; ground_truth.len()];
    let mut tp = 0usize;
    let mut precision_sum = 0.0;
    for (rank, det) in order.iter().enumerate() {
        let best = by_video.get(det.video.as_str()).and_then(|gts| {
            gts.iter()
                .filter(|(i, _)| !matched[*i])
                .map(|(i, g)| (*i, tiou_unchecked((det.t_start, det.t_end), *g)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        });
        if let Some((i, overlap)) = best {
            if overlap >= threshold {
                matched[i] = true;
                tp += 1;
                precision_sum += tp as f64 / (rank + 1) as f64;
            }
        }
    }
    precision_sum / ground_truth.len() as f64
}

/// A named average over a contiguous set of thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandAverage {
    pub name: String,
    pub thresholds: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground-truth instance, vocabulary order.
    pub classes: Vec<String>,
    /// `ap[class][threshold]`
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
    pub bands: Vec<BandAverage>,
}

fn hundredths(lo: u32, hi: u32, step: u32) -> Vec<f64> {
    (lo..=hi).step_by(step as usize).map(|h| f64::from(h) / 100.0).collect()
}

/// 0.1..0.7 step 0.1 together with 0.5..0.95 step 0.05.
pub fn default_thresholds() -> Vec<f64> {
    let mut all: Vec<u32> = (10..=70).step_by(10).chain((50..=95).step_by(5)).collect();
    all.sort_unstable();
    all.dedup();
    all.into_iter().map(|h| f64::from(h) / 100.0).collect()
}

/// Standard averaging bands: three short-video bands and one
/// long-video band.
pub fn standard_bands() -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("0.1:0.5", hundredths(10, 50, 10)),
        ("0.3:0.7", hundredths(30, 70, 10)),
        ("0.1:0.7", hundredths(10, 70, 10)),
        ("0.5:0.95", hundredths(50, 95, 5)),
    ]
}

fn position(thresholds: &[f64], t: f64) -> Option<usize> {
    thresholds.iter().position(|&x| (x - t).abs() < 1e-9)
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        position(&self.thresholds, threshold).map(|i| self.map[i])
    }

    pub fn band(&self, name: &str) -> Option<f64> {
        self.bands.iter().find(|b| b.name == name).map(|b| b.value)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "class");
        for t in &self.thresholds {
            let _ = write!(out, " {:>6}", format!("{t:.2}"));
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.ap) {
            let _ = write!(out, "{c:<16}");
            for v in row {
                let _ = write!(out, " {:>6.2}", 100.0 * v);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<16}", "mAP");
        for v in &self.map {
            let _ = write!(out, " {:>6.2}", 100.0 * v);
        }
        out.push('\n');
        for b in &self.bands {
            let _ = writeln!(out, "avg mAP {:<8} {:>6.2}", b.name, 100.0 * b.value);
        }
        out
    }

    /// `key=value` lines, one per metric.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (t, v) in self.thresholds.iter().zip(&self.map) {
            let _ = writeln!(out, "map@{t:.2}={v:.6}");
        }
        for b in &self.bands {
            let _ = writeln!(out, "avg_map@{}={:.6}", b.name, b.value);
        }
        for (c, row) in self.classes.iter().zip(&self.ap) {
            for (t, v) in self.thresholds.iter().zip(row) {
                let _ = writeln!(out, "ap.{c}@{t:.2}={v:.6}");
            }
        }
        out
    }
}

/// AP for every (class, threshold), mAP over classes that have ground
/// truth, and every standard band whose member thresholds were evaluated.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruthSegment],
    vocabulary: &[String],
    thresholds: &[f64],
) -> Result<EvalReport> {
    let known = |c: &str| vocabulary.iter().any(|v| v == c);
    if let Some(d) = detections.iter().find(|d| !known(&d.class)) {
        return Err(Error::Config(format!(
            "detection class `{}` is not in the vocabulary",
            d.class
        )));
    }
    if let Some(g) = ground_truth.iter().find(|g| !known(&g.class)) {
        return Err(Error::Config(format!(
            "ground-truth class `{}` is not in the vocabulary",
            g.class
        )));
    }
    for g in ground_truth {
        tiou((g.t_start, g.t_end), (g.t_start, g.t_end))?;
    }

    let mut dets: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        dets.entry(d.class.as_str()).or_default().push(d.clone());
    }
    let mut gts: BTreeMap<&str, Vec<GroundTruthSegment>> = BTreeMap::new();
    for g in ground_truth {
        gts.entry(g.class.as_str()).or_default().push(g.clone());
    }

    let classes: Vec<String> = vocabulary
        .iter()
        .filter(|c| gts.contains_key(c.as_str()))
        .cloned()
        .collect();
    let ap: Vec<Vec<f64>> = classes
        .iter()
        .map(|c| {
            let d = dets.get(c.as_str()).map_or(&[][..], Vec::as_slice);
            let g = &gts[c.as_str()];
            thresholds
                .iter()
                .map(|&t| average_precision(d, g, t))
                .collect()
        })
        .collect();
    let map: Vec<f64> = (0..thresholds.len())
        .map(|i| {
            if classes.is_empty() {
                0.0
            } else {
                ap.iter().map(|row| row[i]).sum::<f64>() / classes.len() as f64
            }
        })
        .collect();
    let bands = standard_bands()
        .into_iter()
        .filter_map(|(name, members)| {
            let idx: Option<Vec<usize>> = members.iter().map(|&t| position(thresholds, t)).collect();
            idx.map(|idx| BandAverage {
                name: name.to_string(),
                value: idx.iter().map(|&i| map[i]).sum::<f64>() / idx.len() as f64,
                thresholds: members,
            })
        })
        .collect();
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        ap,
        map,
        bands,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(video: &str, s: f64, e: f64, score: f64) -> Detection {
        Detection {
            video: video.into(),
            class: "a".into(),
            t_start: s,
            t_end: e,
            score,
        }
    }

    fn gt(video: &str, s: f64, e: f64) -> GroundTruthSegment {
        GroundTruthSegment {
            video: video.into(),
            class: "a".into(),
            t_start: s,
            t_end: e,
        }
    }

    #[test]
    fn tiou_examples() {
        assert!((tiou((0.0, 10.0), (5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tiou((2.0, 3.0), (2.0, 3.0)).unwrap(), 1.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!(tiou((1.0, 1.0), (0.0, 2.0)).is_err());
    }

    #[test]
    fn ap_examples() {
        let g = [gt("v", 0.0, 10.0)];
        assert_eq!(average_precision(&[det("v", 1.0, 10.0, 0.9)], &g, 0.5), 1.0);
        assert_eq!(average_precision(&[], &g, 0.5), 0.0);
        // second detection duplicates the first: precision 1 at rank 1 only
        let d = [det("v", 0.0, 10.0, 0.9), det("v", 0.0, 10.0, 0.8)];
        assert_eq!(average_precision(&d, &g, 0.5), 1.0);
        // false positive ranked first halves the precision at the hit
        let d = [det("w", 0.0, 10.0, 0.9), det("v", 0.0, 10.0, 0.8)];
        assert_eq!(average_precision(&d, &g, 0.5), 0.5);
    }

    #[test]
    fn evaluate_exact_match_and_bands() {
        let vocab = vec!["a".to_string(), "b".to_string()];
        let gts = vec![
            gt("v1", 1.0, 4.0),
            GroundTruthSegment { class: "b".into(), ..gt("v2", 2.0, 9.0) },
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                video: g.video.clone(),
                class: g.class.clone(),
                t_start: g.t_start,
                t_end: g.t_end,
                score: 1.0,
            })
            .collect();
        let r = evaluate(&dets, &gts, &vocab, &default_thresholds()).unwrap();
        assert!(r.map.iter().all(|&m| m == 1.0));
        assert_eq!(r.bands.len(), 4);

        let empty = evaluate(&[], &gts, &vocab, &default_thresholds()).unwrap();
        assert!(empty.map.iter().all(|&m| m == 0.0));
        let mean7: f64 = (1..=7).map(|i| empty.map_at(i as f64 / 10.0).unwrap()).sum::<f64>() / 7.0;
        assert_eq!(empty.band("0.1:0.7").unwrap(), mean7);
    }

    #[test]
    fn class_outside_vocabulary_is_config_error() {
        let vocab = vec!["a".to_string()];
        let d = Detection { class: "zzz".into(), ..det("v", 0.0, 1.0, 0.5) };
        assert!(matches!(
            evaluate(&[d], &[gt("v", 0.0, 1.0)], &vocab, &[0.5]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let vocab = vec!["a".to_string(), "b".to_string()];
        let r = evaluate(&[det("v", 0.0, 1.0, 0.5)], &[gt("v", 0.0, 1.0)], &vocab, &[0.5]).unwrap();
        assert_eq!(r.classes, vec!["a".to_string()]);
        assert_eq!(r.map, vec![1.0]);
        let text = r.to_key_values();
        assert!(text.contains("map@0.50=1.000000"));
    }
}
