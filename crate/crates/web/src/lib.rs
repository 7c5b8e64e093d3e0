//! Browser demo: trains a small model on a generated dataset inside the page
//! and exposes activations, proposals and evaluation to JavaScript.
//!
//! Everything crosses the boundary as flat `Vec<f64>` or JSON strings so the
//! same API is usable (and tested) natively.

use serde_json::json;
use wasm_bindgen::prelude::*;

use vqknet::config::RunConfig;
use vqknet::data_io::{generate_synthetic, SyntheticDataset, Video};
use vqknet::eval::{default_thresholds, evaluate};
use vqknet::inference::{detect_videos, localize, InferenceConfig};
use vqknet::model::{forward, ModelOutputs};
use vqknet::trainer::Trainer;

fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::synthetic();
    cfg.synth.train_videos = 30;
    cfg.synth.test_videos = 8;
    cfg.synth.min_segments = 48;
    cfg.synth.max_segments = 64;
    cfg.model.hidden_dim = 16;
    cfg.train.segments = 48;
    cfg
}

#[wasm_bindgen]
pub struct DemoSession {
    data: SyntheticDataset,
    test: Vec<Video>,
    trainer: Trainer,
    inference: InferenceConfig,
    last_loss: f64,
}

#[wasm_bindgen]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<DemoSession, String> {
        let mut cfg = demo_config();
        cfg.train.seed = u64::from(seed);
        let data = generate_synthetic(&cfg.synth, u64::from(seed)).map_err(|e| e.to_string())?;
        let trainer = Trainer::new(cfg.model, cfg.train, &data.train_videos(), &data.classes)
            .map_err(|e| e.to_string())?;
        Ok(Self {
            test: data.test_videos(),
            data,
            trainer,
            inference: cfg.inference,
            last_loss: f64::NAN,
        })
    }

    /// Runs `epochs` epochs and returns the mean joint loss of the last one.
    pub fn train(&mut self, epochs: u32) -> Result<f64, String> {
        for _ in 0..epochs {
            self.last_loss = self.trainer.run_epoch(None).map_err(|e| e.to_string())?.total;
        }
        Ok(self.last_loss)
    }

    pub fn epoch(&self) -> u32 {
        self.trainer.epoch() as u32
    }

    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    pub fn class_names(&self) -> String {
        self.data.classes.join(",")
    }

    pub fn num_classes(&self) -> usize {
        self.data.classes.len()
    }

    pub fn num_videos(&self) -> usize {
        self.test.len()
    }

    pub fn video_length(&self, video: usize) -> usize {
        self.test.get(video).map_or(0, |v| v.features.rows())
    }

    pub fn seconds_per_segment(&self, video: usize) -> f64 {
        self.test.get(video).map_or(0.0, |v| v.timing.seconds(1))
    }

    /// Adjusts the inference thresholds used by `localize` and `evaluate`.
    pub fn set_thresholds(&mut self, class_threshold: f64, nms_iou: f64) {
        self.inference.class_threshold = class_threshold.clamp(0.0, 1.0);
        self.inference.nms_iou = nms_iou.clamp(0.0, 1.0);
    }

    /// Foreground probability per segment.
    pub fn foreground(&self, video: usize) -> Vec<f64> {
        self.outputs(video).map_or_else(Vec::new, |o| o.s.into_data())
    }

    /// Background-suppressed activation map, (C+1) rows of T, row-major.
    pub fn activation(&self, video: usize) -> Vec<f64> {
        self.outputs(video)
            .map_or_else(Vec::new, |o| o.tcam_suppressed.into_data())
    }

    /// Planted instances as (class, first segment, last segment) triples.
    pub fn ground_truth(&self, video: usize) -> Vec<f64> {
        self.data.test.get(video).map_or_else(Vec::new, |v| {
            v.spans
                .iter()
                .flat_map(|s| [s.class_id as f64, s.start as f64, s.end as f64])
                .collect()
        })
    }

    /// Proposals as (class, start seconds, end seconds, score) quadruples.
    pub fn localize(&self, video: usize) -> Vec<f64> {
        let (Some(v), Some(o)) = (self.test.get(video), self.outputs(video)) else {
            return Vec::new();
        };
        localize(&o, v.timing, &self.inference)
            .iter()
            .flat_map(|p| [p.class_id as f64, p.t_start, p.t_end, p.score])
            .collect()
    }

    /// Test-split evaluation as JSON: mAP per threshold and band averages.
    pub fn evaluate(&self) -> Result<String, String> {
        let c = self.trainer.checkpoint();
        let dets = detect_videos(&self.test, &self.data.classes, &c.params, &c.model, c.train.mode, &self.inference)
            .map_err(|e| e.to_string())?;
        let gts: Vec<_> = self.test.iter().flat_map(|v| v.ground_truth.clone()).collect();
        let report = evaluate(&dets, &gts, &self.data.classes, &default_thresholds()).map_err(|e| e.to_string())?;
        let map: Vec<_> = report
            .thresholds
            .iter()
            .zip(&report.map)
            .map(|(t, m)| json!({ "threshold": t, "map": m }))
            .collect();
        let bands: Vec<_> = report
            .bands
            .iter()
            .map(|b| json!({ "name": b.name, "value": b.value }))
            .collect();
        Ok(json!({ "detections": dets.len(), "map": map, "bands": bands }).to_string())
    }
}

impl DemoSession {
    fn outputs(&self, video: usize) -> Option<ModelOutputs> {
        let v = self.test.get(video)?;
        let c = self.trainer.config();
        forward(&v.features, self.trainer.params(), self.trainer.model_config(), c.mode).ok()
    }
}
