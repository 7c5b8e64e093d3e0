//! Optimization loop: stratified segment sampling, batches constrained to
//! contain videos that share action classes, Adam, checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, adam_update, AdamConfig, OptimizerState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::Video;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::inference::{detect_videos, InferenceConfig};
use crate::losses::{joint_loss, BatchMember, LabelVector, LossBreakdown, LossTerms, LossWeights};
use crate::model::{forward_on_tape, ModelConfig, ModelParams, QueryMode};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Minimum number of unordered video pairs per batch that share at least
    /// one action class.
    pub min_shared_pairs: usize,
    /// Segments sampled from each training video.
    pub segments: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub epochs: usize,
    pub seed: u64,
    pub mode: QueryMode,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub validate_every: usize,
    pub max_batch_retries: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            min_shared_pairs: 3,
            segments: 500,
            learning_rate: 5e-5,
            weight_decay: 1e-3,
            decoupled_weight_decay: false,
            epochs: 100,
            seed: 0,
            mode: QueryMode::VideoSpecific,
            validate_every: 0,
            max_batch_retries: 1000,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.segments == 0 {
            return Err(Error::Config("segments must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning_rate must be positive and weight_decay nonnegative".into(),
            ));
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::new(self.learning_rate, self.weight_decay)
        }
    }
}

/// Stratified draw of `target` indices from `0..len`: the range is cut into
/// `target` equal bins and one index is drawn uniformly from each.
pub fn sample_segment_indices(len: usize, target: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(len >= 1, "cannot sample from an empty video");
    (0..target)
        .map(|i| {
            let lo = i * len / target;
            let hi = ((i + 1) * len / target).max(lo + 1);
            rng.gen_range(lo..hi)
        })
        .collect()
}

pub fn sample_segments(features: &Tensor, target: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let idx = sample_segment_indices(features.rows(), target, rng);
    Ok(features.select_rows(&idx)?)
}

pub fn shared_pairs(labels: &[&LabelVector]) -> usize {
    let mut n = 0;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i].shares_class_with(labels[j]) {
                n += 1;
            }
        }
    }
    n
}

fn batch_pairs(batch: &[usize], labels: &[LabelVector]) -> usize {
    let refs: Vec<&LabelVector> = batch.iter().map(|&i| &labels[i]).collect();
    shared_pairs(&refs)
}

fn deficiency_error(labels: &[LabelVector], classes: &[String], config: &TrainConfig) -> Error {
    let num_classes = labels.first().map_or(classes.len(), LabelVector::num_classes);
    let deficient: Vec<String> = (0..num_classes)
        .filter(|&c| labels.iter().filter(|l| l.contains(c)).count() < 2)
        .map(|c| classes.get(c).cloned().unwrap_or_else(|| format!("#{c}")))
        .collect();
    Error::Config(format!(
        "cannot build batches of {} videos with {} shared-class pairs each; classes with fewer than two videos: [{}]",
        config.batch_size,
        config.min_shared_pairs,
        deficient.join(", ")
    ))
}

/// Partitions a shuffled epoch into batches of exactly `batch_size`; the last
/// batch is topped up with videos not already in it.
fn shuffled_epoch(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if let Some(last) = batches.last_mut() {
        if last.len() < batch_size {
            let mut extra: Vec<usize> = (0..n).filter(|i| !last.contains(i)).collect();
            extra.shuffle(rng);
            let need = batch_size - last.len();
            last.extend_from_slice(&extra[..need]);
        }
    }
    batches
}

/// Applies `(slot in batch bi, other batch, slot there)` swaps to a copy,
/// rejecting any that would duplicate a video inside a batch.
fn apply_swaps(batches: &[Vec<usize>], bi: usize, swaps: &[(usize, usize, usize)]) -> Option<Vec<Vec<usize>>> {
    let mut out = batches.to_vec();
    for &(a, bj, b) in swaps {
        let (va, vb) = (out[bi][a], out[bj][b]);
        if out[bi].contains(&vb) || out[bj].contains(&va) {
            return None;
        }
        out[bi][a] = vb;
        out[bj][b] = va;
    }
    Some(out)
}

/// Swaps members between batches until every batch meets the pair minimum.
/// Single swaps that raise the deficient batch's pair count are tried
/// first, then swaps that bring in two videos sharing a class at once.
/// Partner batches are never pushed below the minimum (unless they are
/// still waiting for their own repair), and swaps preserve every video's
/// appearance.
fn repair(batches: &mut Vec<Vec<usize>>, labels: &[LabelVector], min_pairs: usize) -> bool {
    let ok = |b: &[usize]| batch_pairs(b, labels) >= min_pairs;
    let nb = batches.len();
    for bi in 0..nb {
        while !ok(&batches[bi]) {
            let current = batch_pairs(&batches[bi], labels);
            let acceptable = |old: &[Vec<usize>], new: &[Vec<usize>]| {
                batch_pairs(&new[bi], labels) > current
                    && (0..nb).all(|bj| bj == bi || ok(&new[bj]) || (!ok(&old[bj]) && bj > bi))
            };
            let size = batches[bi].len();
            let mut found = None;
            'single: for a in 0..size {
                for bj in (0..nb).filter(|&bj| bj != bi) {
                    for b in 0..batches[bj].len() {
                        if let Some(new) = apply_swaps(batches, bi, &[(a, bj, b)]) {
                            if acceptable(batches, &new) {
                                found = Some(new);
                                break 'single;
                            }
                        }
                    }
                }
            }
            if found.is_none() {
                let outside: Vec<(usize, usize)> = (0..nb)
                    .filter(|&bj| bj != bi)
                    .flat_map(|bj| (0..batches[bj].len()).map(move |b| (bj, b)))
                    .collect();
                'double: for (x, &(bj1, b1)) in outside.iter().enumerate() {
                    for &(bj2, b2) in &outside[x + 1..] {
                        let (u, w) = (batches[bj1][b1], batches[bj2][b2]);
                        if u == w || !labels[u].shares_class_with(&labels[w]) {
                            continue;
                        }
                        for a1 in 0..size {
                            for a2 in (0..size).filter(|&a2| a2 != a1) {
                                let swaps = [(a1, bj1, b1), (a2, bj2, b2)];
                                if let Some(new) = apply_swaps(batches, bi, &swaps) {
                                    if acceptable(batches, &new) {
                                        found = Some(new);
                                        break 'double;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            match found {
                Some(new) => *batches = new,
                None => return false,
            }
        }
    }
    true
}

/// One epoch of batches. Every batch has exactly `batch_size` distinct
/// videos and at least `min_shared_pairs` shared-class pairs, and every
/// video appears at least once.
pub fn make_batches(
    labels: &[LabelVector],
    classes: &[String],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if n < config.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {n} available training videos",
            config.batch_size
        )));
    }
    let satisfied =
        |bs: &[Vec<usize>]| bs.iter().all(|b| batch_pairs(b, labels) >= config.min_shared_pairs);
    let mut last = Vec::new();
    for _ in 0..config.max_batch_retries.max(1) {
        last = shuffled_epoch(n, config.batch_size, rng);
        if satisfied(&last) {
            return Ok(last);
        }
    }
    if repair(&mut last, labels, config.min_shared_pairs) {
        assert!(satisfied(&last));
        return Ok(last);
    }
    Err(deficiency_error(labels, classes, config))
}

/// Per-epoch record: mean of every loss term over the epoch's batches and,
/// when validation ran, the headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub raw: LossTerms,
    pub total: f64,
    pub validation: Option<ValidationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub map_at_05: f64,
    pub avg_map_01_07: f64,
}

pub struct ValidationSet<'a> {
    pub videos: &'a [Video],
    pub inference: &'a InferenceConfig,
}

struct Sample {
    features: Tensor,
    label: LabelVector,
}

/// Stateful trainer, one optimizer step at a time.
pub struct Trainer {
    model_config: ModelConfig,
    config: TrainConfig,
    classes: Vec<String>,
    params: ModelParams,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    samples: Vec<Sample>,
    epoch: usize,
    step: usize,
}

impl Trainer {
    /// Initializes parameters from `config.seed`. Every training video must
    /// carry a label.
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        videos: &[Video],
        classes: &[String],
    ) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        if classes.len() != model_config.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset vocabulary has {}",
                model_config.num_classes,
                classes.len()
            )));
        }
        let mut samples = Vec::with_capacity(videos.len());
        for v in videos {
            let label = v.label.clone().ok_or_else(|| {
                Error::Manifest(format!("training video `{}` has no labels", v.id))
            })?;
            if v.features.cols() != model_config.feature_dim {
                return Err(Error::Config(format!(
                    "video `{}` has feature width {}, model expects {}",
                    v.id,
                    v.features.cols(),
                    model_config.feature_dim
                )));
            }
            samples.push(Sample {
                features: v.features.clone(),
                label,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&model_config, &mut rng)?;
        let optimizer = OptimizerState::new(&params);
        Ok(Self {
            model_config,
            config,
            classes: classes.to_vec(),
            params,
            optimizer,
            rng,
            samples,
            epoch: 0,
            step: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model_config.clone(),
            train: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    fn with_qs(&self) -> bool {
        self.config.mode == QueryMode::VideoSpecific
    }

    /// Joint loss and parameter gradients for a batch of already-sampled
    /// feature matrices.
    pub fn loss_and_gradients(
        &self,
        features: &[Tensor],
        labels: &[&LabelVector],
    ) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let mut outputs = Vec::with_capacity(features.len());
        for f in features {
            outputs.push(forward_on_tape(&mut tape, f, &vars, &self.model_config, self.config.mode)?);
        }
        let batch: Vec<BatchMember<'_>> = outputs
            .iter()
            .zip(labels)
            .map(|(o, l)| BatchMember {
                outputs: *o,
                label: l,
            })
            .collect();
        let (loss, breakdown) = joint_loss(&mut tape, &batch, &self.config.loss, self.with_qs())?;
        for (term, value) in breakdown.raw.named() {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term,
                    value,
                    epoch: self.epoch,
                    step: self.step,
                });
            }
        }
        let grads = tape.backward(loss)?;
        let grads = vars.named().into_iter().map(|(_, v)| grads.wrt(*v)).collect();
        Ok((breakdown, grads))
    }

    /// Joint loss only, without touching any state.
    pub fn batch_loss(&self, features: &[Tensor], labels: &[&LabelVector]) -> Result<LossBreakdown> {
        Ok(self.loss_and_gradients(features, labels)?.0)
    }

    /// One Adam step on the given batch. Returns the loss before the step.
    pub fn step_on(&mut self, features: &[Tensor], labels: &[&LabelVector]) -> Result<LossBreakdown> {
        let (breakdown, grads) = self.loss_and_gradients(features, labels)?;
        adam_step(&mut self.params, &grads, &mut self.optimizer, &self.config.adam())?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Draws one epoch of batches and segment samples from the trainer's
    /// random stream.
    pub fn next_epoch_batches(&mut self) -> Result<Vec<(Vec<Tensor>, Vec<LabelVector>)>> {
        let labels: Vec<LabelVector> = self.samples.iter().map(|s| s.label.clone()).collect();
        let batches = make_batches(&labels, &self.classes, &self.config, &mut self.rng)?;
        let mut out = Vec::with_capacity(batches.len());
        for batch in batches {
            let mut feats = Vec::with_capacity(batch.len());
            for &i in &batch {
                feats.push(sample_segments(&self.samples[i].features, self.config.segments, &mut self.rng)?);
            }
            out.push((feats, batch.iter().map(|&i| labels[i].clone()).collect()));
        }
        Ok(out)
    }

    pub fn run_epoch(&mut self, validation: Option<&ValidationSet<'_>>) -> Result<EpochLog> {
        let batches = self.next_epoch_batches()?;
        let mut sum = LossTerms::default();
        let mut total = 0.0;
        for (feats, labels) in &batches {
            let refs: Vec<&LabelVector> = labels.iter().collect();
            let b = self.step_on(feats, &refs)?;
            sum.vcls += b.raw.vcls;
            sum.qs += b.raw.qs;
            sum.ml += b.raw.ml;
            sum.guide += b.raw.guide;
            sum.cas += b.raw.cas;
            sum.sparsity += b.raw.sparsity;
            total += b.total;
        }
        self.epoch += 1;
        let n = batches.len() as f64;
        let raw = LossTerms {
            vcls: sum.vcls / n,
            qs: sum.qs / n,
            ml: sum.ml / n,
            guide: sum.guide / n,
            cas: sum.cas / n,
            sparsity: sum.sparsity / n,
        };
        let due = self.config.validate_every > 0 && self.epoch % self.config.validate_every == 0;
        let validation = match validation {
            Some(v) if due => {
                let report = self.evaluate(v.videos, v.inference)?;
                Some(ValidationMetrics {
                    map_at_05: report.map_at(0.5).unwrap_or(0.0),
                    avg_map_01_07: report.band("0.1:0.7").unwrap_or(0.0),
                })
            }
            _ => None,
        };
        Ok(EpochLog {
            epoch: self.epoch,
            batches: batches.len(),
            raw,
            total: total / n,
            validation,
        })
    }

    /// Localizes and scores `videos` with the current parameters.
    pub fn evaluate(&self, videos: &[Video], inference: &InferenceConfig) -> Result<EvalReport> {
        let dets = detect_videos(
            videos,
            &self.classes,
            &self.params,
            &self.model_config,
            self.config.mode,
            inference,
        )?;
        let gts: Vec<_> = videos.iter().flat_map(|v| v.ground_truth.iter().cloned()).collect();
        evaluate(&dets, &gts, &self.classes, &crate::eval::default_thresholds())
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Full run of `config.epochs` epochs.
pub fn train(
    model_config: ModelConfig,
    config: TrainConfig,
    videos: &[Video],
    classes: &[String],
    validation: Option<&ValidationSet<'_>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_config, config, videos, classes)?;
    let mut log = Vec::new();
    for _ in 0..trainer.config.epochs {
        let entry = trainer.run_epoch(validation)?;
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log,
    })
}
