//! Training objectives: video-level classification on both T-CAMs, query
//! similarity, mutual learning, sparsity, guide and co-activity similarity,
//! plus their weighted sum.

use serde::{Deserialize, Serialize};

use crate::model::ForwardVars;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Magnitude floor for cosine distances.
pub const COSINE_FLOOR: f64 = 1e-8;

/// Multi-hot video label over the C foreground classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    classes: Vec<bool>,
}

impl LabelVector {
    pub fn new(classes: Vec<bool>) -> Result<Self> {
        if !classes.iter().any(|&b| b) {
            return Err(TensorError::Argument(
                "label has no foreground class set".into(),
            ));
        }
        Ok(Self { classes })
    }

    pub fn from_indices(num_classes: usize, active: &[usize]) -> Result<Self> {
        let mut classes = vec![false; num_classes];
        for &c in active {
            if c >= num_classes {
                return Err(TensorError::Argument(format!(
                    "class {c} out of range for {num_classes} classes"
                )));
            }
            classes[c] = true;
        }
        Self::new(classes)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.get(class).copied().unwrap_or(false)
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn shares_class_with(&self, other: &LabelVector) -> bool {
        self.active().any(|c| other.contains(c))
    }

    /// (C+1)-length target: foreground bits, then the background bit, scaled
    /// to sum to one.
    pub fn target(&self, background_positive: bool) -> Vec<f64> {
        let mut y: Vec<f64> = self.classes.iter().map(|&b| f64::from(u8::from(b))).collect();
        y.push(if background_positive { 1.0 } else { 0.0 });
        let total: f64 = y.iter().sum();
        y.iter_mut().for_each(|v| *v /= total);
        y
    }
}

/// Distance used between same-class queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QsDistance {
    #[default]
    Cosine,
    JensenShannon,
    Euclidean,
    Manhattan,
}

impl std::str::FromStr for QsDistance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "jensen_shannon" => Ok(Self::JensenShannon),
            "euclidean" => Ok(Self::Euclidean),
            "manhattan" => Ok(Self::Manhattan),
            other => Err(format!("unknown distance `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Top-k divisor: k = max(1, ⌊T/m⌋).
    pub m: usize,
    pub cas_margin: f64,
    /// Divide the L1 norms of the sparsity and guide terms by T.
    pub l1_per_segment: bool,
    pub qs_distance: QsDistance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 0.8,
            gamma: 0.8,
            m: 7,
            cas_margin: 0.5,
            l1_per_segment: true,
            qs_distance: QsDistance::Cosine,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma, self.cas_margin]
            .iter()
            .any(|w| !(*w >= 0.0))
            || self.m == 0
        {
            return Err(TensorError::Config(format!(
                "loss weights must be nonnegative and m ≥ 1: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn topk_size(t_len: usize, m: usize) -> usize {
    (t_len / m.max(1)).max(1)
}

/// Per-class mean of the top ⌊T/m⌋ activations.
pub fn topk_video_scores(tape: &mut Tape, cam: Var, m: usize) -> Result<Var> {
    let k = topk_size(tape.value(cam).cols(), m);
    tape.topk_mean_rows(cam, k)
}

/// Softmax over the class dimension.
pub fn class_pmf(tape: &mut Tape, scores: Var) -> Var {
    tape.softmax_rows(scores)
}

fn cross_entropy_branch(tape: &mut Tape, cam: Var, target: Vec<f64>, m: usize) -> Result<Var> {
    let scores = topk_video_scores(tape, cam, m)?;
    if tape.value(scores).len() != target.len() {
        return Err(TensorError::Shape {
            op: "video_cls_loss",
            lhs: tape.value(cam).shape().to_vec(),
            rhs: vec![target.len()],
        });
    }
    let log_p = tape.log_softmax_rows(scores);
    let y = tape.constant(Tensor::from_parts(vec![target.len()], target));
    let prod = tape.mul(log_p, y)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// Cross-entropy on the raw T-CAM with background positive plus the same on
/// the suppressed T-CAM with background negative.
pub fn video_cls_loss(
    tape: &mut Tape,
    tcam: Var,
    tcam_suppressed: Var,
    label: &LabelVector,
    m: usize,
) -> Result<Var> {
    let plain = cross_entropy_branch(tape, tcam, label.target(true), m)?;
    let suppressed = cross_entropy_branch(tape, tcam_suppressed, label.target(false), m)?;
    tape.add(plain, suppressed)
}

pub fn query_distance(tape: &mut Tape, a: Var, b: Var, kind: QsDistance) -> Result<Var> {
    match kind {
        QsDistance::Cosine => tape.cosine_distance(a, b, COSINE_FLOOR),
        QsDistance::Euclidean => {
            let d = tape.sub(a, b)?;
            let sq = tape.square(d);
            let s = tape.sum(sq);
            Ok(tape.sqrt(s))
        }
        QsDistance::Manhattan => {
            let d = tape.sub(a, b)?;
            let ad = tape.abs(d);
            Ok(tape.sum(ad))
        }
        QsDistance::JensenShannon => {
            // queries are mapped to distributions with a softmax first
            let p = tape.softmax_rows(a);
            let q = tape.softmax_rows(b);
            let log_p = tape.log_softmax_rows(a);
            let log_q = tape.log_softmax_rows(b);
            let pq = tape.add(p, q)?;
            let mid = tape.scale(pq, 0.5);
            let log_mid = tape.ln(mid);
            let mut kl = |dist: Var, log_dist: Var| -> Result<Var> {
                let diff = tape.sub(log_dist, log_mid)?;
                let prod = tape.mul(dist, diff)?;
                Ok(tape.sum(prod))
            };
            let kl_p = kl(p, log_p)?;
            let kl_q = kl(q, log_q)?;
            let total = tape.add(kl_p, kl_q)?;
            Ok(tape.scale(total, 0.5))
        }
    }
}

/// Mean pairwise distance between same-category queries across the batch,
/// averaged over the categories (background included) that have at least two
/// member videos. Zero when no category qualifies.
pub fn query_similarity_loss(
    tape: &mut Tape,
    queries: &[Var],
    labels: &[LabelVector],
    kind: QsDistance,
) -> Result<Var> {
    if queries.len() != labels.len() {
        return Err(TensorError::Argument(format!(
            "{} query matrices for {} labels",
            queries.len(),
            labels.len()
        )));
    }
    let Some(first) = queries.first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let num_rows = tape.value(*first).rows();
    let background = num_rows - 1;
    let mut category_terms = Vec::new();
    for k in 0..num_rows {
        let members: Vec<usize> = (0..queries.len())
            .filter(|&i| k == background || labels[i].contains(k))
            .collect();
        if members.len() < 2 {
            continue;
        }
        let rows: Vec<Var> = members
            .iter()
            .map(|&i| tape.row(queries[i], k))
            .collect::<Result<_>>()?;
        let mut pair_sum: Option<Var> = None;
        let mut pairs = 0usize;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d = query_distance(tape, rows[i], rows[j], kind)?;
                pair_sum = Some(match pair_sum {
                    Some(acc) => tape.add(acc, d)?,
                    None => d,
                });
                pairs += 1;
            }
        }
        let sum = pair_sum.expect("at least one pair");
        category_terms.push(tape.scale(sum, 1.0 / pairs as f64));
    }
    mean_of(tape, &category_terms)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// ½(‖s_rgb − sg(s_f)‖² + ‖sg(s_rgb) − s_f‖²).
pub fn mutual_learning_loss(tape: &mut Tape, s_rgb: Var, s_flow: Var) -> Result<Var> {
    let fixed_flow = tape.stop_gradient(s_flow);
    let fixed_rgb = tape.stop_gradient(s_rgb);
    let d1 = tape.sub(s_rgb, fixed_flow)?;
    let d2 = tape.sub(fixed_rgb, s_flow)?;
    let sq1 = tape.square(d1);
    let sq2 = tape.square(d2);
    let n1 = tape.sum(sq1);
    let n2 = tape.sum(sq2);
    let total = tape.add(n1, n2)?;
    Ok(tape.scale(total, 0.5))
}

fn l1(tape: &mut Tape, v: Var, per_segment: bool) -> Var {
    let a = tape.abs(v);
    if per_segment {
        tape.mean(a)
    } else {
        tape.sum(a)
    }
}

fn third_of_sum(tape: &mut Tape, a: Var, b: Var, c: Var) -> Result<Var> {
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    Ok(tape.scale(abc, 1.0 / 3.0))
}

pub fn sparsity_loss(
    tape: &mut Tape,
    s_rgb: Var,
    s_flow: Var,
    s: Var,
    per_segment: bool,
) -> Result<Var> {
    let len = tape.value(s).shape().to_vec();
    for v in [s_rgb, s_flow] {
        if tape.value(v).shape() != len.as_slice() {
            return Err(TensorError::Shape {
                op: "sparsity_loss",
                lhs: tape.value(v).shape().to_vec(),
                rhs: len,
            });
        }
    }
    let a = l1(tape, s_rgb, per_segment);
    let b = l1(tape, s_flow, per_segment);
    let c = l1(tape, s, per_segment);
    third_of_sum(tape, a, b, c)
}

/// Background row of the class-wise (column) softmax of the T-CAM.
pub fn background_probability(tape: &mut Tape, tcam: Var) -> Result<Var> {
    let rows = tape.value(tcam).rows();
    let t = tape.transpose(tcam)?;
    let sm = tape.softmax_rows(t);
    let back = tape.transpose(sm)?;
    tape.row(back, rows - 1)
}

/// (1/3) Σ ‖1 − a − s_x‖₁ over the three foreground scores.
pub fn guide_loss(
    tape: &mut Tape,
    background: Var,
    s_rgb: Var,
    s_flow: Var,
    s: Var,
    per_segment: bool,
) -> Result<Var> {
    let one_minus_a = {
        let neg = tape.scale(background, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let mut term = |v: Var| -> Result<Var> {
        let r = tape.sub(one_minus_a, v)?;
        Ok(l1(tape, r, per_segment))
    };
    let a = term(s_rgb)?;
    let b = term(s_flow)?;
    let c = term(s)?;
    third_of_sum(tape, a, b, c)
}

/// One video's contribution to the co-activity similarity loss.
#[derive(Clone, Copy, Debug)]
pub struct CoactivityInput<'a> {
    pub x_hat: Var,
    pub tcam_suppressed: Var,
    pub label: &'a LabelVector,
}

/// High- and low-attention pooled features for class `c`.
fn pooled_features(tape: &mut Tape, x_hat: Var, cam: Var, c: usize) -> Result<(Var, Var)> {
    let t_len = tape.value(x_hat).rows();
    let d = tape.value(x_hat).cols();
    let row = tape.row(cam, c)?;
    let lambda = tape.softmax_rows(row);
    let lam = tape.reshape(lambda, &[1, t_len])?;
    let high = tape.matmul(lam, x_hat)?;
    let high = tape.reshape(high, &[d])?;

    let neg = tape.scale(lambda, -1.0);
    let comp = tape.add_scalar(neg, 1.0);
    let total = tape.sum(comp);
    let comp = tape.div_by_scalar(comp, total, 1e-12)?;
    let comp = tape.reshape(comp, &[1, t_len])?;
    let low = tape.matmul(comp, x_hat)?;
    let low = tape.reshape(low, &[d])?;
    Ok((high, low))
}

/// Hinge ranking loss over every video pair and every foreground class the
/// pair shares; zero when no pair shares a class.
pub fn coactivity_loss(tape: &mut Tape, batch: &[CoactivityInput<'_>], margin: f64) -> Result<Var> {
    let mut terms = Vec::new();
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            let shared: Vec<usize> = batch[i]
                .label
                .active()
                .filter(|&c| batch[j].label.contains(c))
                .collect();
            for c in shared {
                let (hi, li) = pooled_features(tape, batch[i].x_hat, batch[i].tcam_suppressed, c)?;
                let (hj, lj) = pooled_features(tape, batch[j].x_hat, batch[j].tcam_suppressed, c)?;
                let d_hh = tape.cosine_distance(hi, hj, COSINE_FLOOR)?;
                let d_hl = tape.cosine_distance(hi, lj, COSINE_FLOOR)?;
                let d_lh = tape.cosine_distance(li, hj, COSINE_FLOOR)?;
                let mut hinge = |other: Var| -> Result<Var> {
                    let diff = tape.sub(d_hh, other)?;
                    let shifted = tape.add_scalar(diff, margin);
                    Ok(tape.relu(shifted))
                };
                let a = hinge(d_hl)?;
                let b = hinge(d_lh)?;
                let both = tape.add(a, b)?;
                terms.push(tape.scale(both, 0.5));
            }
        }
    }
    mean_of(tape, &terms)
}

/// Individual objective values (unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub vcls: f64,
    pub qs: f64,
    pub ml: f64,
    pub guide: f64,
    pub cas: f64,
    pub sparsity: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("vcls", self.vcls),
            ("qs", self.qs),
            ("ml", self.ml),
            ("guide", self.guide),
            ("cas", self.cas),
            ("sparsity", self.sparsity),
        ]
    }

    pub fn weighted(&self, w: &LossWeights) -> LossTerms {
        LossTerms {
            vcls: self.vcls,
            qs: w.alpha * self.qs,
            ml: self.ml,
            guide: w.beta * self.guide,
            cas: self.cas,
            sparsity: w.gamma * self.sparsity,
        }
    }

    pub fn sum(&self) -> f64 {
        self.named().iter().map(|(_, v)| v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub raw: LossTerms,
    pub weighted: LossTerms,
    pub total: f64,
}

/// One batch member as seen by the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct BatchMember<'a> {
    pub outputs: ForwardVars,
    pub label: &'a LabelVector,
}

/// Weighted sum of all objectives over a batch. Per-video terms are averaged
/// over the batch; query similarity and co-activity are batch-level.
/// `with_query_similarity = false` drops the query term (uniform queries).
pub fn joint_loss(
    tape: &mut Tape,
    batch: &[BatchMember<'_>],
    weights: &LossWeights,
    with_query_similarity: bool,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(TensorError::Argument("empty batch".into()));
    }
    let mut vcls = Vec::new();
    let mut ml = Vec::new();
    let mut guide = Vec::new();
    let mut sparsity = Vec::new();
    for member in batch {
        let o = member.outputs;
        vcls.push(video_cls_loss(tape, o.tcam, o.tcam_suppressed, member.label, weights.m)?);
        ml.push(mutual_learning_loss(tape, o.s_rgb, o.s_flow)?);
        let back = background_probability(tape, o.tcam)?;
        guide.push(guide_loss(tape, back, o.s_rgb, o.s_flow, o.s, weights.l1_per_segment)?);
        sparsity.push(sparsity_loss(tape, o.s_rgb, o.s_flow, o.s, weights.l1_per_segment)?);
    }
    let vcls = mean_of(tape, &vcls)?;
    let ml = mean_of(tape, &ml)?;
    let guide = mean_of(tape, &guide)?;
    let sparsity = mean_of(tape, &sparsity)?;

    let qs = if with_query_similarity {
        let queries: Vec<Var> = batch.iter().map(|b| b.outputs.q_hat).collect();
        let labels: Vec<LabelVector> = batch.iter().map(|b| b.label.clone()).collect();
        query_similarity_loss(tape, &queries, &labels, weights.qs_distance)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let cas_inputs: Vec<CoactivityInput<'_>> = batch
        .iter()
        .map(|b| CoactivityInput {
            x_hat: b.outputs.x_hat,
            tcam_suppressed: b.outputs.tcam_suppressed,
            label: b.label,
        })
        .collect();
    let cas = coactivity_loss(tape, &cas_inputs, weights.cas_margin)?;

    let raw = LossTerms {
        vcls: tape.scalar_value(vcls),
        qs: tape.scalar_value(qs),
        ml: tape.scalar_value(ml),
        guide: tape.scalar_value(guide),
        cas: tape.scalar_value(cas),
        sparsity: tape.scalar_value(sparsity),
    };
    let qs_w = tape.scale(qs, weights.alpha);
    let guide_w = tape.scale(guide, weights.beta);
    let sp_w = tape.scale(sparsity, weights.gamma);
    let mut total = vcls;
    for term in [qs_w, ml, guide_w, cas, sp_w] {
        total = tape.add(total, term)?;
    }
    let weighted = raw.weighted(weights);
    let breakdown = LossBreakdown {
        raw,
        weighted,
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.param(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn label_targets() {
        let l = LabelVector::from_indices(3, &[0, 2]).unwrap();
        let pos = l.target(true);
        let neg = l.target(false);
        assert_eq!(pos, vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(neg, vec![0.5, 0.0, 0.5, 0.0]);
        assert!(LabelVector::new(vec![false, false]).is_err());
    }

    #[test]
    fn topk_scores_examples() {
        assert_eq!(topk_size(500, 7), 71);
        assert_eq!(topk_size(3, 7), 1);
        let mut tape = Tape::new();
        let cam = tape.constant(Tensor::matrix(1, 4, vec![5.0, 1.0, 3.0, 2.0]).unwrap());
        let v = topk_video_scores(&mut tape, cam, 2).unwrap();
        assert_eq!(tape.value(v).data(), &[4.0]);
        let short = tape.constant(Tensor::matrix(2, 3, vec![0.1, 0.9, 0.3, -1.0, -2.0, -0.5]).unwrap());
        let v = topk_video_scores(&mut tape, short, 7).unwrap();
        assert_eq!(tape.value(v).data(), &[0.9, -0.5]);
    }

    #[test]
    fn class_pmf_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4]));
        let p = class_pmf(&mut tape, z);
        assert!(tape.value(p).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let v = tape.constant(Tensor::vector(vec![2f64.ln(), 0.0]).unwrap());
        let p = class_pmf(&mut tape, v);
        assert!((tape.value(p).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matched_uniform_branch_is_ln2() {
        // C = 1, label {0}: background-positive target is [1/2, 1/2]
        let label = LabelVector::from_indices(1, &[0]).unwrap();
        let mut tape = Tape::new();
        let cam = tape.constant(Tensor::matrix(2, 3, vec![0.4, 0.1, 0.2, 0.4, 0.1, 0.2]).unwrap());
        let loss = cross_entropy_branch(&mut tape, cam, label.target(true), 7).unwrap();
        assert!((tape.scalar_value(loss) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mutual_learning_examples() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, 0.0]);
        let b = vec_var(&mut tape, &[0.0, 0.0]);
        let l = mutual_learning_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar_value(l), 1.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 0.0]);
        let same = mutual_learning_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);
    }

    #[test]
    fn sparsity_examples() {
        let mut tape = Tape::new();
        let z = vec_var(&mut tape, &[0.0, 0.0]);
        let o = vec_var(&mut tape, &[1.0, 1.0]);
        let h = vec_var(&mut tape, &[1.0, 0.0]);
        let l = sparsity_loss(&mut tape, z, z, z, true).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        let l = sparsity_loss(&mut tape, o, o, o, true).unwrap();
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-15);
        let l = sparsity_loss(&mut tape, h, h, h, true).unwrap();
        assert!((tape.scalar_value(l) - 0.5).abs() < 1e-15);
        let raw = sparsity_loss(&mut tape, o, o, o, false).unwrap();
        assert!((tape.scalar_value(raw) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn guide_examples() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[0.2, 0.7, 0.5]);
        let s = vec_var(&mut tape, &[0.8, 0.3, 0.5]);
        let l = guide_loss(&mut tape, a, s, s, s, true).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-15);
        let z = vec_var(&mut tape, &[0.0; 3]);
        let l = guide_loss(&mut tape, z, z, z, z, true).unwrap();
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn query_similarity_examples() {
        let labels = vec![
            LabelVector::from_indices(2, &[0]).unwrap(),
            LabelVector::from_indices(2, &[0]).unwrap(),
        ];
        let mut tape = Tape::new();
        // rows: class 0, class 1, background
        let q1 = tape.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.2], vec![0.0, 1.0]]).unwrap());
        let q2 = tape.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![-0.5, 0.9], vec![0.0, 1.0]]).unwrap());
        let l = query_similarity_loss(&mut tape, &[q1, q2], &labels, QsDistance::Cosine).unwrap();
        // class 0 identical, class 1 unshared, background identical
        assert!(tape.scalar_value(l).abs() < 1e-15);

        let q3 = tape.param(Tensor::from_rows(&[vec![-1.0, 0.0], vec![0.3, 0.2], vec![0.0, 1.0]]).unwrap());
        let l = query_similarity_loss(&mut tape, &[q1, q3], &labels, QsDistance::Cosine).unwrap();
        // class 0 antipodal (2), background identical (0) → mean 1
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-15);

        let single = query_similarity_loss(&mut tape, &[q1], &labels[..1], QsDistance::Cosine).unwrap();
        assert_eq!(tape.scalar_value(single), 0.0);
    }

    #[test]
    fn coactivity_no_shared_class_is_zero() {
        let labels = [
            LabelVector::from_indices(2, &[0]).unwrap(),
            LabelVector::from_indices(2, &[1]).unwrap(),
        ];
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[3, 2], 0.5));
        let a = tape.param(Tensor::full(&[3, 3], 0.1));
        let batch: Vec<_> = labels
            .iter()
            .map(|label| CoactivityInput {
                x_hat: x,
                tcam_suppressed: a,
                label,
            })
            .collect();
        let l = coactivity_loss(&mut tape, &batch, 0.5).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn distances_vanish_on_identical_queries() {
        for kind in [
            QsDistance::Cosine,
            QsDistance::JensenShannon,
            QsDistance::Euclidean,
            QsDistance::Manhattan,
        ] {
            let mut tape = Tape::new();
            let a = vec_var(&mut tape, &[0.3, -0.7, 1.1]);
            let d = query_distance(&mut tape, a, a, kind).unwrap();
            assert!(tape.scalar_value(d).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { m: 0, ..Default::default() }.validate().is_err());
    }
}
