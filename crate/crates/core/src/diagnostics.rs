//! Finite-difference gradient suite over every tape op, every model stage
//! and every loss term, at small random shapes. Shared by the `gradcheck`
//! subcommand and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{
    background_probability, coactivity_loss, guide_loss, joint_loss, mutual_learning_loss,
    query_similarity_loss, sparsity_loss, video_cls_loss, BatchMember, CoactivityInput, LabelVector,
    LossWeights, QsDistance,
};
use crate::model::{
    attention_block, forward_on_tape, foreground_stream, fuse_features, qk_attention,
    suppress_background, AttentionBlock, ConvLayer, ModelConfig, ModelParams, Params, QueryMode,
};
use crate::tensor::{finite_diff_check, finite_diff_check_with, Result, Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Seed that produced `max_rel_error`.
    pub worst_seed: u64,
    pub entries_checked: usize,
}

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    fn even(&mut self, lo: usize, hi: usize) -> usize {
        2 * self.rng.gen_range(lo / 2..=hi / 2).max(1)
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()).expect("finite")
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        self.uniform(shape, -1.0, 1.0)
    }

    /// Entries bounded away from zero, random sign (for kinked ops).
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let mut t = self.uniform(shape, 0.1, 1.0);
        for v in t.data_mut() {
            if self.rng.gen_bool(0.5) {
                *v = -*v;
            }
        }
        t
    }

    fn probs(&mut self, n: usize) -> Tensor {
        self.uniform(&[n], 0.05, 0.95)
    }

    fn label(&mut self, c: usize) -> LabelVector {
        let mut active: Vec<usize> = (0..c).filter(|_| self.rng.gen_bool(0.4)).collect();
        if active.is_empty() {
            active.push(self.rng.gen_range(0..c));
        }
        LabelVector::from_indices(c, &active).expect("nonempty")
    }
}

/// Weighted sum with fixed random coefficients, so every output entry gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ½(‖r − f₀‖² + ‖r₀ − f‖²): the mutual-learning objective with each
/// detached operand frozen at its base value.
fn decoupled_mutual(r: &[f64], f: &[f64], r0: &[f64], f0: &[f64]) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    0.5 * (sq(r, f0) + sq(r0, f))
}

type CaseFn = fn(&mut Gen) -> Result<(f64, usize)>;

fn check<F>(point: Vec<Tensor>, f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = finite_diff_check(&point, FD_STEP, f)?;
    Ok((r.max_rel_error, r.entries_checked))
}

fn check_detached<F, G>(point: Vec<Tensor>, f: F, numeric: G) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    G: Fn(&[Tensor]) -> Result<f64>,
{
    let r = finite_diff_check_with(&point, FD_STEP, f, numeric)?;
    Ok((r.max_rel_error, r.entries_checked))
}

/// Checks `op(inputs)` projected onto random weights of the output shape.
fn check_op<F>(g: &mut Gen, inputs: Vec<Tensor>, op: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = op(&mut probe, &vars)?;
    let weights = g.normal(probe.value(out).shape());
    check(inputs, |tape, v| {
        let out = op(tape, v)?;
        project(tape, out, &weights)
    })
}

fn conv_layer(g: &mut Gen, cin: usize, cout: usize, k: usize) -> [Tensor; 2] {
    [g.normal(&[cout, cin, k]), g.normal(&[cout])]
}

fn block_tensors(g: &mut Gen, d: usize) -> Vec<Tensor> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out: Vec<Tensor> = (0..4).map(|_| g.normal(&[d, d]).map(|v| v * scale)).collect();
    out.push(g.uniform(&[d], 0.5, 1.5));
    out.push(g.normal(&[d]));
    out
}

fn block_vars(v: &[Var]) -> AttentionBlock<Var> {
    AttentionBlock {
        w_q: v[0],
        w_k: v[1],
        w_v: v[2],
        w_o: v[3],
        ln_gain: v[4],
        ln_bias: v[5],
    }
}

fn tiny_model(g: &mut Gen) -> (ModelConfig, ModelParams) {
    let config = ModelConfig {
        num_classes: g.dim(1, 3),
        // Layer norm over two features has an identically zero Jacobian
        // upstream, which a relative-error check cannot resolve.
        feature_dim: g.even(4, 6),
        hidden_dim: g.dim(2, 3),
        ..ModelConfig::default()
    };
    // Unit-scale weights instead of the fan-in init: with the default scale
    // some gradients fall to 1e-8, below what central differences on an
    // O(1) objective can resolve.
    let mut params = ModelParams::init(&config, &mut g.rng).expect("valid config");
    for t in params.values_mut() {
        *t = g.normal(t.shape());
    }
    for b in [&mut params.self_attention, &mut params.cross_attention] {
        b.ln_gain = b.ln_gain.map(|v| 1.0 + 0.5 * v);
    }
    (config, params)
}

fn unflatten(template: &ModelParams, vars: &[Var]) -> Params<Var> {
    let mut i = 0;
    template.map(|_| {
        let v = vars[i];
        i += 1;
        v
    })
}

/// Distance of the draw from the nearest non-differentiable point the joint
/// objective can hit: LeakyReLU inputs, top-k selection boundaries and the
/// arguments of the guide loss's absolute values.
fn kink_distance(config: &ModelConfig, params: &ModelParams, feats: &[Tensor], m: usize) -> Result<f64> {
    let mut dist = f64::INFINITY;
    let mut note = |values: &[f64]| {
        for v in values {
            dist = dist.min(v.abs());
        }
    };
    for f in feats {
        let mut t = Tape::new();
        let p = params.bind_frozen(&mut t);
        let d = config.feature_dim;
        let halves = [(0, d / 2, &p.rgb_stream[..]), (d / 2, d, &p.flow_stream[..])];
        for (lo, hi, layers) in halves {
            let x = t.constant(f.slice_cols(lo, hi)?);
            let h = t.conv1d(x, layers[0].weight, layers[0].bias)?;
            note(t.value(h).data());
            let h = t.leaky_relu(h, config.leaky_slope);
            let h = t.conv1d(h, layers[1].weight, layers[1].bias)?;
            note(t.value(h).data());
        }
        let x = t.constant(f.clone());
        let h = t.conv1d(x, p.fusion[0].weight, p.fusion[0].bias)?;
        note(t.value(h).data());

        let mode = QueryMode::VideoSpecific;
        let o = forward_on_tape(&mut t, f, &p, config, mode)?.materialize(&t);
        let k = crate::losses::topk_size(f.rows(), m);
        for cam in [&o.tcam, &o.tcam_suppressed] {
            for r in 0..cam.rows() {
                let mut row = cam.row(r).to_vec();
                row.sort_by(|a, b| b.total_cmp(a));
                if k < row.len() {
                    note(&[row[k - 1] - row[k]]);
                }
            }
        }
        let cam = t.constant(o.tcam.clone());
        let back = background_probability(&mut t, cam)?;
        let a = t.value(back).clone();
        for s in [&o.s_rgb, &o.s_flow, &o.s] {
            let args: Vec<f64> = a.data().iter().zip(s.data()).map(|(a, s)| 1.0 - a - s).collect();
            note(&args);
        }
    }
    Ok(dist)
}

const KINK_MARGIN: f64 = 1e-3;

fn model_point(params: &ModelParams) -> Vec<Tensor> {
    params.named().into_iter().map(|(_, t)| t.clone()).collect()
}

macro_rules! unary_case {
    ($name:ident, $gen:ident, $method:ident) => {
        fn $name(g: &mut Gen) -> Result<(f64, usize)> {
            let (r, c) = (g.dim(1, 8), g.dim(1, 12));
            let x = g.$gen(&[r, c]);
            check_op(g, vec![x], |t, v| Ok(t.$method(v[0])))
        }
    };
}

unary_case!(op_sigmoid, normal, sigmoid);
unary_case!(op_relu, away_from_zero, relu);
unary_case!(op_abs, away_from_zero, abs);
unary_case!(op_square, normal, square);
unary_case!(op_softmax_rows, normal, softmax_rows);
unary_case!(op_log_softmax_rows, normal, log_softmax_rows);
unary_case!(op_sum, normal, sum);
unary_case!(op_mean, normal, mean);

fn op_ln(g: &mut Gen) -> Result<(f64, usize)> {
    let n = g.dim(1, 8);
    let x = g.uniform(&[n], 0.2, 3.0);
    check_op(g, vec![x], |t, v| Ok(t.ln(v[0])))
}

fn op_sqrt(g: &mut Gen) -> Result<(f64, usize)> {
    let n = g.dim(1, 8);
    let x = g.uniform(&[n], 0.2, 3.0);
    check_op(g, vec![x], |t, v| Ok(t.sqrt(v[0])))
}

fn op_leaky_relu(g: &mut Gen) -> Result<(f64, usize)> {
    let n = g.dim(1, 8);
    let x = g.away_from_zero(&[n, 3]);
    check_op(g, vec![x], |t, v| Ok(t.leaky_relu(v[0], 0.2)))
}

fn op_matmul(g: &mut Gen) -> Result<(f64, usize)> {
    let (m, k, n) = (g.dim(1, 8), g.dim(1, 12), g.dim(1, 8));
    let a = g.normal(&[m, k]);
    let b = g.normal(&[k, n]);
    check_op(g, vec![a, b], |t, v| t.matmul(v[0], v[1]))
}

fn op_transpose_reshape(g: &mut Gen) -> Result<(f64, usize)> {
    let (r, c) = (g.dim(1, 8), g.dim(1, 12));
    let x = g.normal(&[r, c]);
    check_op(g, vec![x], move |t, v| {
        let tr = t.transpose(v[0])?;
        t.reshape(tr, &[r * c])
    })
}

fn op_add_sub_mul(g: &mut Gen) -> Result<(f64, usize)> {
    let (r, c) = (g.dim(1, 8), g.dim(1, 12));
    let a = g.normal(&[r, c]);
    let b = g.normal(&[r, c]);
    let c2 = g.normal(&[r, c]);
    check_op(g, vec![a, b, c2], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[2])?;
        let p = t.mul(d, v[1])?;
        let p = t.scale(p, 0.7);
        Ok(t.add_scalar(p, -0.3))
    })
}

fn op_div_by_scalar(g: &mut Gen) -> Result<(f64, usize)> {
    let n = g.dim(1, 8);
    let num = g.normal(&[n]);
    let den = g.uniform(&[n], 0.3, 1.0);
    check_op(g, vec![num, den], |t, v| {
        let s = t.sum(v[1]);
        t.div_by_scalar(v[0], s, 1e-12)
    })
}

fn op_layer_norm(g: &mut Gen) -> Result<(f64, usize)> {
    let (r, c) = (g.dim(1, 8), g.dim(3, 12));
    let x = g.normal(&[r, c]);
    let gain = g.uniform(&[c], 0.5, 1.5);
    let bias = g.normal(&[c]);
    check_op(g, vec![x, gain, bias], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
}

fn op_conv1d(g: &mut Gen) -> Result<(f64, usize)> {
    let (len, cin, cout) = (g.dim(1, 8), g.dim(1, 6), g.dim(1, 6));
    let k = [1, 3, 5][g.rng.gen_range(0..3)];
    let x = g.normal(&[len, cin]);
    let [w, b] = conv_layer(g, cin, cout, k);
    check_op(g, vec![x, w, b], |t, v| t.conv1d(v[0], v[1], v[2]))
}

fn op_topk_mean_rows(g: &mut Gen) -> Result<(f64, usize)> {
    let (r, c) = (g.dim(1, 3), g.dim(1, 8));
    let k = g.dim(1, c);
    let x = g.normal(&[r, c]);
    check_op(g, vec![x], move |t, v| t.topk_mean_rows(v[0], k))
}

fn op_stop_gradient(g: &mut Gen) -> Result<(f64, usize)> {
    // Σ sg(x)·y + Σ x²: the detached copy of x is frozen on the numeric side.
    let n = g.dim(1, 8);
    let x = g.normal(&[n]);
    let y = g.normal(x.shape());
    let x0 = x.clone();
    check_detached(
        vec![x, y],
        |t, v| {
            let frozen = t.stop_gradient(v[0]);
            let p = t.mul(frozen, v[1])?;
            let s = t.sum(p);
            let sq = t.square(v[0]);
            let s2 = t.sum(sq);
            t.add(s, s2)
        },
        move |p| Ok(dot(x0.data(), p[1].data()) + dot(p[0].data(), p[0].data())),
    )
}

fn op_row_mul_columns(g: &mut Gen) -> Result<(f64, usize)> {
    let (r, c) = (g.dim(1, 4), g.dim(1, 8));
    let m = g.normal(&[r, c]);
    let s = g.probs(c);
    let idx = g.rng.gen_range(0..r);
    check_op(g, vec![m, s], move |t, v| {
        let mc = t.mul_columns(v[0], v[1])?;
        let row = t.row(mc, idx)?;
        let sq = t.square(row);
        t.add(sq, row)
    })
}

fn op_cosine_distance(g: &mut Gen) -> Result<(f64, usize)> {
    let n = g.dim(1, 12);
    let a = g.normal(&[n]);
    let b = g.normal(&[n]);
    check(vec![a, b], |t, v| t.cosine_distance(v[0], v[1], 1e-8))
}

fn model_foreground_stream(g: &mut Gen) -> Result<(f64, usize)> {
    let (len, half, h) = (g.dim(1, 8), g.dim(1, 6), g.dim(1, 4));
    let x = g.normal(&[len, half]);
    let mut point = vec![x];
    for (cin, cout) in [(half, h), (h, h), (h, 1)] {
        point.extend(conv_layer(g, cin, cout, 3));
    }
    check_op(g, point, |t, v| {
        let layers = [
            ConvLayer { weight: v[1], bias: v[2] },
            ConvLayer { weight: v[3], bias: v[4] },
            ConvLayer { weight: v[5], bias: v[6] },
        ];
        foreground_stream(t, v[0], &layers, 0.2)
    })
}

fn model_fuse_features(g: &mut Gen) -> Result<(f64, usize)> {
    let (len, d) = (g.dim(1, 8), g.dim(1, 6));
    let mut point = vec![g.normal(&[len, d])];
    point.extend(conv_layer(g, d, d, 3));
    point.extend(conv_layer(g, d, d, 3));
    check_op(g, point, |t, v| {
        let layers = [
            ConvLayer { weight: v[1], bias: v[2] },
            ConvLayer { weight: v[3], bias: v[4] },
        ];
        fuse_features(t, v[0], &layers, 0.2)
    })
}

fn model_attention_block(g: &mut Gen) -> Result<(f64, usize)> {
    let (c1, len, d) = (g.dim(2, 4), g.dim(1, 8), g.dim(3, 8));
    let mut point = vec![g.normal(&[c1, d]), g.normal(&[len, d])];
    point.extend(block_tensors(g, d));
    check_op(g, point, |t, v| {
        let block = block_vars(&v[2..]);
        attention_block(t, v[0], v[1], v[1], &block, 1e-5)
    })
}

fn model_query_learner(g: &mut Gen) -> Result<(f64, usize)> {
    let (c1, len, d) = (g.dim(2, 4), g.dim(1, 8), g.dim(3, 8));
    let mut point = vec![g.normal(&[c1, d]), g.normal(&[len, d])];
    point.extend(block_tensors(g, d));
    point.extend(block_tensors(g, d));
    check_op(g, point, |t, v| {
        let first = block_vars(&v[2..8]);
        let second = block_vars(&v[8..14]);
        let q1 = attention_block(t, v[0], v[0], v[0], &first, 1e-5)?;
        attention_block(t, q1, v[1], v[1], &second, 1e-5)
    })
}

fn model_qk_suppress(g: &mut Gen) -> Result<(f64, usize)> {
    let (c1, len, d) = (g.dim(2, 4), g.dim(1, 8), g.dim(1, 12));
    let q = g.normal(&[c1, d]);
    let k = g.normal(&[len, d]);
    let s = g.probs(len);
    check_op(g, vec![q, k, s], |t, v| {
        let a = qk_attention(t, v[0], v[1])?;
        suppress_background(t, a, v[2])
    })
}

fn model_forward(g: &mut Gen) -> Result<(f64, usize)> {
    let (config, params, x) = loop {
        let (config, params) = tiny_model(g);
        let len = g.dim(2, 8);
        let x = g.normal(&[len, config.feature_dim]);
        if kink_distance(&config, &params, std::slice::from_ref(&x), 1)? > KINK_MARGIN {
            break (config, params, x);
        }
    };
    let len = x.rows();
    let mode = if g.rng.gen_bool(0.5) { QueryMode::VideoSpecific } else { QueryMode::Uniform };
    let weights = g.normal(&[config.num_classes + 1, len]);
    let template = params.clone();
    check(model_point(&params), |t, v| {
        let p = unflatten(&template, v);
        let out = forward_on_tape(t, &x, &p, &config, mode)?;
        project(t, out.tcam_suppressed, &weights)
    })
}

fn loss_video_cls(g: &mut Gen) -> Result<(f64, usize)> {
    let (c, len) = (g.dim(1, 3), g.dim(1, 8));
    let label = g.label(c);
    let m = g.dim(1, 7);
    let a = g.normal(&[c + 1, len]).map(|v| 3.0 * v);
    let a_hat = g.normal(&[c + 1, len]).map(|v| 3.0 * v);
    check(vec![a, a_hat], |t, v| video_cls_loss(t, v[0], v[1], &label, m))
}

fn query_case(g: &mut Gen, kind: QsDistance) -> Result<(f64, usize)> {
    // With three or more videos the L1 sign terms of one entry can cancel
    // exactly, leaving a true zero gradient beside one-ulp numeric noise.
    let max_videos = if kind == QsDistance::Manhattan { 2 } else { 4 };
    let (c, d, n) = (g.dim(1, 3), g.dim(1, 12), g.dim(2, max_videos));
    let labels: Vec<LabelVector> = (0..n).map(|_| g.label(c)).collect();
    let queries: Vec<Tensor> = (0..n).map(|_| g.normal(&[c + 1, d])).collect();
    check(queries, |t, v| query_similarity_loss(t, v, &labels, kind))
}

fn loss_qs_cosine(g: &mut Gen) -> Result<(f64, usize)> {
    query_case(g, QsDistance::Cosine)
}

fn loss_qs_jensen_shannon(g: &mut Gen) -> Result<(f64, usize)> {
    query_case(g, QsDistance::JensenShannon)
}

fn loss_qs_euclidean(g: &mut Gen) -> Result<(f64, usize)> {
    query_case(g, QsDistance::Euclidean)
}

fn loss_qs_manhattan(g: &mut Gen) -> Result<(f64, usize)> {
    query_case(g, QsDistance::Manhattan)
}

fn loss_mutual_learning(g: &mut Gen) -> Result<(f64, usize)> {
    let len = g.dim(1, 8);
    let (a, b) = (g.probs(len), g.probs(len));
    let (a0, b0) = (a.clone(), b.clone());
    check_detached(
        vec![a, b],
        |t, v| mutual_learning_loss(t, v[0], v[1]),
        move |p| Ok(decoupled_mutual(p[0].data(), p[1].data(), a0.data(), b0.data())),
    )
}

fn loss_sparsity(g: &mut Gen) -> Result<(f64, usize)> {
    let len = g.dim(1, 8);
    let (a, b) = (g.probs(len), g.probs(len));
    let per_segment = g.rng.gen_bool(0.5);
    check(vec![a, b], move |t, v| {
        let sum = t.add(v[0], v[1])?;
        let s = t.scale(sum, 0.5);
        sparsity_loss(t, v[0], v[1], s, per_segment)
    })
}

fn loss_guide(g: &mut Gen) -> Result<(f64, usize)> {
    let (c, len) = (g.dim(1, 3), g.dim(1, 8));
    let tcam = g.normal(&[c + 1, len]).map(|v| 2.0 * v);
    let (a, b) = (g.probs(len), g.probs(len));
    let per_segment = g.rng.gen_bool(0.5);
    check(vec![tcam, a, b], move |t, v| {
        let back = background_probability(t, v[0])?;
        let sum = t.add(v[1], v[2])?;
        let s = t.scale(sum, 0.5);
        guide_loss(t, back, v[1], v[2], s, per_segment)
    })
}

fn loss_coactivity(g: &mut Gen) -> Result<(f64, usize)> {
    let (c, d, n) = (g.dim(1, 3), g.dim(1, 12), g.dim(2, 3));
    let len = g.dim(2, 8);
    let shared = g.rng.gen_range(0..c);
    let labels: Vec<LabelVector> = (0..n)
        .map(|_| {
            let mut l = g.label(c);
            if !l.contains(shared) {
                let mut idx: Vec<usize> = l.active().collect();
                idx.push(shared);
                l = LabelVector::from_indices(c, &idx).expect("nonempty");
            }
            l
        })
        .collect();
    let mut point = Vec::new();
    for _ in 0..n {
        point.push(g.normal(&[len, d]));
        point.push(g.normal(&[c + 1, len]).map(|v| 2.0 * v));
    }
    // Cosine distances lie in [0, 2], so a 2.5 margin keeps every hinge
    // strictly active, away from its kink.
    check(point, |t, v| {
        let batch: Vec<CoactivityInput<'_>> = labels
            .iter()
            .enumerate()
            .map(|(i, label)| CoactivityInput {
                x_hat: v[2 * i],
                tcam_suppressed: v[2 * i + 1],
                label,
            })
            .collect();
        coactivity_loss(t, &batch, 2.5)
    })
}

fn joint_case(g: &mut Gen, mode: QueryMode) -> Result<(f64, usize)> {
    let n = 3;
    let (config, params, feats, m) = loop {
        let (config, params) = tiny_model(g);
        let len = g.dim(2, 6);
        let feats: Vec<Tensor> = (0..n).map(|_| g.normal(&[len, config.feature_dim])).collect();
        let m = g.dim(1, 3);
        if kink_distance(&config, &params, &feats, m)? > KINK_MARGIN {
            break (config, params, feats, m);
        }
    };
    let labels: Vec<LabelVector> = (0..n).map(|_| g.label(config.num_classes)).collect();
    let weights = LossWeights {
        m,
        cas_margin: 2.5,
        ..LossWeights::default()
    };
    let template = params.clone();
    let run = |t: &mut Tape, v: &[Var]| -> Result<(Var, Vec<(Var, Var)>)> {
        let p = unflatten(&template, v);
        let mut members = Vec::new();
        for (f, label) in feats.iter().zip(&labels) {
            members.push(BatchMember {
                outputs: forward_on_tape(t, f, &p, &config, mode)?,
                label,
            });
        }
        let streams = members.iter().map(|m| (m.outputs.s_rgb, m.outputs.s_flow)).collect();
        let (loss, _) = joint_loss(t, &members, &weights, mode == QueryMode::VideoSpecific)?;
        Ok((loss, streams))
    };
    // Stream scores at the base point, for freezing the detached halves of
    // the mutual-learning term.
    let point = model_point(&params);
    let base: Vec<(Tensor, Tensor)> = {
        let mut t = Tape::new();
        let v: Vec<Var> = point.iter().map(|p| t.constant(p.clone())).collect();
        let (_, streams) = run(&mut t, &v)?;
        streams.iter().map(|&(r, f)| (t.value(r).clone(), t.value(f).clone())).collect()
    };
    check_detached(
        point,
        |t, v| Ok(run(t, v)?.0),
        |p| {
            let mut t = Tape::new();
            let v: Vec<Var> = p.iter().map(|x| t.constant(x.clone())).collect();
            let (loss, streams) = run(&mut t, &v)?;
            let mut swap = 0.0;
            for (&(r, f), (r0, f0)) in streams.iter().zip(&base) {
                let ml = mutual_learning_loss(&mut t, r, f)?;
                let (rv, fv) = (t.value(r).data(), t.value(f).data());
                swap += decoupled_mutual(rv, fv, r0.data(), f0.data()) - t.scalar_value(ml);
            }
            Ok(t.scalar_value(loss) + swap / streams.len() as f64)
        },
    )
}

fn loss_joint_video_specific(g: &mut Gen) -> Result<(f64, usize)> {
    joint_case(g, QueryMode::VideoSpecific)
}

fn loss_joint_uniform(g: &mut Gen) -> Result<(f64, usize)> {
    joint_case(g, QueryMode::Uniform)
}

const CASES: &[(&str, CaseFn)] = &[
    ("op.matmul", op_matmul),
    ("op.transpose_reshape", op_transpose_reshape),
    ("op.add_sub_mul_scale", op_add_sub_mul),
    ("op.div_by_scalar", op_div_by_scalar),
    ("op.sum", op_sum),
    ("op.mean", op_mean),
    ("op.sigmoid", op_sigmoid),
    ("op.leaky_relu", op_leaky_relu),
    ("op.relu", op_relu),
    ("op.abs", op_abs),
    ("op.square", op_square),
    ("op.ln", op_ln),
    ("op.sqrt", op_sqrt),
    ("op.softmax_rows", op_softmax_rows),
    ("op.log_softmax_rows", op_log_softmax_rows),
    ("op.layer_norm", op_layer_norm),
    ("op.conv1d", op_conv1d),
    ("op.topk_mean_rows", op_topk_mean_rows),
    ("op.stop_gradient", op_stop_gradient),
    ("op.row_mul_columns", op_row_mul_columns),
    ("op.cosine_distance", op_cosine_distance),
    ("model.foreground_stream", model_foreground_stream),
    ("model.fuse_features", model_fuse_features),
    ("model.attention_block", model_attention_block),
    ("model.query_learner", model_query_learner),
    ("model.qk_attention_suppress", model_qk_suppress),
    ("model.forward", model_forward),
    ("loss.video_cls", loss_video_cls),
    ("loss.query_similarity.cosine", loss_qs_cosine),
    ("loss.query_similarity.jensen_shannon", loss_qs_jensen_shannon),
    ("loss.query_similarity.euclidean", loss_qs_euclidean),
    ("loss.query_similarity.manhattan", loss_qs_manhattan),
    ("loss.mutual_learning", loss_mutual_learning),
    ("loss.sparsity", loss_sparsity),
    ("loss.guide", loss_guide),
    ("loss.coactivity", loss_coactivity),
    ("loss.joint.video_specific", loss_joint_video_specific),
    ("loss.joint.uniform", loss_joint_uniform),
];

pub fn case_names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|(n, _)| *n)
}

/// Runs every case for seeds `0..seeds`; each (case, seed) draws its own
/// shapes and values.
pub fn run_gradient_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(CASES.len());
    for (i, (name, case)) in CASES.iter().enumerate() {
        let mut result = CaseResult {
            name,
            max_rel_error: 0.0,
            worst_seed: 0,
            entries_checked: 0,
        };
        for seed in 0..seeds {
            let mut g = Gen {
                rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003) ^ i as u64),
            };
            let (err, n) = case(&mut g).map_err(|e| {
                TensorError::Argument(format!("gradient case {name}, seed {seed}: {e}"))
            })?;
            result.entries_checked += n;
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst_seed = seed;
            }
        }
        out.push(result);
    }
    Ok(out)
}
