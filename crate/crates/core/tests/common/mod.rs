//! Brute-force reference implementations shared by the oracle tests and the
//! acceptance report. Each one is written in the most direct way possible,
//! with no code shared with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqknet::eval::{average_precision, Detection, GroundTruthSegment};
use vqknet::inference::{oic_score, soft_nms, ActionProposal};
use vqknet::model::{attention_block, qk_attention, AttentionBlock};
use vqknet::tensor::{Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], random_vec(rng, rows * cols)).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Plain row-major matrices as Vec<Vec<f64>>.
type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn naive_transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// `w[o][i][j]` with input padded by k/2 zeros on each side.
pub fn naive_conv1d(x: &Mat, w: &[Vec<Vec<f64>>], b: &[f64]) -> Mat {
    let t_len = x.len();
    let cin = x[0].len();
    let k = w[0][0].len();
    let pad = k / 2;
    let mut padded = vec![vec![0.0; cin]; t_len + 2 * pad];
    for t in 0..t_len {
        padded[t + pad] = x[t].clone();
    }
    let mut out = vec![vec![0.0; w.len()]; t_len];
    for t in 0..t_len {
        for o in 0..w.len() {
            let mut acc = b[o];
            for i in 0..cin {
                for j in 0..k {
                    acc += w[o][i][j] * padded[t + j][i];
                }
            }
            out[t][o] = acc;
        }
    }
    out
}

pub fn naive_layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn naive_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn naive_topk_mean(row: &[f64], k: usize) -> f64 {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sorted[..k].iter().sum::<f64>() / k as f64
}

pub fn naive_attention(q: &Mat, k: &Mat, v: &Mat, w: &[Mat; 4], gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    let d = q[0].len() as f64;
    let qp = naive_matmul(q, &w[0]);
    let kp = naive_matmul(k, &w[1]);
    let vp = naive_matmul(v, &w[2]);
    let mut scores = naive_matmul(&qp, &naive_transpose(&kp));
    for row in scores.iter_mut() {
        for s in row.iter_mut() {
            *s /= d.sqrt();
        }
        *row = naive_softmax_row(row);
    }
    let out = naive_matmul(&naive_matmul(&scores, &vp), &w[3]);
    let residual: Mat = q
        .iter()
        .zip(&out)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    naive_layer_norm(&residual, gain, bias, eps)
}

pub fn naive_oic(row: &[f64], start: usize, end: usize, inflation: f64) -> f64 {
    let len = end - start + 1;
    let collar = (inflation * len as f64).ceil() as usize;
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    for (t, &v) in row.iter().enumerate() {
        if t >= start && t <= end {
            inner.push(v);
        } else if (t < start && start - t <= collar) || (t > end && t - end <= collar) {
            outer.push(v);
        }
    }
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    mean(&inner) - mean(&outer)
}

fn naive_tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    // Union of two overlapping intervals is their hull; for disjoint ones the
    // intersection is already 0.
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Linear soft-NMS done the slow way: rescan everything each round.
pub fn naive_soft_nms(props: &[ActionProposal], thr: f64, min_score: f64) -> Vec<ActionProposal> {
    let mut out = Vec::new();
    let mut classes: Vec<usize> = props.iter().map(|p| p.class_id).collect();
    classes.sort();
    classes.dedup();
    for c in classes {
        let mut alive: Vec<Option<ActionProposal>> = props
            .iter()
            .filter(|p| p.class_id == c && p.score > min_score)
            .cloned()
            .map(Some)
            .collect();
        loop {
            let mut best: Option<usize> = None;
            for (i, p) in alive.iter().enumerate() {
                if let Some(p) = p {
                    if best.map_or(true, |b| p.score > alive[b].as_ref().unwrap().score) {
                        best = Some(i);
                    }
                }
            }
            let Some(b) = best else { break };
            let top = alive[b].take().unwrap();
            for slot in alive.iter_mut() {
                if let Some(p) = slot {
                    let o = naive_tiou((top.t_start, top.t_end), (p.t_start, p.t_end));
                    if o > thr {
                        p.score *= 1.0 - o;
                    }
                    if p.score <= min_score {
                        *slot = None;
                    }
                }
            }
            out.push(top);
        }
    }
    out
}

/// AP by replaying the greedy matcher from scratch on every prefix of the
/// ranking and reading off whether the prefix gained a true positive.
pub fn prefix_replay_ap(dets: &[Detection], gts: &[GroundTruthSegment], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut ranked = dets.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.video.cmp(&b.video))
            .then(a.t_start.partial_cmp(&b.t_start).unwrap())
            .then(a.t_end.partial_cmp(&b.t_end).unwrap())
    });
    let true_positives = |n: usize| -> usize {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for d in &ranked[..n] {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                if used[i] || g.video != d.video {
                    continue;
                }
                let o = naive_tiou((d.t_start, d.t_end), (g.t_start, g.t_end));
                if best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((i, o));
                }
            }
            if let Some((i, o)) = best {
                if o >= thr {
                    used[i] = true;
                    tp += 1;
                }
            }
        }
        tp
    };
    let mut ap = 0.0;
    for n in 1..=ranked.len() {
        let (now, before) = (true_positives(n), true_positives(n - 1));
        if now > before {
            ap += now as f64 / n as f64;
        }
    }
    ap / gts.len() as f64
}

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

/// Worst disagreement between a library routine and its oracle over a set
/// of random instances.
#[derive(Debug)]
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

pub const ORACLE_TOLERANCE: f64 = 1e-10;

pub fn check_matmul(n: usize) -> OracleResult {
    let mut r = rng(1);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let (a, k, b) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        let x = random_matrix(&mut r, a, k);
        let y = random_matrix(&mut r, k, b);
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let z = tape.matmul(xv, yv).unwrap();
        worst = worst.max(max_abs(tape.value(z).data(), &flat(&naive_matmul(&to_mat(&x), &to_mat(&y)))));
    }
    OracleResult { name: "matmul", instances: n, max_error: worst }
}

pub fn check_conv1d(n: usize) -> OracleResult {
    let mut r = rng(2);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let t = r.gen_range(1..9);
        let (cin, cout) = (r.gen_range(1..5), r.gen_range(1..5));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let x = random_matrix(&mut r, t, cin);
        let wdata = random_vec(&mut r, cout * cin * k);
        let b = random_vec(&mut r, cout);
        let w_nested: Vec<Vec<Vec<f64>>> = (0..cout)
            .map(|o| (0..cin).map(|i| (0..k).map(|j| wdata[o * cin * k + i * k + j]).collect()).collect())
            .collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(Tensor::new(&[cout, cin, k], wdata).unwrap());
        let bv = tape.constant(Tensor::vector(b.clone()).unwrap());
        let y = tape.conv1d(xv, wv, bv).unwrap();
        worst = worst.max(max_abs(tape.value(y).data(), &flat(&naive_conv1d(&to_mat(&x), &w_nested, &b))));
    }
    OracleResult { name: "conv1d", instances: n, max_error: worst }
}

pub fn check_layer_norm(n: usize) -> OracleResult {
    let mut r = rng(3);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let (rows, d) = (r.gen_range(1..6), r.gen_range(2..9));
        let x = random_matrix(&mut r, rows, d);
        let (g, b) = (random_vec(&mut r, d), random_vec(&mut r, d));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gv = tape.constant(Tensor::vector(g.clone()).unwrap());
        let bv = tape.constant(Tensor::vector(b.clone()).unwrap());
        let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
        worst = worst.max(max_abs(tape.value(y).data(), &flat(&naive_layer_norm(&to_mat(&x), &g, &b, 1e-5))));
    }
    OracleResult { name: "layer_norm", instances: n, max_error: worst }
}

pub fn check_topk_mean(n: usize) -> OracleResult {
    let mut r = rng(4);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..12));
        let k = r.gen_range(1..=cols);
        let mut x = random_matrix(&mut r, rows, cols);
        // Some exact ties.
        if cols > 2 && r.gen_bool(0.3) {
            let v = x.at(0, 0);
            x.data_mut()[1] = v;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.topk_mean_rows(xv, k).unwrap();
        let expected: Vec<f64> = (0..rows).map(|i| naive_topk_mean(x.row(i), k)).collect();
        worst = worst.max(max_abs(tape.value(y).data(), &expected));
    }
    OracleResult { name: "topk_mean", instances: n, max_error: worst }
}

pub fn check_attention_block(n: usize) -> OracleResult {
    let mut r = rng(5);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let d = r.gen_range(2..7);
        let (nq, nk) = (r.gen_range(1..5), r.gen_range(1..9));
        let q = random_matrix(&mut r, nq, d);
        let kv = random_matrix(&mut r, nk, d);
        let w: [Tensor; 4] = std::array::from_fn(|_| random_matrix(&mut r, d, d));
        let g = random_vec(&mut r, d);
        let b = random_vec(&mut r, d);
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kvv = tape.constant(kv.clone());
        let block = AttentionBlock {
            w_q: tape.constant(w[0].clone()),
            w_k: tape.constant(w[1].clone()),
            w_v: tape.constant(w[2].clone()),
            w_o: tape.constant(w[3].clone()),
            ln_gain: tape.constant(Tensor::vector(g.clone()).unwrap()),
            ln_bias: tape.constant(Tensor::vector(b.clone()).unwrap()),
        };
        let y = attention_block(&mut tape, qv, kvv, kvv, &block, 1e-5).unwrap();
        let wm = [to_mat(&w[0]), to_mat(&w[1]), to_mat(&w[2]), to_mat(&w[3])];
        let expected = naive_attention(&to_mat(&q), &to_mat(&kv), &to_mat(&kv), &wm, &g, &b, 1e-5);
        worst = worst.max(max_abs(tape.value(y).data(), &flat(&expected)));
    }
    OracleResult { name: "attention_block", instances: n, max_error: worst }
}

pub fn check_qk_attention(n: usize) -> OracleResult {
    let mut r = rng(6);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let (c, t, d) = (r.gen_range(2..5), r.gen_range(1..9), r.gen_range(1..13));
        let q = random_matrix(&mut r, c, d);
        let k = random_matrix(&mut r, t, d);
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
        let y = qk_attention(&mut tape, qv, kv).unwrap();
        let mut expected = vec![0.0; c * t];
        for i in 0..c {
            for j in 0..t {
                let dot: f64 = (0..d).map(|p| q.at(i, p) * k.at(j, p)).sum();
                expected[i * t + j] = dot / (d as f64).sqrt();
            }
        }
        worst = worst.max(max_abs(tape.value(y).data(), &expected));
    }
    OracleResult { name: "qk_attention", instances: n, max_error: worst }
}

pub fn check_oic(n: usize) -> OracleResult {
    let mut r = rng(7);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let len = r.gen_range(1..16);
        let row = random_vec(&mut r, len);
        let start = r.gen_range(0..len);
        let end = r.gen_range(start..len);
        let inflation = if r.gen_bool(0.5) { 0.25 } else { r.gen_range(0.0..1.0) };
        let got = oic_score(&row, start, end, inflation);
        worst = worst.max((got - naive_oic(&row, start, end, inflation)).abs());
    }
    OracleResult { name: "oic_score", instances: n, max_error: worst }
}

fn random_proposals(r: &mut impl Rng, n: usize, classes: usize) -> Vec<ActionProposal> {
    (0..n)
        .map(|_| {
            let s = r.gen_range(0..8) as f64 * 0.5;
            let len = r.gen_range(1..6) as f64 * 0.5;
            ActionProposal {
                t_start: s,
                t_end: s + len,
                class_id: r.gen_range(0..classes),
                score: r.gen_range(0.0..1.0),
            }
        })
        .collect()
}

fn canonical(mut p: Vec<ActionProposal>) -> Vec<ActionProposal> {
    p.sort_by(|a, b| {
        a.class_id
            .cmp(&b.class_id)
            .then(a.t_start.total_cmp(&b.t_start))
            .then(a.t_end.total_cmp(&b.t_end))
            .then(a.score.total_cmp(&b.score))
    });
    p
}

/// Error is infinite when the surviving sets differ in size or intervals.
pub fn check_soft_nms(n: usize) -> OracleResult {
    let mut r = rng(8);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let count = r.gen_range(0..9);
        let classes = r.gen_range(1..3);
        let props = random_proposals(&mut r, count, classes);
        let min_score = if r.gen_bool(0.5) { 0.0 } else { 0.05 };
        let thr = if r.gen_bool(0.5) { 0.7 } else { r.gen_range(0.0..1.0) };
        let got = canonical(soft_nms(&props, thr, min_score));
        let want = canonical(naive_soft_nms(&props, thr, min_score));
        if got.len() != want.len() {
            worst = f64::INFINITY;
            continue;
        }
        for (a, b) in got.iter().zip(&want) {
            if a.class_id != b.class_id || a.t_start != b.t_start || a.t_end != b.t_end {
                worst = f64::INFINITY;
            }
            worst = worst.max((a.score - b.score).abs());
        }
    }
    OracleResult { name: "soft_nms", instances: n, max_error: worst }
}

/// AP instances with at most 5 detections and 3 ground truths on a coarse
/// grid (so ties in score and overlap happen). Every input permutation must
/// give the same AP, equal to the prefix-replay oracle.
pub fn check_average_precision(n: usize) -> OracleResult {
    let mut r = rng(9);
    let mut worst = 0.0_f64;
    let videos = ["v0", "v1"];
    for _ in 0..n {
        let nd = r.gen_range(0..=5);
        let ng = r.gen_range(1..=3);
        let interval = |r: &mut ChaCha8Rng| {
            let s = r.gen_range(0..6) as f64;
            (s, s + r.gen_range(1..4) as f64)
        };
        let gts: Vec<GroundTruthSegment> = (0..ng)
            .map(|_| {
                let (s, e) = interval(&mut r);
                GroundTruthSegment {
                    video: videos[r.gen_range(0..2)].into(),
                    class: "a".into(),
                    t_start: s,
                    t_end: e,
                }
            })
            .collect();
        let dets: Vec<Detection> = (0..nd)
            .map(|_| {
                let (s, e) = interval(&mut r);
                Detection {
                    video: videos[r.gen_range(0..2)].into(),
                    class: "a".into(),
                    t_start: s,
                    t_end: e,
                    score: [0.3, 0.6, 0.9][r.gen_range(0..3)],
                }
            })
            .collect();
        let thr = [0.1, 0.3, 0.5, 0.7][r.gen_range(0..4)];
        let want = prefix_replay_ap(&dets, &gts, thr);
        for perm in permutations(&dets) {
            let got = average_precision(&perm, &gts, thr);
            worst = worst.max((got - want).abs());
        }
    }
    OracleResult { name: "average_precision", instances: n, max_error: worst }
}

pub fn oracle_suite(instances: usize) -> Vec<OracleResult> {
    vec![
        check_matmul(instances),
        check_conv1d(instances),
        check_layer_norm(instances),
        check_topk_mean(instances),
        check_attention_block(instances),
        check_qk_attention(instances),
        check_oic(instances),
        check_soft_nms(instances),
        check_average_precision(instances),
    ]
}
