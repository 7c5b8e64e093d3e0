use super::{matmul_raw, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities exposed to model code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    LeakyRelu(f64),
    Relu,
    Abs,
    Square,
    Ln,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivByScalar { num: Var, den: Var, floor: f64 },
    Sum(Var),
    Mean(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d { x: Var, w: Var, b: Var },
    TopkMeanRows { input: Var, k: usize, selected: Vec<Vec<usize>> },
    StopGradient,
    Row(Var, usize),
    MulColumns(Var, Var),
    CosineDistance { a: Var, b: Var, floor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one reverse replay, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Indices of the `k` largest entries, ties resolved toward the lower index.
pub(crate) fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `num / max(den, floor)` where `den` is a scalar node.
    pub fn div_by_scalar(&mut self, num: Var, den: Var, floor: f64) -> Result<Var> {
        if self.value(den).len() != 1 {
            return Err(shape_err("div_by_scalar", self.value(num), self.value(den)));
        }
        let d = self.value(den).item().max(floor);
        let out = self.value(num).map(|v| v / d);
        let rg = self.rg(&[num, den]);
        Ok(self.push(out, Op::DivByScalar { num, den, floor }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::LeakyRelu(_) | Unary::Relu | Unary::Abs => |x| x,
            Unary::Square => |x| x * x,
            Unary::Ln => f64::ln,
            Unary::Sqrt => f64::sqrt,
        };
        let out = match kind {
            Unary::LeakyRelu(slope) => self.value(a).map(|x| if x >= 0.0 { x } else { slope * x }),
            Unary::Relu => self.value(a).map(|x| x.max(0.0)),
            Unary::Abs => self.value(a).map(f64::abs),
            _ => self.value(a).map(f),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(a, kind), rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        match kind {
            Activation::Sigmoid => self.unary(a, Unary::Sigmoid),
            Activation::LeakyRelu(slope) => self.unary(a, Unary::LeakyRelu(slope)),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// Softmax along the last dimension; a vector is treated as one row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Normalizes each vector along the last dimension, then applies `gain`
    /// and `bias`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, g, b) = (self.value(input), self.value(gain), self.value(bias));
        let d = v.cols();
        if g.shape() != [d] || b.shape() != [d] {
            return Err(shape_err("layer_norm", v, g));
        }
        let mut normalized = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &x) in row.iter().enumerate() {
                let n = (x - mean) * is;
                normalized.push(n);
                out.push(n * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[input, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Same-length temporal convolution: `x` is T×Cin, `w` is Cout×Cin×k with
    /// odd k, `b` has length Cout. Zero padding of (k-1)/2 on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 3 {
            return Err(TensorError::Argument(format!(
                "conv weight must be Cout×Cin×k, got {:?}",
                wv.shape()
            )));
        }
        let (cout, cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if k % 2 == 0 {
            return Err(TensorError::Config(format!("conv kernel size {k} is even")));
        }
        if xv.rank() != 2 || xv.shape()[1] != cin {
            return Err(shape_err("conv1d", xv, wv));
        }
        if bv.shape() != [cout] {
            return Err(shape_err("conv1d bias", wv, bv));
        }
        let t_len = xv.shape()[0];
        let pad = k / 2;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; t_len * cout];
        for t in 0..t_len {
            let orow = &mut out[t * cout..(t + 1) * cout];
            orow.copy_from_slice(bv.data());
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                let xrow = &xd[src * cin..(src + 1) * cin];
                for (o, acc) in orow.iter_mut().enumerate() {
                    let wbase = o * cin * k + j;
                    let mut s = 0.0;
                    for (i, &xval) in xrow.iter().enumerate() {
                        s += wd[wbase + i * k] * xval;
                    }
                    *acc += s;
                }
            }
        }
        let out = Tensor::from_parts(vec![t_len, cout], out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv1d { x, w, b }, rg))
    }

    /// Mean of the `k` largest entries per row. A vector input yields a
    /// scalar, a matrix input a vector with one entry per row.
    pub fn topk_mean_rows(&mut self, input: Var, k: usize) -> Result<Var> {
        let v = self.value(input);
        let c = v.cols();
        if k == 0 || k > c {
            return Err(TensorError::Argument(format!(
                "top-k size {k} outside 1..={c}"
            )));
        }
        let mut selected = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.rows());
        for row in v.data().chunks(c) {
            let idx = topk_indices(row, k);
            out.push(idx.iter().map(|&i| row[i]).sum::<f64>() / k as f64);
            selected.push(idx);
        }
        let shape = if v.rank() <= 1 { vec![] } else { vec![v.rows()] };
        let out = Tensor::from_parts(shape, out);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::TopkMeanRows { input, k, selected }, rg))
    }

    /// Same value, no gradient path.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || index >= v.shape()[0] {
            return Err(TensorError::Argument(format!(
                "row {index} out of range for {:?}",
                v.shape()
            )));
        }
        let out = Tensor::from_parts(vec![v.cols()], v.row(index).to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Row(a, index), rg))
    }

    /// `out[r, t] = m[r, t] * v[t]`.
    pub fn mul_columns(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.rank() != 2 || vv.shape() != [mv.shape()[1]] {
            return Err(shape_err("mul_columns", mv, vv));
        }
        let c = mv.cols();
        let data = mv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vv.data()[i % c])
            .collect();
        let out = Tensor::from_parts(mv.shape().to_vec(), data);
        let rg = self.rg(&[m, v]);
        Ok(self.push(out, Op::MulColumns(m, v), rg))
    }

    /// `1 - a·b / (max(|a|, floor) * max(|b|, floor))` for two vectors.
    pub fn cosine_distance(&mut self, a: Var, b: Var, floor: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 1 || av.shape() != bv.shape() {
            return Err(shape_err("cosine_distance", av, bv));
        }
        let dot: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let na = norm(av.data()).max(floor);
        let nb = norm(bv.data()).max(floor);
        let out = Tensor::scalar(1.0 - dot / (na * nb));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::CosineDistance { a, b, floor }, rg))
    }

    /// Reverse replay from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::from_parts(n.value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    // g (m×n) · bᵀ (n×k)
                    let bt = bv.transpose().expect("matrix");
                    self.accumulate(grads, *a, matmul_raw(g, bt.data(), m, n, k));
                }
                if self.needs(*b) {
                    let at = av.transpose().expect("matrix");
                    self.accumulate(grads, *b, matmul_raw(at.data(), g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::from_parts(y.shape().to_vec(), g.to_vec())
                    .transpose()
                    .expect("matrix");
                self.accumulate(grads, *a, gt.into_data());
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(av).map(|(g, a)| g * a).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.iter().map(|v| v * f).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::DivByScalar { num, den, floor } => {
                let dv = self.value(*den).item();
                let d = dv.max(*floor);
                self.accumulate(grads, *num, g.iter().map(|v| v / d).collect());
                if dv > *floor {
                    let nv = self.value(*num).data();
                    let s: f64 = g.iter().zip(nv).map(|(g, n)| g * n).sum();
                    self.accumulate(grads, *den, vec![-s / (d * d)]);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let yd = y.data();
                let out = (0..x.len())
                    .map(|i| {
                        let d = match kind {
                            Unary::Sigmoid => yd[i] * (1.0 - yd[i]),
                            Unary::LeakyRelu(s) => {
                                if x[i] >= 0.0 {
                                    1.0
                                } else {
                                    *s
                                }
                            }
                            Unary::Relu => f64::from(u8::from(x[i] > 0.0)),
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[i],
                            Unary::Ln => 1.0 / x[i],
                            Unary::Sqrt => {
                                if yd[i] > 0.0 {
                                    0.5 / yd[i]
                                } else {
                                    0.0
                                }
                            }
                        };
                        g[i] * d
                    })
                    .collect();
                self.accumulate(grads, *a, out);
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let mut out = vec![0.0; g.len()];
                for ((yr, gr), or) in y.data().chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LogSoftmaxRows(a) => {
                let c = y.cols();
                let mut out = vec![0.0; g.len()];
                for ((yr, gr), or) in y.data().chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.needs(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let gr = &g[span.clone()];
                        let nr = &normalized[span.clone()];
                        let dn: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n =
                            dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = is * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (i, (&gi, &ni)) in g.iter().zip(normalized).enumerate() {
                    dg[i % d] += gi * ni;
                    db[i % d] += gi;
                }
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (cout, cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let t_len = xv.shape()[0];
                let pad = k / 2;
                let (xd, wd) = (xv.data(), wv.data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; cout];
                for t in 0..t_len {
                    let grow = &g[t * cout..(t + 1) * cout];
                    for (o, &gv) in grow.iter().enumerate() {
                        db[o] += gv;
                    }
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for (o, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let wbase = o * cin * k + j;
                            for i in 0..cin {
                                dx[src * cin + i] += wd[wbase + i * k] * gv;
                                dw[wbase + i * k] += xd[src * cin + i] * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::TopkMeanRows { input, k, selected } => {
                let iv = self.value(*input);
                let c = iv.cols();
                let mut out = vec![0.0; iv.len()];
                for (r, idx) in selected.iter().enumerate() {
                    for &i in idx {
                        out[r * c + i] = g[r] / *k as f64;
                    }
                }
                self.accumulate(grads, *input, out);
            }
            Op::Row(a, index) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut out = vec![0.0; av.len()];
                out[index * c..(index + 1) * c].copy_from_slice(g);
                self.accumulate(grads, *a, out);
            }
            Op::MulColumns(m, v) => {
                let (mv, vv) = (self.value(*m), self.value(*v));
                let c = mv.cols();
                if self.needs(*m) {
                    let out = g.iter().enumerate().map(|(i, gv)| gv * vv.data()[i % c]).collect();
                    self.accumulate(grads, *m, out);
                }
                if self.needs(*v) {
                    let mut out = vec![0.0; c];
                    for (i, (gv, mvv)) in g.iter().zip(mv.data()).enumerate() {
                        out[i % c] += gv * mvv;
                    }
                    self.accumulate(grads, *v, out);
                }
            }
            Op::CosineDistance { a, b, floor } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (ra, rb) = (norm(av), norm(bv));
                let (na, nb) = (ra.max(*floor), rb.max(*floor));
                let cos = av.iter().zip(bv).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                let grad_of = |own: &[f64], other: &[f64], raw: f64, n_own: f64, n_other: f64| {
                    own.iter()
                        .zip(other)
                        .map(|(&x, &o)| {
                            let mut dc = o / (n_own * n_other);
                            if raw > *floor {
                                dc -= cos * x / (n_own * n_own);
                            }
                            -g[0] * dc
                        })
                        .collect::<Vec<_>>()
                };
                if self.needs(*a) {
                    self.accumulate(grads, *a, grad_of(av, bv, ra, na, nb));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, grad_of(bv, av, rb, nb, na));
                }
            }
        }
    }
}
