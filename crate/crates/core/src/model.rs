//! Forward pipeline: two foreground streams, feature fusion, the query
//! learner, the key projection and query-key attention producing the
//! temporal class activation map (T-CAM).

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::tensor::{Activation, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Width of a segment feature; first half RGB, second half flow.
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub layer_norm_eps: f64,
    pub query_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            feature_dim: 2048,
            hidden_dim: 512,
            kernel_size: 3,
            leaky_slope: 0.2,
            layer_norm_eps: 1e-5,
            query_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return Err(TensorError::Config(format!(
                "feature_dim must be even and positive, got {}",
                self.feature_dim
            )));
        }
        if self.num_classes == 0 || self.hidden_dim == 0 {
            return Err(TensorError::Config(
                "num_classes and hidden_dim must be at least 1".into(),
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(TensorError::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Whether category queries are adapted to each video or shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    VideoSpecific,
    Uniform,
}

impl std::str::FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "video_specific" => Ok(Self::VideoSpecific),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown query mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// Cout×Cin×k
    pub weight: T,
    pub bias: T,
}

/// Single-head attention projections plus the residual layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub ln_gain: T,
    pub ln_bias: T,
}

/// Every learnable tensor of the model. `T` is [`Tensor`] for stored
/// weights and [`Var`] once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub rgb_stream: [ConvLayer<T>; 3],
    pub flow_stream: [ConvLayer<T>; 3],
    pub fusion: [ConvLayer<T>; 2],
    pub key: ConvLayer<T>,
    /// (C+1)×D, last row is the background query.
    pub q_init: T,
    pub self_attention: AttentionBlock<T>,
    pub cross_attention: AttentionBlock<T>,
}

pub type ModelParams = Params<Tensor>;

impl<T> ConvLayer<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvLayer<U> {
        ConvLayer {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> AttentionBlock<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionBlock<U> {
        AttentionBlock {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            ln_gain: f(&self.ln_gain),
            ln_bias: f(&self.ln_bias),
        }
    }
}

impl<T> Params<T> {
    /// Applies `f` to every tensor in [`Params::named`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        let f = &mut f;
        Params {
            rgb_stream: std::array::from_fn(|i| self.rgb_stream[i].map(f)),
            flow_stream: std::array::from_fn(|i| self.flow_stream[i].map(f)),
            fusion: std::array::from_fn(|i| self.fusion[i].map(f)),
            key: self.key.map(f),
            q_init: f(&self.q_init),
            self_attention: self.self_attention.map(f),
            cross_attention: self.cross_attention.map(f),
        }
    }

    /// Stable (name, tensor) listing used for checkpoints and the optimizer.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        let convs = [
            ("rgb_stream", &self.rgb_stream[..]),
            ("flow_stream", &self.flow_stream[..]),
            ("fusion", &self.fusion[..]),
            ("key", std::slice::from_ref(&self.key)),
        ];
        for (prefix, layers) in convs {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &layer.weight));
                out.push((format!("{prefix}.{i}.bias"), &layer.bias));
            }
        }
        out.push(("q_init".to_string(), &self.q_init));
        for (prefix, b) in [
            ("self_attention", &self.self_attention),
            ("cross_attention", &self.cross_attention),
        ] {
            for (name, t) in [
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("w_o", &b.w_o),
                ("ln_gain", &b.ln_gain),
                ("ln_bias", &b.ln_bias),
            ] {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    /// Mutable references in [`Params::named`] order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for layer in self
            .rgb_stream
            .iter_mut()
            .chain(self.flow_stream.iter_mut())
            .chain(self.fusion.iter_mut())
            .chain(std::iter::once(&mut self.key))
        {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.q_init);
        for b in [&mut self.self_attention, &mut self.cross_attention] {
            out.push(&mut b.w_q);
            out.push(&mut b.w_k);
            out.push(&mut b.w_v);
            out.push(&mut b.w_o);
            out.push(&mut b.ln_gain);
            out.push(&mut b.ln_bias);
        }
        out
    }
}

impl ModelParams {
    /// Seeded initialization: uniform(±1/√fan_in) weights, zero biases,
    /// unit layer-norm gains, normal(0, std) initial queries.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let k = config.kernel_size;
        let h = config.hidden_dim;
        let mut conv = |cin: usize, cout: usize| {
            let bound = 1.0 / ((cin * k) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let data = (0..cout * cin * k).map(|_| dist.sample(rng)).collect();
            ConvLayer {
                weight: Tensor::from_parts(vec![cout, cin, k], data),
                bias: Tensor::zeros(&[cout]),
            }
        };
        let rgb_stream = [conv(d / 2, h), conv(h, h), conv(h, 1)];
        let flow_stream = [conv(d / 2, h), conv(h, h), conv(h, 1)];
        let fusion = [conv(d, d), conv(d, d)];
        let key = conv(d, d);

        let normal = Normal::new(0.0, config.query_init_std)
            .map_err(|e| TensorError::Config(e.to_string()))?;
        let q_init = Tensor::from_parts(
            vec![config.num_classes + 1, d],
            (0..(config.num_classes + 1) * d).map(|_| normal.sample(rng)).collect(),
        );
        let mut block = || {
            let bound = 1.0 / (d as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut mat = || Tensor::from_parts(vec![d, d], (0..d * d).map(|_| dist.sample(rng)).collect());
            AttentionBlock {
                w_q: mat(),
                w_k: mat(),
                w_v: mat(),
                w_o: mat(),
                ln_gain: Tensor::full(&[d], 1.0),
                ln_bias: Tensor::zeros(&[d]),
            }
        };
        let self_attention = block();
        let cross_attention = block();
        Ok(Self {
            rgb_stream,
            flow_stream,
            fusion,
            key,
            q_init,
            self_attention,
            cross_attention,
        })
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Params<Var> {
        self.map(|t| tape.param(t.clone()))
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Params<Var> {
        self.map(|t| tape.constant(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape handles for everything one forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub s_rgb: Var,
    pub s_flow: Var,
    pub s: Var,
    pub x_hat: Var,
    pub q_hat: Var,
    pub k_hat: Var,
    pub tcam: Var,
    pub tcam_suppressed: Var,
}

/// Materialized forward results for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs {
    pub s_rgb: Tensor,
    pub s_flow: Tensor,
    pub s: Tensor,
    pub x_hat: Tensor,
    pub q_hat: Tensor,
    pub k_hat: Tensor,
    pub tcam: Tensor,
    pub tcam_suppressed: Tensor,
}

impl ForwardVars {
    pub fn materialize(&self, tape: &Tape) -> ModelOutputs {
        ModelOutputs {
            s_rgb: tape.value(self.s_rgb).clone(),
            s_flow: tape.value(self.s_flow).clone(),
            s: tape.value(self.s).clone(),
            x_hat: tape.value(self.x_hat).clone(),
            q_hat: tape.value(self.q_hat).clone(),
            k_hat: tape.value(self.k_hat).clone(),
            tcam: tape.value(self.tcam).clone(),
            tcam_suppressed: tape.value(self.tcam_suppressed).clone(),
        }
    }
}

fn conv(tape: &mut Tape, x: Var, layer: &ConvLayer<Var>) -> Result<Var> {
    tape.conv1d(x, layer.weight, layer.bias)
}

/// Three convolutions with LeakyReLU in between and a sigmoid head,
/// producing a length-T foreground probability.
pub fn foreground_stream(
    tape: &mut Tape,
    x_half: Var,
    layers: &[ConvLayer<Var>; 3],
    slope: f64,
) -> Result<Var> {
    let expected = tape.value(layers[0].weight).shape()[1];
    let xv = tape.value(x_half);
    if xv.rank() != 2 || xv.cols() != expected {
        return Err(TensorError::Shape {
            op: "foreground_stream",
            lhs: xv.shape().to_vec(),
            rhs: vec![expected],
        });
    }
    let t_len = xv.shape()[0];
    let h1 = conv(tape, x_half, &layers[0])?;
    let h1 = tape.activation(h1, Activation::LeakyRelu(slope));
    let h2 = conv(tape, h1, &layers[1])?;
    let h2 = tape.activation(h2, Activation::LeakyRelu(slope));
    let logits = conv(tape, h2, &layers[2])?;
    let p = tape.activation(logits, Activation::Sigmoid);
    tape.reshape(p, &[t_len])
}

/// Two convolutions with a LeakyReLU in between; output keeps width D.
pub fn fuse_features(
    tape: &mut Tape,
    x: Var,
    layers: &[ConvLayer<Var>; 2],
    slope: f64,
) -> Result<Var> {
    let h = conv(tape, x, &layers[0])?;
    let h = tape.activation(h, Activation::LeakyRelu(slope));
    conv(tape, h, &layers[1])
}

/// `layer_norm(q + softmax_rows((q W_Q)(k W_K)ᵀ / √D) (v W_V) W_O)`.
pub fn attention_block(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    block: &AttentionBlock<Var>,
    eps: f64,
) -> Result<Var> {
    let d = tape.value(block.w_q).shape()[0];
    for x in [q, k, v] {
        if tape.value(x).cols() != d {
            return Err(TensorError::Shape {
                op: "attention_block",
                lhs: tape.value(x).shape().to_vec(),
                rhs: tape.value(block.w_q).shape().to_vec(),
            });
        }
    }
    let qp = tape.matmul(q, block.w_q)?;
    let kp = tape.matmul(k, block.w_k)?;
    let vp = tape.matmul(v, block.w_v)?;
    let kt = tape.transpose(kp)?;
    let scores = tape.matmul(qp, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let head = tape.matmul(weights, vp)?;
    let out = tape.matmul(head, block.w_o)?;
    let residual = tape.add(q, out)?;
    tape.layer_norm(residual, block.ln_gain, block.ln_bias, eps)
}

/// Self-attention over the initial queries, then cross-attention onto the
/// fused video features.
pub fn learn_queries(
    tape: &mut Tape,
    q_init: Var,
    x_hat: Var,
    params: &Params<Var>,
    eps: f64,
) -> Result<Var> {
    let q1 = attention_block(tape, q_init, q_init, q_init, &params.self_attention, eps)?;
    attention_block(tape, q1, x_hat, x_hat, &params.cross_attention, eps)
}

/// `Q Kᵀ / √D`.
pub fn qk_attention(tape: &mut Tape, q_hat: Var, k_hat: Var) -> Result<Var> {
    let (qv, kv) = (tape.value(q_hat), tape.value(k_hat));
    if qv.cols() != kv.cols() {
        return Err(TensorError::Shape {
            op: "qk_attention",
            lhs: qv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        });
    }
    let d = qv.cols();
    let kt = tape.transpose(k_hat)?;
    let a = tape.matmul(q_hat, kt)?;
    Ok(tape.scale(a, 1.0 / (d as f64).sqrt()))
}

/// Scales every column t of the T-CAM by the foreground probability s[t].
pub fn suppress_background(tape: &mut Tape, tcam: Var, s: Var) -> Result<Var> {
    tape.mul_columns(tcam, s)
}

/// Full forward pass for one T×D feature matrix.
pub fn forward_on_tape(
    tape: &mut Tape,
    features: &Tensor,
    params: &Params<Var>,
    config: &ModelConfig,
    mode: QueryMode,
) -> Result<ForwardVars> {
    let d = config.feature_dim;
    if features.rank() != 2 || features.cols() != d || features.rows() == 0 {
        return Err(TensorError::Shape {
            op: "forward",
            lhs: features.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let x_rgb = tape.constant(features.slice_cols(0, d / 2)?);
    let x_flow = tape.constant(features.slice_cols(d / 2, d)?);
    let x = tape.constant(features.clone());

    let slope = config.leaky_slope;
    let s_rgb = foreground_stream(tape, x_rgb, &params.rgb_stream, slope)?;
    let s_flow = foreground_stream(tape, x_flow, &params.flow_stream, slope)?;
    let s_sum = tape.add(s_rgb, s_flow)?;
    let s = tape.scale(s_sum, 0.5);

    let x_hat = fuse_features(tape, x, &params.fusion, slope)?;
    let q_hat = match mode {
        QueryMode::VideoSpecific => {
            learn_queries(tape, params.q_init, x_hat, params, config.layer_norm_eps)?
        }
        QueryMode::Uniform => params.q_init,
    };
    let k_hat = conv(tape, x_hat, &params.key)?;
    let tcam = qk_attention(tape, q_hat, k_hat)?;
    let tcam_suppressed = suppress_background(tape, tcam, s)?;
    Ok(ForwardVars {
        s_rgb,
        s_flow,
        s,
        x_hat,
        q_hat,
        k_hat,
        tcam,
        tcam_suppressed,
    })
}

/// Gradient-free forward pass returning plain tensors.
pub fn forward(
    features: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    mode: QueryMode,
) -> Result<ModelOutputs> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let out = forward_on_tape(&mut tape, features, &vars, config, mode)?;
    Ok(out.materialize(&tape))
}
