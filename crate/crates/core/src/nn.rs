//! Transformer building blocks.
//!
//! Every block exists twice: a tape version (`*_graph`) used for training and
//! gradient checks, and a plain matrix version for single samples. The plain
//! versions run the tape version on constant leaves, so both routes share one
//! implementation.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{attention_head, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// FFN hidden width relative to the model width.
pub const FFN_EXPANSION: usize = 4;

/// Which attention is used inside a joint block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMode {
    /// `(x_agg − Attn(x_agg·Wq, x1·Wk, x1·Wv))·Wo`
    Residual,
    /// `Attn(x_agg·Wq, x1·Wk, x1·Wv)·Wo`
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attention: AttentionParams,
    pub ffn_w1: Mat,
    pub ffn_b1: Mat,
    pub ffn_w2: Mat,
    pub ffn_b2: Mat,
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
}

/// Uniform fan-in initialization: `U(−1/√fan_in, 1/√fan_in)`.
pub fn init_weight(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

impl AttentionParams {
    pub fn init(d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            w_q: init_weight(d, d, rng),
            w_k: init_weight(d, d, rng),
            w_v: init_weight(d, d, rng),
            w_o: init_weight(d, d, rng),
            heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.dim() != (d, d) {
                return Err(Error::shape(format!("{name} {d}x{d}"), format!("{:?}", w.dim())));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} heads do not divide d = {d}",
                self.heads
            )));
        }
        Ok(())
    }
}

impl LayerParams {
    pub fn init(d: usize, heads: usize, rng: &mut Rng) -> Self {
        let d_ff = FFN_EXPANSION * d;
        Self {
            attention: AttentionParams::init(d, heads, rng),
            ffn_w1: init_weight(d, d_ff, rng),
            ffn_b1: Mat::zeros((1, d_ff)),
            ffn_w2: init_weight(d_ff, d, rng),
            ffn_b2: Mat::zeros((1, d)),
            ln1_gain: Mat::ones((1, d)),
            ln1_bias: Mat::zeros((1, d)),
            ln2_gain: Mat::ones((1, d)),
            ln2_bias: Mat::zeros((1, d)),
        }
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> [&Mat; 12] {
        [
            &self.attention.w_q,
            &self.attention.w_k,
            &self.attention.w_v,
            &self.attention.w_o,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 12] {
        [
            &mut self.attention.w_q,
            &mut self.attention.w_k,
            &mut self.attention.w_v,
            &mut self.attention.w_o,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 12] = [
        "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
        "ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias",
    ];

    /// Places every tensor on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> LayerVars {
        let t = self.tensors().map(|m| g.param(m.clone()));
        LayerVars::from_array(t, self.attention.heads)
    }

    /// Places every tensor on the tape as a constant.
    pub fn bind_const(&self, g: &mut Graph) -> LayerVars {
        let t = self.tensors().map(|m| g.constant(m.clone()));
        LayerVars::from_array(t, self.attention.heads)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

/// Tape handles for one layer's tensors.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attention: AttentionVars,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl LayerVars {
    pub fn from_array(t: [Var; 12], heads: usize) -> Self {
        Self {
            attention: AttentionVars {
                w_q: t[0],
                w_k: t[1],
                w_v: t[2],
                w_o: t[3],
                heads,
            },
            ffn_w1: t[4],
            ffn_b1: t[5],
            ffn_w2: t[6],
            ffn_b2: t[7],
            ln1_gain: t[8],
            ln1_bias: t[9],
            ln2_gain: t[10],
            ln2_bias: t[11],
        }
    }

    pub fn to_array(&self) -> [Var; 12] {
        [
            self.attention.w_q,
            self.attention.w_k,
            self.attention.w_v,
            self.attention.w_o,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Multi-head cross-attention with queries from `x_q` and keys/values from
/// `x_kv`, before the output projection.
fn cross_heads(g: &mut Graph, x_kv: Var, x_q: Var, p: &AttentionVars, block: usize) -> Var {
    let q = g.matmul(x_q, p.w_q);
    let k = g.matmul(x_kv, p.w_k);
    let v = g.matmul(x_kv, p.w_v);
    g.attention(q, k, v, block, p.heads)
}

/// Cross-attention of `x1` (keys, values) queried by `x2`.
pub fn cross_attention_graph(
    g: &mut Graph,
    x1: Var,
    x2: Var,
    p: &AttentionVars,
    block: usize,
    mode: CrossMode,
) -> Var {
    let heads_out = cross_heads(g, x1, x2, p, block);
    let pre = match mode {
        CrossMode::Residual => g.sub(x2, heads_out),
        CrossMode::Plain => heads_out,
    };
    g.matmul(pre, p.w_o)
}

pub fn self_attention_graph(g: &mut Graph, x: Var, p: &AttentionVars, block: usize) -> Var {
    let a = cross_heads(g, x, x, p, block);
    g.matmul(a, p.w_o)
}

pub fn ffn_graph(g: &mut Graph, x: Var, p: &LayerVars) -> Var {
    let h = g.matmul(x, p.ffn_w1);
    let h = g.add_row(h, p.ffn_b1);
    let h = g.relu(h);
    let o = g.matmul(h, p.ffn_w2);
    g.add_row(o, p.ffn_b2)
}

/// `LayerNorm(z + FFN(z))`
fn ffn_sublayer(g: &mut Graph, z: Var, p: &LayerVars) -> Var {
    let f = ffn_graph(g, z, p);
    let s = g.add(z, f);
    g.layer_norm(s, p.ln2_gain, p.ln2_bias, LN_EPS)
}

/// Joint block: `Z = LN(CA(x1, x_agg) + x1)`, output `LN(Z + FFN(Z))`.
pub fn rca_block_graph(
    g: &mut Graph,
    x1: Var,
    x_agg: Var,
    p: &LayerVars,
    block: usize,
    mode: CrossMode,
) -> Var {
    let xr = cross_attention_graph(g, x1, x_agg, &p.attention, block, mode);
    let s = g.add(xr, x1);
    let z = g.layer_norm(s, p.ln1_gain, p.ln1_bias, LN_EPS);
    ffn_sublayer(g, z, p)
}

/// Post-norm encoder layer with self-attention.
pub fn transformer_layer_graph(g: &mut Graph, x: Var, p: &LayerVars, block: usize) -> Var {
    let a = self_attention_graph(g, x, &p.attention, block);
    let s = g.add(x, a);
    let z = g.layer_norm(s, p.ln1_gain, p.ln1_bias, LN_EPS);
    ffn_sublayer(g, z, p)
}

/// Mean of all embeddings except `i`.
pub fn aggregate_others_graph(g: &mut Graph, xs: &[Var], i: usize) -> Result<Var> {
    check_aggregate(xs.len(), i)?;
    let mut others = xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v);
    let first = others.next().expect("at least one other user");
    let sum = others.fold(first, |acc, v| g.add(acc, v));
    Ok(if xs.len() == 2 {
        sum
    } else {
        g.scale(sum, 1.0 / (xs.len() - 1) as f64)
    })
}

fn check_aggregate(m: usize, i: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::Usage(
            "aggregation needs at least two users; single-user models bypass joint blocks".into(),
        ));
    }
    if i >= m {
        return Err(Error::Usage(format!("user index {i} out of range for {m} users")));
    }
    Ok(())
}

/// `softmax(q·kᵀ/√d_h)·v` with `d_h` the column count of `q`.
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    if q.dim() != k.dim() || q.nrows() != v.nrows() {
        return Err(Error::shape(format!("{:?}", q.dim()), format!("k {:?}, v {:?}", k.dim(), v.dim())));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    Ok(attention_head(q.view(), k.view(), v.view(), scale).0)
}

fn check_tokens(x1: &Mat, x2: &Mat, d: usize) -> Result<()> {
    if x1.dim() != x2.dim() || x1.ncols() != d {
        return Err(Error::shape(
            format!("two n×{d} token matrices"),
            format!("{:?} and {:?}", x1.dim(), x2.dim()),
        ));
    }
    Ok(())
}

fn run_cross(x1: &Mat, x2: &Mat, p: &AttentionParams, mode: CrossMode) -> Result<Mat> {
    p.validate()?;
    check_tokens(x1, x2, p.d_model())?;
    let mut g = Graph::new();
    let a = g.constant(x1.clone());
    let b = g.constant(x2.clone());
    let vars = AttentionVars {
        w_q: g.constant(p.w_q.clone()),
        w_k: g.constant(p.w_k.clone()),
        w_v: g.constant(p.w_v.clone()),
        w_o: g.constant(p.w_o.clone()),
        heads: p.heads,
    };
    let out = cross_attention_graph(&mut g, a, b, &vars, x1.nrows(), mode);
    Ok(g.value(out).clone())
}

/// `(x2 − MultiHead(x2·Wq, x1·Wk, x1·Wv))·Wo`
pub fn residual_cross_attention(x1: &Mat, x2: &Mat, p: &AttentionParams) -> Result<Mat> {
    run_cross(x1, x2, p, CrossMode::Residual)
}

/// `MultiHead(x2·Wq, x1·Wk, x1·Wv)·Wo`
pub fn cross_attention_plain(x1: &Mat, x2: &Mat, p: &AttentionParams) -> Result<Mat> {
    run_cross(x1, x2, p, CrossMode::Plain)
}

pub fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat, eps: f64) -> Result<Mat> {
    let d = x.ncols();
    if d < 2 || gain.dim() != (1, d) || bias.dim() != (1, d) {
        return Err(Error::shape(format!("1x{d} gain and bias, d >= 2"), format!("{:?}", gain.dim())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gain.clone());
    let bv = g.constant(bias.clone());
    let y = g.layer_norm(xv, gv, bv, eps);
    Ok(g.value(y).clone())
}

fn run_layer(p: &LayerParams, f: impl FnOnce(&mut Graph, &LayerVars) -> Var) -> Mat {
    let mut g = Graph::new();
    let lv = p.bind_const(&mut g);
    let y = f(&mut g, &lv);
    g.value(y).clone()
}

pub fn ffn(x: &Mat, p: &LayerParams) -> Result<Mat> {
    if x.ncols() != p.ffn_w1.nrows() {
        return Err(Error::shape(p.ffn_w1.nrows(), x.ncols()));
    }
    Ok(run_layer(p, |g, lv| {
        let xv = g.constant(x.clone());
        ffn_graph(g, xv, lv)
    }))
}

fn run_block(x1: &Mat, x_agg: &Mat, p: &LayerParams, mode: CrossMode) -> Result<Mat> {
    p.attention.validate()?;
    check_tokens(x1, x_agg, p.attention.d_model())?;
    Ok(run_layer(p, |g, lv| {
        let a = g.constant(x1.clone());
        let b = g.constant(x_agg.clone());
        rca_block_graph(g, a, b, lv, x1.nrows(), mode)
    }))
}

pub fn rca_block(x1: &Mat, x_agg: &Mat, p: &LayerParams) -> Result<Mat> {
    run_block(x1, x_agg, p, CrossMode::Residual)
}

pub fn transformer_layer(x: &Mat, p: &LayerParams) -> Result<Mat> {
    p.attention.validate()?;
    check_tokens(x, x, p.attention.d_model())?;
    Ok(run_layer(p, |g, lv| {
        let xv = g.constant(x.clone());
        transformer_layer_graph(g, xv, lv, x.nrows())
    }))
}

pub fn aggregate_others(embeddings: &[Mat], i: usize) -> Result<Mat> {
    check_aggregate(embeddings.len(), i)?;
    let shape = embeddings[0].dim();
    if embeddings.iter().any(|e| e.dim() != shape) {
        return Err(Error::Usage("embeddings differ in shape".into()));
    }
    let mut sum = Mat::zeros(shape);
    for (j, e) in embeddings.iter().enumerate() {
        if j != i {
            sum += e;
        }
    }
    if embeddings.len() > 2 {
        sum /= (embeddings.len() - 1) as f64;
    }
    Ok(sum)
}

/// Sinusoidal positional encoding, `n_tokens×d`.
pub fn positional_encoding(n_tokens: usize, d: usize) -> Result<Mat> {
    if d % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    Ok(Mat::from_shape_fn((n_tokens, d), |(pos, c)| {
        let i = (c / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}
