//! Per-user encoder and base-station multi-user decoder.
//!
//! Encoder (one copy, run by every user):
//! tokens `N_t×2N_a` → linear embed to `d` → + positional encoding →
//! `l1` transformer layers → project to `2N_a` → flatten → dense to `k`.
//!
//! Decoder: dense `k → 2N_a·N_t` → reshape `N_t×2N_a` → embed → + positional
//! encoding → `l2` per-user transformer layers → `l3` joint blocks → project
//! back to `2N_a` → CSI.
//!
//! The joint blocks depend on [`Variant`]. With [`Variant::Rca`] user `i`'s
//! block receives its own features and the mean of the other users'
//! features; the attention output is subtracted from the aggregate before
//! the output projection.

use ndarray::{s, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::channel::{AngleDelayCsi, CMat};
use crate::error::{Error, Result};
use crate::nn::{self, init_weight, CrossMode, LayerParams, LayerVars};
use crate::rng::{self, Rng};
use crate::sscc::{self, QuantizerConfig, SsccLinkConfig};

/// Decoder joint-stage architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Residual cross-attention against the other users' mean.
    Rca,
    /// Single-user: joint stage replaced by plain transformer layers.
    PlainTransformer,
    /// Cross-attention against the other users without the residual cut.
    TypicalCa,
    /// Residual attention with the user's own features as query source.
    SelfQuery,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Rca,
        Variant::PlainTransformer,
        Variant::TypicalCa,
        Variant::SelfQuery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rca => "rca",
            Variant::PlainTransformer => "plain_transformer",
            Variant::TypicalCa => "typical_ca",
            Variant::SelfQuery => "self_query",
        }
    }

    /// Whether the joint stage reads other users' features.
    pub fn is_cross_user(self) -> bool {
        matches!(self, Variant::Rca | Variant::TypicalCa)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Encoder transformer layers.
    pub l1: usize,
    /// Decoder per-user transformer layers.
    pub l2: usize,
    /// Decoder joint blocks.
    pub l3: usize,
    /// Real feedback length `k` (even).
    pub k_feedback: usize,
    pub n_tx: usize,
    pub n_delay: usize,
    pub variant: Variant,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            l1: 1,
            l2: 1,
            l3: 1,
            k_feedback: 32,
            n_tx: 16,
            n_delay: 16,
            variant: Variant::Rca,
        }
    }
}

/// `k = round(cr·2·N_a·N_t)`.
pub fn feedback_len(cr: f64, n_delay: usize, n_tx: usize) -> usize {
    (cr * (2 * n_delay * n_tx) as f64).round() as usize
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("codec: {m}")));
        if self.k_feedback < 2 || self.k_feedback % 2 != 0 {
            return bad(format!("k_feedback must be even and >= 2, got {}", self.k_feedback));
        }
        if self.l1 == 0 || self.l2 == 0 {
            return bad("l1 and l2 must be at least 1".into());
        }
        if self.l3 == 0 && self.variant != Variant::PlainTransformer {
            return bad(format!("variant {} needs l3 >= 1", self.variant));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return bad("d_model must be even".into());
        }
        if self.n_tx == 0 || self.n_delay == 0 {
            return bad("n_tx and n_delay must be positive".into());
        }
        Ok(())
    }

    /// Token width `2N_a`.
    pub fn token_width(&self) -> usize {
        2 * self.n_delay
    }

    /// Flattened real CSI dimension `2·N_a·N_t`.
    pub fn csi_dim(&self) -> usize {
        2 * self.n_delay * self.n_tx
    }

    /// Token scaling that gives unit-energy CSI unit mean power per complex
    /// entry; undone at the decoder output.
    pub fn token_scale(&self) -> f64 {
        ((self.n_delay * self.n_tx) as f64).sqrt()
    }

    pub fn compression_ratio(&self) -> f64 {
        self.k_feedback as f64 / self.csi_dim() as f64
    }

    /// Feedback symbols per user on the uplink.
    pub fn n_symbols(&self) -> usize {
        self.k_feedback / 2
    }

    pub fn check_users(&self, m: usize) -> Result<()> {
        if m == 0 {
            return Err(Error::Usage("no users given".into()));
        }
        if m < 2 && self.variant.is_cross_user() {
            return Err(Error::Usage(format!(
                "variant {} needs at least two users, got {m}",
                self.variant
            )));
        }
        Ok(())
    }
}

/// Weight and `1×out` bias of a linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Mat,
    pub b: Mat,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            w: init_weight(fan_in, fan_out, rng),
            b: Mat::zeros((1, fan_out)),
        }
    }
}

/// All learnable tensors. One copy serves every user.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub enc_embed: Dense,
    pub enc_layers: Vec<LayerParams>,
    pub enc_proj: Dense,
    pub enc_fc: Dense,
    pub dec_fc: Dense,
    pub dec_embed: Dense,
    pub dec_layers: Vec<LayerParams>,
    pub joint_layers: Vec<LayerParams>,
    pub dec_proj: Dense,
}

#[derive(Debug, Clone, Copy)]
struct DenseVars {
    w: Var,
    b: Var,
}

/// Tape handles mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    enc_embed: DenseVars,
    enc_layers: Vec<LayerVars>,
    enc_proj: DenseVars,
    enc_fc: DenseVars,
    dec_fc: DenseVars,
    dec_embed: DenseVars,
    dec_layers: Vec<LayerVars>,
    joint_layers: Vec<LayerVars>,
    dec_proj: DenseVars,
    flat: Vec<Var>,
}

impl ModelVars {
    /// Handles in canonical order.
    pub fn flat(&self) -> &[Var] {
        &self.flat
    }
}

impl ModelParams {
    pub fn init(cfg: &CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[0x1417]);
        let (d, tw, h) = (cfg.d_model, cfg.token_width(), cfg.heads);
        let layers = |n: usize, rng: &mut Rng| (0..n).map(|_| LayerParams::init(d, h, rng)).collect();
        Ok(Self {
            enc_embed: Dense::init(tw, d, &mut rng),
            enc_layers: layers(cfg.l1, &mut rng),
            enc_proj: Dense::init(d, tw, &mut rng),
            enc_fc: Dense::init(cfg.csi_dim(), cfg.k_feedback, &mut rng),
            dec_fc: Dense::init(cfg.k_feedback, cfg.csi_dim(), &mut rng),
            dec_embed: Dense::init(tw, d, &mut rng),
            dec_layers: layers(cfg.l2, &mut rng),
            joint_layers: layers(cfg.l3, &mut rng),
            dec_proj: Dense::init(d, tw, &mut rng),
        })
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        push_dense(&mut out, "enc.embed", &self.enc_embed);
        push_layers(&mut out, "enc.layer", &self.enc_layers);
        push_dense(&mut out, "enc.proj", &self.enc_proj);
        push_dense(&mut out, "enc.fc", &self.enc_fc);
        push_dense(&mut out, "dec.fc", &self.dec_fc);
        push_dense(&mut out, "dec.embed", &self.dec_embed);
        push_layers(&mut out, "dec.layer", &self.dec_layers);
        push_layers(&mut out, "dec.joint", &self.joint_layers);
        push_dense(&mut out, "dec.proj", &self.dec_proj);
        out
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        out.push(&mut self.enc_embed.w);
        out.push(&mut self.enc_embed.b);
        for l in &mut self.enc_layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.enc_proj.w);
        out.push(&mut self.enc_proj.b);
        out.push(&mut self.enc_fc.w);
        out.push(&mut self.enc_fc.b);
        out.push(&mut self.dec_fc.w);
        out.push(&mut self.dec_fc.b);
        out.push(&mut self.dec_embed.w);
        out.push(&mut self.dec_embed.b);
        for l in &mut self.dec_layers {
            out.extend(l.tensors_mut());
        }
        for l in &mut self.joint_layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.dec_proj.w);
        out.push(&mut self.dec_proj.b);
        out
    }

    /// Places every tensor on the tape, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let flat: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let heads = self.enc_layers.first().map(|l| l.attention.heads).unwrap_or(1);
        let it = &mut flat.iter().copied();
        let mv = ModelVars {
            enc_embed: take_dense(it),
            enc_layers: take_layers(it, self.enc_layers.len(), heads),
            enc_proj: take_dense(it),
            enc_fc: take_dense(it),
            dec_fc: take_dense(it),
            dec_embed: take_dense(it),
            dec_layers: take_layers(it, self.dec_layers.len(), heads),
            joint_layers: take_layers(it, self.joint_layers.len(), heads),
            dec_proj: take_dense(it),
            flat: Vec::new(),
        };
        debug_assert!(it.next().is_none());
        ModelVars { flat, ..mv }
    }

    /// Gradients in canonical order (zeros where a tensor got none).
    pub fn grads(&self, g: &Graph, vars: &ModelVars) -> Vec<Mat> {
        vars.flat
            .iter()
            .zip(self.tensors())
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Mat::zeros(t.dim())))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every scalar in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().cloned()).collect()
    }

    pub fn load_flat(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.count() {
            return Err(Error::shape(self.count(), data.len()));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.iter_mut().zip(&data[off..off + n]).for_each(|(d, s)| *d = *s);
            off += n;
        }
        Ok(())
    }
}

fn take_dense(it: &mut impl Iterator<Item = Var>) -> DenseVars {
    DenseVars {
        w: it.next().unwrap(),
        b: it.next().unwrap(),
    }
}

fn take_layers(it: &mut impl Iterator<Item = Var>, n: usize, heads: usize) -> Vec<LayerVars> {
    (0..n)
        .map(|_| LayerVars::from_array(std::array::from_fn(|_| it.next().unwrap()), heads))
        .collect()
}

fn push_dense<'a>(out: &mut Vec<(String, &'a Mat)>, name: &str, p: &'a Dense) {
    out.push((format!("{name}.w"), &p.w));
    out.push((format!("{name}.b"), &p.b));
}

fn push_layers<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: &str, ls: &'a [LayerParams]) {
    for (i, l) in ls.iter().enumerate() {
        for (n, t) in LayerParams::TENSOR_NAMES.iter().zip(l.tensors()) {
            out.push((format!("{prefix}.{i}.{n}"), t));
        }
    }
}

/// Total scalar parameter count. Independent of the number of users.
pub fn count_parameters(p: &ModelParams) -> usize {
    p.count()
}

/// Real feedback vector `v` of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackVector {
    pub v: Vec<f64>,
}

/// `N_a×N_t` complex → `N_t×2N_a` real; row `t` is `[Re h[:,t]; Im h[:,t]]`.
pub fn csi_to_tokens(h: &AngleDelayCsi) -> Mat {
    let (n_a, n_t) = h.dim();
    Mat::from_shape_fn((n_t, 2 * n_a), |(t, c)| {
        if c < n_a {
            h.h[[c, t]].re
        } else {
            h.h[[c - n_a, t]].im
        }
    })
}

pub fn tokens_to_csi(x: &Mat, n_delay: usize) -> Result<AngleDelayCsi> {
    let (n_t, w) = x.dim();
    if w != 2 * n_delay {
        return Err(Error::shape(format!("N_t×{}", 2 * n_delay), format!("{n_t}×{w}")));
    }
    Ok(AngleDelayCsi {
        h: CMat::from_shape_fn((n_delay, n_t), |(r, t)| {
            Complex64::new(x[[t, r]], x[[t, r + n_delay]])
        }),
    })
}

/// Stacks the token matrices of several samples into `(B·N_t)×2N_a`.
pub fn stack_tokens<'a>(csi: impl IntoIterator<Item = &'a AngleDelayCsi>) -> Mat {
    let mats: Vec<Mat> = csi.into_iter().map(csi_to_tokens).collect();
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("consistent token shapes")
}

/// Splits a `(B·N_t)×2N_a` token stack back into `B` CSI matrices.
pub fn unstack_tokens(x: &Mat, n_tx: usize, n_delay: usize) -> Result<Vec<AngleDelayCsi>> {
    if x.nrows() % n_tx != 0 {
        return Err(Error::shape(format!("multiple of {n_tx} rows"), x.nrows()));
    }
    (0..x.nrows() / n_tx)
        .map(|b| tokens_to_csi(&x.slice(s![b * n_tx..(b + 1) * n_tx, ..]).to_owned(), n_delay))
        .collect()
}

fn tiled_positional(cfg: &CodecConfig, batch: usize) -> Mat {
    let pe = nn::positional_encoding(cfg.n_tx, cfg.d_model).expect("validated even d");
    let views: Vec<_> = (0..batch).map(|_| pe.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

fn dense(g: &mut Graph, x: Var, p: DenseVars) -> Var {
    let y = g.matmul(x, p.w);
    g.add_row(y, p.b)
}

/// Encoder on a `(B·N_t)×2N_a` token stack; returns `B×k`.
pub fn encode_graph(g: &mut Graph, mv: &ModelVars, cfg: &CodecConfig, tokens: Var) -> Var {
    let rows = g.shape(tokens).0;
    let batch = rows / cfg.n_tx;
    let tokens = g.scale(tokens, cfg.token_scale());
    let x = dense(g, tokens, mv.enc_embed);
    let pe = g.constant(tiled_positional(cfg, batch));
    let mut x = g.add(x, pe);
    for l in &mv.enc_layers {
        x = nn::transformer_layer_graph(g, x, l, cfg.n_tx);
    }
    let y = dense(g, x, mv.enc_proj);
    let flat = g.reshape(y, batch, cfg.csi_dim());
    dense(g, flat, mv.enc_fc)
}

/// Decoder over all users' received `B×k` vectors; returns per-user
/// `(B·N_t)×2N_a` token stacks.
pub fn decode_graph(
    g: &mut Graph,
    mv: &ModelVars,
    cfg: &CodecConfig,
    received: &[Var],
) -> Result<Vec<Var>> {
    cfg.check_users(received.len())?;
    let batch = g.shape(received[0]).0;
    let pe = g.constant(tiled_positional(cfg, batch));
    let mut xs: Vec<Var> = received
        .iter()
        .map(|&v| {
            let e = dense(g, v, mv.dec_fc);
            let t = g.reshape(e, batch * cfg.n_tx, cfg.token_width());
            let x = dense(g, t, mv.dec_embed);
            let mut x = g.add(x, pe);
            for l in &mv.dec_layers {
                x = nn::transformer_layer_graph(g, x, l, cfg.n_tx);
            }
            x
        })
        .collect();
    for l in &mv.joint_layers {
        let prev = xs.clone();
        xs = (0..prev.len())
            .map(|i| -> Result<Var> {
                Ok(match cfg.variant {
                    Variant::PlainTransformer => nn::transformer_layer_graph(g, prev[i], l, cfg.n_tx),
                    Variant::SelfQuery => {
                        nn::rca_block_graph(g, prev[i], prev[i], l, cfg.n_tx, CrossMode::Residual)
                    }
                    Variant::Rca | Variant::TypicalCa => {
                        let agg = nn::aggregate_others_graph(g, &prev, i)?;
                        let mode = if cfg.variant == Variant::Rca {
                            CrossMode::Residual
                        } else {
                            CrossMode::Plain
                        };
                        nn::rca_block_graph(g, prev[i], agg, l, cfg.n_tx, mode)
                    }
                })
            })
            .collect::<Result<_>>()?;
    }
    let inv = 1.0 / cfg.token_scale();
    Ok(xs
        .into_iter()
        .map(|x| {
            let y = dense(g, x, mv.dec_proj);
            g.scale(y, inv)
        })
        .collect())
}

/// What happens to the transmitted vectors between encoder and decoder.
pub trait Uplink {
    /// `symbols` is the power-normalized `B×k` transmit matrix of `user`.
    fn transmit(&mut self, g: &mut Graph, user: usize, symbols: Var) -> Var;
}

/// Perfect feedback.
pub struct Noiseless;

impl Uplink for Noiseless {
    fn transmit(&mut self, _g: &mut Graph, _user: usize, symbols: Var) -> Var {
        symbols
    }
}

/// AWGN with per-user, per-row SNR (`snr_db[user][row]`). Row `r` of user
/// `m` draws its noise from the stream `(seed, row_keys[r], m)`, so paired
/// evaluations see identical noise.
pub struct AwgnUplink {
    pub seed: u64,
    pub row_keys: Vec<u64>,
    pub snr_db: Vec<Vec<f64>>,
}

impl AwgnUplink {
    /// Same SNR for every row and user.
    pub fn uniform(seed: u64, row_keys: Vec<u64>, users: usize, snr_db: f64) -> Self {
        let n = row_keys.len();
        Self {
            seed,
            row_keys,
            snr_db: vec![vec![snr_db; n]; users],
        }
    }
}

impl Uplink for AwgnUplink {
    fn transmit(&mut self, g: &mut Graph, user: usize, symbols: Var) -> Var {
        let (rows, k) = g.shape(symbols);
        assert_eq!(rows, self.row_keys.len(), "one key per row");
        let mut noise = Mat::zeros((rows, k));
        for (r, mut row) in noise.rows_mut().into_iter().enumerate() {
            let mut rng = rng::stream(self.seed, &[self.row_keys[r], user as u64]);
            crate::link::fill_noise(row.as_slice_mut().unwrap(), self.snr_db[user][r], &mut rng);
        }
        let n = g.constant(noise);
        g.add(symbols, n)
    }
}

/// Quantize → bit channel → dequantize, with a straight-through gradient.
pub struct QuantizedUplink {
    pub quantizer: QuantizerConfig,
    pub seed: u64,
    pub row_keys: Vec<u64>,
    /// Bit error rate per row.
    pub ber: Vec<f64>,
    pub code_rate: f64,
    pub constellation_points: u32,
}

impl Uplink for QuantizedUplink {
    fn transmit(&mut self, g: &mut Graph, user: usize, symbols: Var) -> Var {
        let x = g.value(symbols).clone();
        let mut out = Mat::zeros(x.dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            let bits = sscc::quantize(row.as_slice().unwrap(), &self.quantizer).expect("valid quantizer");
            let link = SsccLinkConfig {
                code_rate: self.code_rate,
                constellation_points: self.constellation_points,
                ber: self.ber[r],
            };
            let mut rng = rng::stream(self.seed, &[self.row_keys[r], user as u64]);
            let rx = sscc::bit_channel(&bits, &link, &mut rng);
            let v = sscc::dequantize(&rx, &self.quantizer).expect("whole words");
            out.row_mut(r).iter_mut().zip(v).for_each(|(d, s)| *d = s);
        }
        g.straight_through(symbols, out)
    }
}

/// Handles produced by one end-to-end pass.
pub struct Forward {
    /// Per-user reconstructed token stacks.
    pub recon: Vec<Var>,
    /// Per-user encoder outputs `B×k` (before power normalization).
    pub feedback: Vec<Var>,
    /// Per-user power-normalized transmit matrices.
    pub transmitted: Vec<Var>,
}

/// Encoder → power normalization → uplink → decoder for a batch of groups.
/// `tokens[m]` is user `m`'s `(B·N_t)×2N_a` stack.
pub fn forward(
    g: &mut Graph,
    mv: &ModelVars,
    cfg: &CodecConfig,
    tokens: &[Var],
    uplink: &mut dyn Uplink,
) -> Result<Forward> {
    cfg.check_users(tokens.len())?;
    let mut feedback = Vec::with_capacity(tokens.len());
    let mut transmitted = Vec::with_capacity(tokens.len());
    let mut received = Vec::with_capacity(tokens.len());
    for (m, &t) in tokens.iter().enumerate() {
        let v = encode_graph(g, mv, cfg, t);
        let s = g.power_norm(v);
        received.push(uplink.transmit(g, m, s));
        feedback.push(v);
        transmitted.push(s);
    }
    let recon = decode_graph(g, mv, cfg, &received)?;
    Ok(Forward {
        recon,
        feedback,
        transmitted,
    })
}

/// `Σ_m ‖target_m − recon_m‖²` summed over the batch, as a 1×1 node.
pub fn sum_squared_error(g: &mut Graph, recon: &[Var], targets: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for (&r, &t) in recon.iter().zip(targets) {
        let d = g.sub(r, t);
        let e = g.sum_sq(d);
        total = Some(match total {
            Some(acc) => g.add(acc, e),
            None => e,
        });
    }
    total.expect("at least one user")
}

fn check_csi(h: &AngleDelayCsi, cfg: &CodecConfig) -> Result<()> {
    if h.dim() != (cfg.n_delay, cfg.n_tx) {
        return Err(Error::shape(
            format!("{}x{} CSI", cfg.n_delay, cfg.n_tx),
            format!("{:?}", h.dim()),
        ));
    }
    Ok(())
}

/// Encoder output `v` for one user.
pub fn encode(h: &AngleDelayCsi, p: &ModelParams, cfg: &CodecConfig) -> Result<FeedbackVector> {
    cfg.validate()?;
    check_csi(h, cfg)?;
    let mut g = Graph::new();
    let mv = p.bind(&mut g, false);
    let t = g.constant(csi_to_tokens(h));
    let v = encode_graph(&mut g, &mv, cfg, t);
    Ok(FeedbackVector {
        v: g.value(v).iter().cloned().collect(),
    })
}

/// Joint reconstruction from the received real vectors of all users.
pub fn decode_multiuser(
    vs: &[FeedbackVector],
    p: &ModelParams,
    cfg: &CodecConfig,
) -> Result<Vec<AngleDelayCsi>> {
    cfg.validate()?;
    cfg.check_users(vs.len())?;
    if let Some(bad) = vs.iter().find(|v| v.v.len() != cfg.k_feedback) {
        return Err(Error::shape(cfg.k_feedback, bad.v.len()));
    }
    let mut g = Graph::new();
    let mv = p.bind(&mut g, false);
    let received: Vec<Var> = vs
        .iter()
        .map(|v| g.constant(Mat::from_shape_vec((1, v.v.len()), v.v.clone()).unwrap()))
        .collect();
    let out = decode_graph(&mut g, &mv, cfg, &received)?;
    out.iter()
        .map(|&x| tokens_to_csi(g.value(x), cfg.n_delay))
        .collect()
}
