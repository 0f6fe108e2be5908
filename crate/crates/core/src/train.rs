//! End-to-end training: sum-MSE loss, Adam with the inverse-square-root
//! warmup schedule, and the two-stage SNR curriculum (random SNR per group,
//! then a fixed SNR).

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::channel::AngleDelayCsi;
use crate::codec::{self, AwgnUplink, CodecConfig, ModelParams, Noiseless, QuantizedUplink, Uplink};
use crate::error::{Error, Result};
use crate::eval::{self, EvalLink};
use crate::rng;
use crate::sscc::QuantizerConfig;

/// What the uplink looks like during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainLink {
    /// Analog symbols plus AWGN at the stage's SNR.
    Awgn,
    /// Perfect analog feedback.
    Noiseless,
    /// Perfect bit-level feedback of quantized symbols (straight-through
    /// gradient). The clip range is calibrated on the training set at the
    /// start of the stage unless already set.
    Quantized { bits: u32, clip_percentile: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Multiplier on the warmup schedule.
    pub lr_factor: f64,
    /// Stage-1 SNR range `[lo, hi]` in dB.
    pub snr_range_db: [f64; 2],
    pub snr_fixed_db: f64,
    /// Draw an SNR per user instead of per group in stage 1.
    pub per_user_snr: bool,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub link: TrainLink,
    /// Validate every this many epochs (0 disables validation).
    pub val_every: usize,
    /// Validation SNR; defaults to the fixed SNR.
    pub val_snr_db: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 20,
            epochs_stage2: 4,
            batch_size: 32,
            warmup_steps: 400,
            lr_factor: 0.5,
            snr_range_db: [0.0, 20.0],
            snr_fixed_db: 10.0,
            per_user_snr: false,
            seed: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            link: TrainLink::Awgn,
            val_every: 1,
            val_snr_db: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive");
        }
        if !(self.snr_range_db[0] <= self.snr_range_db[1]) {
            return bad("snr_range_db must satisfy lo <= hi");
        }
        if !(self.lr_factor > 0.0) {
            return bad("lr_factor must be positive");
        }
        Ok(())
    }
}

/// `d^-0.5 · min(step^-0.5, step·warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Usage("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5)))
}

/// `Σ_m ‖truth_m − est_m‖_F²`.
pub fn sum_mse_loss(truth: &[AngleDelayCsi], est: &[AngleDelayCsi]) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::shape(truth.len(), est.len()));
    }
    truth
        .iter()
        .zip(est)
        .map(|(t, e)| {
            if t.dim() != e.dim() {
                return Err(Error::shape(format!("{:?}", t.dim()), format!("{:?}", e.dim())));
            }
            Ok(t.h.iter().zip(e.h.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>())
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epochs completed so far (across stages).
    pub epoch: u64,
    pub stage: u8,
    pub adam_m: Vec<Mat>,
    pub adam_v: Vec<Mat>,
    pub quantizer: Option<QuantizerConfig>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let zeros: Vec<Mat> = params.tensors().iter().map(|t| Mat::zeros(t.dim())).collect();
        Self {
            params,
            step: 0,
            epoch: 0,
            stage: 0,
            adam_m: zeros.clone(),
            adam_v: zeros,
            quantizer: None,
        }
    }

    /// FNV-1a over the parameter bytes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.params.to_flat() {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn adam_update(&mut self, grads: &[Mat], lr: f64, cfg: &TrainConfig) {
        let t = self.step as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let eps = cfg.adam_eps;
        for (((p, g), m), v) in self
            .params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.adam_m)
            .zip(&mut self.adam_v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_nmse_db: Option<f64>,
}

/// Receives training log rows.
pub trait TrainLog {
    fn record(&mut self, row: &LogRow);
}

impl TrainLog for Vec<LogRow> {
    fn record(&mut self, row: &LogRow) {
        self.push(row.clone());
    }
}

/// Writes rows as CSV (`stage,epoch,step,lr,loss,val_nmse_db`).
pub struct CsvLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvLog<W> {
    pub fn new(w: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(w),
        }
    }
}

impl<W: Write> TrainLog for CsvLog<W> {
    fn record(&mut self, row: &LogRow) {
        if let Err(e) = self.writer.serialize(row).and_then(|_| Ok(self.writer.flush()?)) {
            log::warn!("training log write failed: {e}");
        }
    }
}

/// Discards rows.
pub struct NoLog;

impl TrainLog for NoLog {
    fn record(&mut self, _row: &LogRow) {}
}

/// Which SNR plan a stage uses.
#[derive(Debug, Clone, Copy)]
enum SnrPlan {
    Range([f64; 2]),
    Fixed(f64),
}

/// Runs one optimizer step on a batch of groups; returns the mean per-group
/// sum-MSE before the update.
pub fn train_step(
    state: &mut TrainState,
    ccfg: &CodecConfig,
    tcfg: &TrainConfig,
    groups: &[&[AngleDelayCsi]],
    uplink: &mut dyn Uplink,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(&state.params, ccfg, groups, uplink)?;
    state.step += 1;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: state.step,
            loss,
        });
    }
    let lr = tcfg.lr_factor * noam_lr(state.step, ccfg.d_model, tcfg.warmup_steps)?;
    state.adam_update(&grads, lr, tcfg);
    Ok(loss)
}

/// Mean per-group sum-MSE of a batch and its parameter gradients.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    ccfg: &CodecConfig,
    groups: &[&[AngleDelayCsi]],
    uplink: &mut dyn Uplink,
) -> Result<(f64, Vec<Mat>)> {
    let m = groups.first().map(|g| g.len()).unwrap_or(0);
    if groups.iter().any(|g| g.len() != m) {
        return Err(Error::Usage("groups in a batch differ in user count".into()));
    }
    let mut g = Graph::new();
    let mv = params.bind(&mut g, true);
    let targets: Vec<Var> = (0..m)
        .map(|u| g.constant(codec::stack_tokens(groups.iter().map(|grp| &grp[u]))))
        .collect();
    let fwd = codec::forward(&mut g, &mv, ccfg, &targets, uplink)?;
    let sse = codec::sum_squared_error(&mut g, &fwd.recon, &targets);
    let loss = g.scale(sse, 1.0 / groups.len() as f64);
    let value = g.value(loss)[[0, 0]];
    g.backward(loss);
    Ok((value, params.grads(&g, &mv)))
}

fn calibrate_quantizer(
    params: &ModelParams,
    ccfg: &CodecConfig,
    data: &[Vec<AngleDelayCsi>],
    bits: u32,
    percentile: f64,
) -> Result<QuantizerConfig> {
    let values = eval::transmitted_values(params, ccfg, data, 64)?;
    QuantizerConfig::calibrate(bits, &values, percentile)
}

fn run_stage(
    mut state: TrainState,
    ccfg: &CodecConfig,
    tcfg: &TrainConfig,
    train: &[Vec<AngleDelayCsi>],
    val: Option<&[Vec<AngleDelayCsi>]>,
    stage: u8,
    epochs: usize,
    plan: SnrPlan,
    log: &mut dyn TrainLog,
) -> Result<TrainState> {
    tcfg.validate()?;
    ccfg.validate()?;
    if epochs == 0 {
        return Ok(state);
    }
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    ccfg.check_users(train[0].len())?;
    state.stage = stage;
    if let TrainLink::Quantized { bits, clip_percentile } = tcfg.link {
        if state.quantizer.map(|q| q.bits) != Some(bits) {
            state.quantizer = Some(calibrate_quantizer(&state.params, ccfg, train, bits, clip_percentile)?);
        }
    }
    let users = train[0].len();
    let bs = tcfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        let mut shuffle = rng::stream(tcfg.seed, &[0x5348_5546, state.epoch]);
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            if chunk.len() < bs {
                break;
            }
            let groups: Vec<&[AngleDelayCsi]> = chunk.iter().map(|&i| train[i].as_slice()).collect();
            let keys: Vec<u64> = chunk.iter().map(|&i| state.step << 20 | i as u64).collect();
            let mut snr_rng = rng::stream(tcfg.seed, &[0x534e_52, state.step]);
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| match plan {
                        SnrPlan::Fixed(s) => s,
                        SnrPlan::Range([lo, hi]) if lo == hi => lo,
                        SnrPlan::Range([lo, hi]) => snr_rng.gen_range(lo..hi),
                    })
                    .collect()
            };
            let loss = match tcfg.link {
                TrainLink::Awgn => {
                    let snr = if tcfg.per_user_snr {
                        (0..users).map(|_| draw(bs)).collect()
                    } else {
                        vec![draw(bs); users]
                    };
                    let mut up = AwgnUplink {
                        seed: tcfg.seed,
                        row_keys: keys,
                        snr_db: snr,
                    };
                    train_step(&mut state, ccfg, tcfg, &groups, &mut up)?
                }
                TrainLink::Noiseless => train_step(&mut state, ccfg, tcfg, &groups, &mut Noiseless)?,
                TrainLink::Quantized { .. } => {
                    let mut up = QuantizedUplink {
                        quantizer: state.quantizer.expect("calibrated above"),
                        seed: tcfg.seed,
                        row_keys: keys,
                        ber: vec![0.0; bs],
                        code_rate: 1.0,
                        constellation_points: 2,
                    };
                    train_step(&mut state, ccfg, tcfg, &groups, &mut up)?
                }
            };
            total += loss;
            batches += 1;
        }
        state.epoch += 1;
        let val_nmse_db = match val {
            Some(v) if tcfg.val_every > 0 && state.epoch % tcfg.val_every as u64 == 0 => {
                let snr = tcfg.val_snr_db.unwrap_or(tcfg.snr_fixed_db);
                let link = match (tcfg.link, state.quantizer) {
                    (TrainLink::Quantized { .. }, Some(q)) => EvalLink::Quantized {
                        quantizer: q,
                        ber: 0.0,
                    },
                    (TrainLink::Noiseless, _) => EvalLink::Noiseless,
                    _ => EvalLink::Awgn { snr_db: snr },
                };
                Some(eval::evaluate(&state.params, ccfg, v, &link, tcfg.seed ^ 0x5641_4c, 64)?.nmse_db())
            }
            _ => None,
        };
        let row = LogRow {
            stage,
            epoch: state.epoch,
            step: state.step,
            lr: tcfg.lr_factor * noam_lr(state.step.max(1), ccfg.d_model, tcfg.warmup_steps)?,
            loss: total / batches.max(1) as f64,
            val_nmse_db,
        };
        info!(
            "stage {} epoch {} step {} loss {:.5} val {:?}",
            row.stage, row.epoch, row.step, row.loss, row.val_nmse_db
        );
        log.record(&row);
    }
    Ok(state)
}

/// Pretraining with the SNR drawn uniformly from `snr_range_db` per group.
pub fn train_stage1(
    state: TrainState,
    ccfg: &CodecConfig,
    tcfg: &TrainConfig,
    train: &[Vec<AngleDelayCsi>],
    val: Option<&[Vec<AngleDelayCsi>]>,
    log: &mut dyn TrainLog,
) -> Result<TrainState> {
    let plan = SnrPlan::Range(tcfg.snr_range_db);
    run_stage(state, ccfg, tcfg, train, val, 1, tcfg.epochs_stage1, plan, log)
}

/// Fine-tuning at `snr_fixed_db`.
pub fn train_stage2(
    state: TrainState,
    ccfg: &CodecConfig,
    tcfg: &TrainConfig,
    train: &[Vec<AngleDelayCsi>],
    val: Option<&[Vec<AngleDelayCsi>]>,
    log: &mut dyn TrainLog,
) -> Result<TrainState> {
    let plan = SnrPlan::Fixed(tcfg.snr_fixed_db);
    run_stage(state, ccfg, tcfg, train, val, 2, tcfg.epochs_stage2, plan, log)
}
