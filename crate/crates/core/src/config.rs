//! Experiment configuration files (TOML).
//!
//! ```toml
//! [channel]
//! n_tx = 16
//! n_users = 2
//!
//! [codec]
//! k_feedback = 32
//! variant = "rca"
//!
//! [train]
//! epochs_stage1 = 10
//!
//! [data]
//! train = 5000
//! ```
//!
//! Every section and field is optional; missing values take the defaults.
//! `codec.n_tx` and `codec.n_delay` must agree with the channel section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::codec::CodecConfig;
use crate::dataset::SplitCounts;
use crate::error::{Error, Result};
use crate::sscc::BerTable;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train.bin`/`val.bin`/`test.bin`; generated in
    /// memory when absent.
    pub dir: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train: 5000,
            val: 500,
            test: 1000,
            seed: 2024,
        }
    }
}

impl DataConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the evaluation noise.
    pub seed: u64,
    pub batch_size: usize,
    pub snr_db: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 777,
            batch_size: 64,
            snr_db: vec![0.0, 10.0, 20.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsccConfig {
    pub bits: u32,
    /// Fraction of transmit magnitudes inside the clip range.
    pub clip_percentile: f64,
    pub code_rate: f64,
    pub constellation_points: u32,
    /// `(snr_db, ber)` points of a piecewise-constant table.
    pub ber_table: Vec<(f64, f64)>,
    /// Epochs of bit-level fine-tuning before evaluation.
    pub finetune_epochs: usize,
}

impl Default for SsccConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            clip_percentile: 0.999,
            code_rate: 0.5,
            constellation_points: 16,
            ber_table: vec![(f64::NEG_INFINITY, 0.1), (8.0, 1e-3), (10.0, 0.0)],
            finetune_epochs: 2,
        }
    }
}

impl SsccConfig {
    pub fn table(&self) -> Result<BerTable> {
        BerTable::new(self.ber_table.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub channel: ChannelConfig,
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub sscc: SsccConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.codec.validate()?;
        self.train.validate()?;
        if self.codec.n_tx != self.channel.n_tx || self.codec.n_delay != self.channel.n_delay {
            return Err(Error::InvalidConfig(format!(
                "codec expects {}x{} CSI but the channel produces {}x{}",
                self.codec.n_delay, self.codec.n_tx, self.channel.n_delay, self.channel.n_tx
            )));
        }
        self.codec.check_users(self.channel.n_users)?;
        if self.eval.batch_size == 0 {
            return Err(Error::InvalidConfig("eval.batch_size must be positive".into()));
        }
        self.sscc.table()?;
        Ok(())
    }
}
