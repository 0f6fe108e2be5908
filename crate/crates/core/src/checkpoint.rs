//! Checkpoint files.
//!
//! ```text
//! MUCSI-CKPT <header-bytes>\n
//! <header: pretty JSON>
//! <payload: little-endian f64>
//! ```
//!
//! The payload is every parameter scalar in canonical order (see
//! [`ModelParams::named_tensors`]; each tensor row-major). When the header
//! says `has_optimizer`, the Adam first and second moments follow in the
//! same order. The header lists tensor names and shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::codec::{CodecConfig, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::train::TrainState;

pub const CKPT_MAGIC: &str = "MUCSI-CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub codec: CodecConfig,
    pub channel: ChannelConfig,
    pub variant: Variant,
    /// Training stage that produced the checkpoint (0 = untrained).
    pub stage: u8,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub n_params: usize,
    pub has_optimizer: bool,
    pub tensors: Vec<TensorInfo>,
    /// Quantizer used by the separate-coding pipeline, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer: Option<crate::sscc::QuantizerConfig>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(
        codec: &CodecConfig,
        channel: &ChannelConfig,
        state: &TrainState,
        seed: u64,
        with_optimizer: bool,
    ) -> Self {
        let tensors = state
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                shape: [t.nrows(), t.ncols()],
            })
            .collect();
        Self {
            header: CheckpointHeader {
                version: CKPT_VERSION,
                codec: codec.clone(),
                channel: channel.clone(),
                variant: codec.variant,
                stage: state.stage,
                step: state.step,
                epoch: state.epoch,
                seed,
                n_params: state.params.count(),
                has_optimizer: with_optimizer,
                tensors,
                quantizer: state.quantizer,
            },
            state: state.clone(),
        }
    }

    /// Payload bytes (everything after the header).
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&self.state.params.to_flat());
        if self.header.has_optimizer {
            put(&self.state.adam_m.iter().flat_map(|t| t.iter().cloned()).collect::<Vec<_>>());
            put(&self.state.adam_v.iter().flat_map(|t| t.iter().cloned()).collect::<Vec<_>>());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = serde_json::to_string_pretty(&self.header).expect("header serializes");
        let mut out = format!("{CKPT_MAGIC} {}\n", body.len()).into_bytes();
        out.extend_from_slice(body.as_bytes());
        out.extend(self.payload());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or("missing header line")?;
        let first = std::str::from_utf8(&bytes[..nl]).map_err(|e| e.to_string())?;
        let len: usize = first
            .strip_prefix(CKPT_MAGIC)
            .and_then(|r| r.trim().parse().ok())
            .ok_or("bad magic line")?;
        let end = nl + 1 + len;
        if bytes.len() < end {
            return Err("truncated header".into());
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[nl + 1..end]).map_err(|e| e.to_string())?;
        if header.version != CKPT_VERSION {
            return Err(format!("unsupported checkpoint version {}", header.version));
        }
        let payload = &bytes[end..];
        let n = header.n_params;
        let copies = if header.has_optimizer { 3 } else { 1 };
        if payload.len() != copies * n * 8 {
            return Err(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                copies * n * 8
            ));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut params = ModelParams::init(&header.codec, 0).map_err(|e| e.to_string())?;
        let expected: Vec<TensorInfo> = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                shape: [t.nrows(), t.ncols()],
            })
            .collect();
        if expected != header.tensors {
            return Err("tensor layout does not match the codec configuration".into());
        }
        params.load_flat(&floats[..n]).map_err(|e| e.to_string())?;
        let mut state = TrainState::new(params);
        if header.has_optimizer {
            let mut off = n;
            for moments in [&mut state.adam_m, &mut state.adam_v] {
                for t in moments.iter_mut() {
                    let len = t.len();
                    t.iter_mut().zip(&floats[off..off + len]).for_each(|(d, s)| *d = *s);
                    off += len;
                }
            }
        }
        state.step = header.step;
        state.epoch = header.epoch;
        state.stage = header.stage;
        state.quantizer = header.quantizer;
        Ok(Self { header, state })
    }
}
