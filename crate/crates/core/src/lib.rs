//! Multi-user CSI feedback for FDD massive MIMO.
//!
//! User equipments compress their truncated angle-delay CSI with a shared
//! transformer encoder and send the result as analog symbols over a noisy
//! uplink (deep joint source-channel coding). The base station reconstructs
//! every user with a per-user transformer stack followed by residual
//! cross-attention blocks that pull complementary information from the other
//! users in the group.
//!
//! Modules:
//! - [`channel`], [`dataset`]: correlated multipath channel generation and dataset files
//! - [`autodiff`], [`nn`]: reverse-mode tape and transformer building blocks
//! - [`codec`]: encoder, multi-user decoder, parameter layout
//! - [`link`]: analog uplink (power normalization, AWGN)
//! - [`sscc`]: quantize-and-transmit comparator
//! - [`train`], [`checkpoint`]: two-stage training and checkpoint files
//! - [`eval`]: NMSE, sweeps, result and plot-data emission
//! - [`config`]: experiment configuration files

pub mod autodiff;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod link;
pub mod nn;
pub mod rng;
pub mod sscc;
pub mod train;

pub use channel::{AngleDelayCsi, ChannelConfig, MultiUserSample, PathSet, SpatialFrequencyCsi};
pub use codec::{CodecConfig, FeedbackVector, ModelParams, Variant};
pub use error::{Error, Result};
pub use eval::{EvalReport, EvalRow};
pub use link::{LinkConfig, SymbolVector};
pub use sscc::{QuantizerConfig, SsccLinkConfig};
pub use train::{TrainConfig, TrainState};
