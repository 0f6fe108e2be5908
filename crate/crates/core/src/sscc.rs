//! Separate source-channel coding comparator: uniform quantization, an
//! abstract bit channel and overhead accounting.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Bits per value.
    pub bits: u32,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "quantizer bits must be in 1..=16, got {}",
                self.bits
            )));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::InvalidConfig("quantizer needs clip_lo < clip_hi".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    /// Quantization step `Δ`.
    pub fn step(&self) -> f64 {
        (self.clip_hi - self.clip_lo) / self.levels() as f64
    }

    /// Symmetric clip range covering `|v| ≤ quantile(|v|, p)`.
    pub fn calibrate(bits: u32, values: &[f64], p: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("cannot calibrate a quantizer on no values".into()));
        }
        let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let idx = ((mags.len() - 1) as f64 * p.clamp(0.0, 1.0)).round() as usize;
        let hi = mags[idx].max(1e-12);
        let qc = Self {
            bits,
            clip_lo: -hi,
            clip_hi: hi,
        };
        qc.validate()?;
        Ok(qc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsccLinkConfig {
    /// Channel code rate `r`.
    pub code_rate: f64,
    /// Constellation size `a`.
    pub constellation_points: u32,
    /// Bit error probability of the abstracted coded link.
    pub ber: f64,
}

impl SsccLinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.code_rate > 0.0 && self.code_rate <= 1.0) {
            return Err(Error::InvalidConfig("code rate must be in (0, 1]".into()));
        }
        if self.constellation_points < 2 {
            return Err(Error::InvalidConfig("constellation needs at least 2 points".into()));
        }
        if !(0.0..=1.0).contains(&self.ber) {
            return Err(Error::InvalidConfig("ber must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Code index of one value (mid-rise: `2^q` cells of width `Δ` over the clip
/// range, top edge folded into the last cell).
pub fn quantize_value(v: f64, qc: &QuantizerConfig) -> u32 {
    let c = v.clamp(qc.clip_lo, qc.clip_hi);
    let idx = ((c - qc.clip_lo) / qc.step()).floor() as i64;
    idx.clamp(0, qc.levels() as i64 - 1) as u32
}

/// Center of cell `code`.
pub fn dequantize_value(code: u32, qc: &QuantizerConfig) -> f64 {
    qc.clip_lo + (code as f64 + 0.5) * qc.step()
}

/// Emits `q` bits per value, most significant bit first.
pub fn quantize(v: &[f64], qc: &QuantizerConfig) -> Result<Vec<bool>> {
    qc.validate()?;
    let q = qc.bits;
    let mut bits = Vec::with_capacity(v.len() * q as usize);
    for &x in v {
        let code = quantize_value(x, qc);
        bits.extend((0..q).rev().map(|b| (code >> b) & 1 == 1));
    }
    Ok(bits)
}

pub fn dequantize(bits: &[bool], qc: &QuantizerConfig) -> Result<Vec<f64>> {
    qc.validate()?;
    let q = qc.bits as usize;
    if bits.len() % q != 0 {
        return Err(Error::Usage(format!(
            "bit string length {} is not a multiple of {q}",
            bits.len()
        )));
    }
    Ok(bits
        .chunks_exact(q)
        .map(|word| {
            let code = word.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
            dequantize_value(code, qc)
        })
        .collect())
}

/// `⌈(b·q)/(r·log2 a)⌉` channel symbols.
pub fn overhead_symbols(b: usize, q: u32, r: f64, a: u32) -> Result<usize> {
    let d = (b as f64 * q as f64) / (r * (a as f64).log2());
    if !d.is_finite() || d < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "overhead for b={b}, q={q}, r={r}, a={a} is not finite"
        )));
    }
    // tolerate round-off in r (e.g. 1/3) before taking the ceiling
    let nearest = d.round();
    Ok(if (d - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        d.ceil() as usize
    })
}

/// Flips each bit independently with probability `ber`.
pub fn bit_channel(bits: &[bool], cfg: &SsccLinkConfig, rng: &mut Rng) -> Vec<bool> {
    if cfg.ber <= 0.0 {
        return bits.to_vec();
    }
    if cfg.ber >= 1.0 {
        return bits.iter().map(|b| !b).collect();
    }
    bits.iter().map(|&b| b ^ rng.gen_bool(cfg.ber)).collect()
}

/// Piecewise-constant SNR→BER table: the entry with the largest threshold
/// not above the SNR applies; below the first threshold the first BER holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerTable {
    pub points: Vec<(f64, f64)>,
}

impl BerTable {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidConfig("empty SNR-to-BER table".into()));
        }
        if points.iter().any(|(_, b)| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidConfig("BER values must be in [0, 1]".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { points })
    }

    /// A coded-modem-like step: `ber_low` below `threshold_db`, 0 at and above.
    pub fn step(threshold_db: f64, ber_low: f64) -> Self {
        Self {
            points: vec![(f64::NEG_INFINITY, ber_low), (threshold_db, 0.0)],
        }
    }

    pub fn ber_at(&self, snr_db: f64) -> f64 {
        self.points
            .iter()
            .rev()
            .find(|(t, _)| *t <= snr_db)
            .unwrap_or(&self.points[0])
            .1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn qc(bits: u32) -> QuantizerConfig {
        QuantizerConfig {
            bits,
            clip_lo: -1.0,
            clip_hi: 1.0,
        }
    }

    #[test]
    fn quantizer_edges() {
        let q = qc(3);
        assert_eq!(quantize_value(-1.0, &q), 0);
        assert_eq!(quantize_value(1.0, &q), 7);
        assert_eq!(quantize_value(-5.0, &q), 0);
        assert_eq!(quantize_value(9.0, &q), 7);
        assert_eq!(quantize(&[-0.3], &qc(1)).unwrap(), vec![false]);
        assert_eq!(quantize(&[0.3], &qc(1)).unwrap(), vec![true]);
    }

    #[test]
    fn dequantizer_examples() {
        let q = qc(2);
        assert_eq!(dequantize_value(0, &q), -1.0 + q.step() / 2.0);
        // 2-bit levels over [-1, 1]: centers -0.75, -0.25, 0.25, 0.75
        assert_eq!(dequantize(&[true, true], &q).unwrap(), vec![0.75]);
        assert_eq!(dequantize(&[false, true], &q).unwrap(), vec![-0.25]);
        assert!(dequantize(&[true, true, true], &q).is_err());
        for code in 0..q.levels() {
            let v = dequantize_value(code, &q);
            assert_eq!(quantize_value(v, &q), code);
        }
    }

    #[test]
    fn overhead_examples() {
        assert_eq!(overhead_symbols(512, 4, 0.5, 16).unwrap(), 1024);
        assert_eq!(overhead_symbols(100, 1, 1.0, 2).unwrap(), 100);
        assert_eq!(overhead_symbols(32, 4, 0.5, 16).unwrap(), 64);
        assert_eq!(overhead_symbols(10, 3, 0.5, 4).unwrap(), 30);
        assert_eq!(overhead_symbols(7, 1, 1.0, 4).unwrap(), 4);
        assert!(overhead_symbols(4, 2, 0.0, 4).is_err());
    }

    #[test]
    fn bit_channel_extremes() {
        let bits = vec![true, false, false, true, true];
        let mut r = stream(0, &[]);
        let clean = SsccLinkConfig {
            code_rate: 0.5,
            constellation_points: 16,
            ber: 0.0,
        };
        assert_eq!(bit_channel(&bits, &clean, &mut r), bits);
        let all = SsccLinkConfig { ber: 1.0, ..clean };
        let flipped: Vec<bool> = bits.iter().map(|b| !b).collect();
        assert_eq!(bit_channel(&bits, &all, &mut r), flipped);
    }

    #[test]
    fn ber_table_lookup() {
        let t = BerTable::step(8.0, 0.2);
        assert_eq!(t.ber_at(0.0), 0.2);
        assert_eq!(t.ber_at(7.9), 0.2);
        assert_eq!(t.ber_at(8.0), 0.0);
        let t = BerTable::new(vec![(10.0, 0.0), (0.0, 0.3), (5.0, 0.01)]).unwrap();
        assert_eq!(t.ber_at(-3.0), 0.3);
        assert_eq!(t.ber_at(6.0), 0.01);
        assert_eq!(t.ber_at(20.0), 0.0);
    }

    #[test]
    fn calibration_is_symmetric() {
        let v: Vec<f64> = (0..101).map(|i| (i as f64 - 50.0) / 10.0).collect();
        let q = QuantizerConfig::calibrate(4, &v, 0.9).unwrap();
        assert_eq!(q.clip_lo, -q.clip_hi);
        assert!((q.clip_hi - 4.5).abs() < 1e-12);
    }
}
