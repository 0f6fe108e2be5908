//! Analog uplink: real/complex symbol mapping, power normalization and AWGN.

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolVector {
    pub s: Vec<Complex64>,
}

impl SymbolVector {
    pub fn mean_power(&self) -> f64 {
        if self.s.is_empty() {
            return 0.0;
        }
        self.s.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.s.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Uplink SNR in dB; `+inf` disables the noise.
    pub snr_db: f64,
    pub seed: u64,
}

/// Noise power `N_0 = 10^(−snr/10)` under unit symbol power.
pub fn noise_power(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Pairs `(v[2j], v[2j+1])` into `v[2j] + i·v[2j+1]`.
pub fn real_to_complex(v: &[f64]) -> Result<SymbolVector> {
    if v.len() % 2 != 0 {
        return Err(Error::Usage(format!(
            "feedback length {} is odd; symbols need pairs",
            v.len()
        )));
    }
    Ok(SymbolVector {
        s: v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect(),
    })
}

pub fn complex_to_real(s: &SymbolVector) -> Vec<f64> {
    s.s.iter().flat_map(|z| [z.re, z.im]).collect()
}

/// Scales `s` to unit mean squared magnitude; returns the applied scale.
pub fn normalize_power(s: &SymbolVector) -> Result<(SymbolVector, f64)> {
    let p = s.mean_power();
    if !(p > 0.0) {
        return Err(Error::Degenerate("cannot power-normalize a zero symbol vector".into()));
    }
    let scale = 1.0 / p.sqrt();
    Ok((
        SymbolVector {
            s: s.s.iter().map(|z| z * scale).collect(),
        },
        scale,
    ))
}

/// One complex Gaussian noise sample with variance `n0/2` per component.
pub fn complex_noise(n0: f64, rng: &mut Rng) -> Complex64 {
    let sd = (n0 / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * sd, im * sd)
}

/// Fills `out` with real-interleaved noise (`n0/2` per real component).
pub fn fill_noise(out: &mut [f64], snr_db: f64, rng: &mut Rng) {
    if snr_db == f64::INFINITY {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let sd = (noise_power(snr_db) / 2.0).sqrt();
    for v in out.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = n * sd;
    }
}

pub fn awgn(s: &SymbolVector, link: &LinkConfig, rng: &mut Rng) -> SymbolVector {
    if link.snr_db == f64::INFINITY {
        return s.clone();
    }
    let n0 = noise_power(link.snr_db);
    SymbolVector {
        s: s.s.iter().map(|z| z + complex_noise(n0, rng)).collect(),
    }
}
