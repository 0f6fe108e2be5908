//! Correlated multi-user multipath channel generation.
//!
//! Each user's spatial-frequency CSI is a sum of `L` plane waves leaving a
//! half-wavelength ULA, one per multipath component:
//!
//! ```text
//! h_k = √(N_t/L) · Σ_l α_l · exp(−j2π·(k/N_c)·τ_l·f_s) · a(φ_l)
//! ```
//!
//! Users in one group share the scatterers (delays and AoDs up to a small
//! angular jitter) and have partially correlated complex gains, which gives
//! the angle-delay matrices overlapping support with different amplitudes.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub type CMat = Array2<Complex64>;

/// Half-width of the AoD draw, in radians.
pub const AOD_RANGE_RAD: f64 = PI / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// BS antennas `N_t`.
    pub n_tx: usize,
    /// OFDM subcarriers `N_c`.
    pub n_sub: usize,
    /// Retained delay rows `N_a`.
    pub n_delay: usize,
    pub bandwidth_hz: f64,
    /// Multipath components per user `L`.
    pub n_paths: usize,
    /// Users per group `M`.
    pub n_users: usize,
    /// Per-user AoD perturbation half-width.
    pub aod_jitter_rad: f64,
    /// Correlation coefficient between users' path gains; 0 gives
    /// independent gains.
    #[serde(default = "default_gain_correlation")]
    pub gain_correlation: f64,
}

fn default_gain_correlation() -> f64 {
    0.95
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            n_tx: 16,
            n_sub: 64,
            n_delay: 16,
            bandwidth_hz: 20e6,
            n_paths: 4,
            n_users: 2,
            aod_jitter_rad: 0.01,
            gain_correlation: default_gain_correlation(),
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("channel: {m}")));
        if self.n_tx == 0 || self.n_sub == 0 || self.n_delay == 0 {
            return bad("antenna, subcarrier and delay counts must be positive");
        }
        if self.n_delay > self.n_sub {
            return bad("n_delay must not exceed n_sub");
        }
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1");
        }
        if self.n_users == 0 {
            return bad("n_users must be at least 1");
        }
        if !(self.bandwidth_hz > 0.0) {
            return bad("bandwidth_hz must be positive");
        }
        if !(self.aod_jitter_rad >= 0.0) || !self.aod_jitter_rad.is_finite() {
            return bad("aod_jitter_rad must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.gain_correlation) {
            return bad("gain_correlation must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Multipath components of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub gains: Vec<Complex64>,
    /// Delays in samples (`τ·f_s`).
    pub delays: Vec<f64>,
    /// Angles of departure in radians.
    pub aods: Vec<f64>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.gains.is_empty() {
            return Err(Error::InvalidConfig("path set is empty".into()));
        }
        if self.delays.len() != self.gains.len() || self.aods.len() != self.gains.len() {
            return Err(Error::shape(
                format!("{} delays and aods", self.gains.len()),
                format!("{} delays, {} aods", self.delays.len(), self.aods.len()),
            ));
        }
        Ok(())
    }
}

/// `N_c×N_t` spatial-frequency CSI; row `k` is subcarrier `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFrequencyCsi {
    pub h: CMat,
}

/// `N_a×N_t` truncated angle-delay CSI.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleDelayCsi {
    pub h: CMat,
}

impl AngleDelayCsi {
    pub fn zeros(n_delay: usize, n_tx: usize) -> Self {
        Self {
            h: CMat::zeros((n_delay, n_tx)),
        }
    }

    pub fn energy(&self) -> f64 {
        self.h.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.h.dim()
    }
}

/// One group of `M` correlated users.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiUserSample {
    pub group_id: u64,
    pub users: Vec<AngleDelayCsi>,
    pub paths: Option<Vec<PathSet>>,
}

/// `a(φ)_i = exp(−jπ·i·sin φ)`, `i = 0..n_tx`.
pub fn steering_vector(phi: f64, n_tx: usize) -> Array1<Complex64> {
    let s = phi.sin();
    Array1::from_shape_fn(n_tx, |i| Complex64::from_polar(1.0, -PI * i as f64 * s))
}

pub fn synthesize_channel(paths: &PathSet, cfg: &ChannelConfig) -> Result<SpatialFrequencyCsi> {
    paths.validate()?;
    let (n_sub, n_tx) = (cfg.n_sub, cfg.n_tx);
    let amp = (n_tx as f64 / paths.len() as f64).sqrt();
    let mut h = CMat::zeros((n_sub, n_tx));
    for ((&g, &tau), &phi) in paths.gains.iter().zip(&paths.delays).zip(&paths.aods) {
        let a = steering_vector(phi, n_tx);
        for k in 0..n_sub {
            let phase = Complex64::from_polar(1.0, -2.0 * PI * (k as f64 / n_sub as f64) * tau);
            let c = g * phase * amp;
            for (dst, &ai) in h.row_mut(k).iter_mut().zip(a.iter()) {
                *dst += c * ai;
            }
        }
    }
    Ok(SpatialFrequencyCsi { h })
}

/// Inverse-direction FFT with unitary scaling, applied to one buffer.
fn unitary_ifft(fft: &Arc<dyn Fft<f64>>, buf: &mut [Complex64]) {
    fft.process(buf);
    let s = 1.0 / (buf.len() as f64).sqrt();
    buf.iter_mut().for_each(|z| *z *= s);
}

/// `F_d·H̃·F_aᴴ`, keeping the first `n_delay` rows.
///
/// `F_d[n,k] = exp(+j2πnk/N_c)/√N_c`, so a path delayed by `τ` samples lands
/// in delay row `τ`. `F_a[n,i] = exp(−j2πni/N_t)/√N_t`, so a path with
/// `sin φ = 2n/N_t` lands in angle column `n mod N_t`. Both are unitary.
pub fn to_angle_delay(h: &SpatialFrequencyCsi, n_delay: usize) -> Result<AngleDelayCsi> {
    let (n_sub, n_tx) = h.h.dim();
    if n_delay > n_sub {
        return Err(Error::Usage(format!(
            "n_delay ({n_delay}) exceeds subcarrier count ({n_sub})"
        )));
    }
    let mut planner = FftPlanner::new();
    let fft_d = planner.plan_fft_inverse(n_sub);
    let fft_a = planner.plan_fft_inverse(n_tx);

    let mut out = CMat::zeros((n_delay, n_tx));
    let mut col = vec![Complex64::default(); n_sub];
    for t in 0..n_tx {
        col.iter_mut()
            .zip(h.h.column(t))
            .for_each(|(d, s)| *d = *s);
        unitary_ifft(&fft_d, &mut col);
        for r in 0..n_delay {
            out[[r, t]] = col[r];
        }
    }
    let mut row = vec![Complex64::default(); n_tx];
    for r in 0..n_delay {
        row.iter_mut().zip(out.row(r)).for_each(|(d, s)| *d = *s);
        unitary_ifft(&fft_a, &mut row);
        out.row_mut(r).iter_mut().zip(&row).for_each(|(d, s)| *d = *s);
    }
    Ok(AngleDelayCsi { h: out })
}

fn complex_normal(rng: &mut Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws one scatterer geometry and derives `M` user path sets from it.
///
/// Delays are integer sample taps drawn uniformly from `[0, n_delay)`, AoDs
/// uniformly from `(−π/3, π/3)`. Each user gets the shared delays, the shared
/// AoDs plus independent uniform jitter, and gains
/// `√ρ·c_l + √(1−ρ)·g_{l,m}` with `c`, `g` standard complex Gaussian.
pub fn generate_group_paths(cfg: &ChannelConfig, rng: &mut Rng) -> Vec<PathSet> {
    let l = cfg.n_paths;
    let delays: Vec<f64> = (0..l)
        .map(|_| rng.gen_range(0..cfg.n_delay) as f64)
        .collect();
    let aods: Vec<f64> = (0..l)
        .map(|_| rng.gen_range(-AOD_RANGE_RAD..AOD_RANGE_RAD))
        .collect();
    let common: Vec<Complex64> = (0..l).map(|_| complex_normal(rng)).collect();
    let rho = cfg.gain_correlation;
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    (0..cfg.n_users)
        .map(|_| {
            let user_aods = aods
                .iter()
                .map(|&phi| {
                    if cfg.aod_jitter_rad > 0.0 {
                        phi + rng.gen_range(-cfg.aod_jitter_rad..=cfg.aod_jitter_rad)
                    } else {
                        phi
                    }
                })
                .collect();
            let gains = common
                .iter()
                .map(|&c| c * a + complex_normal(rng) * b)
                .collect();
            PathSet {
                gains,
                delays: delays.clone(),
                aods: user_aods,
            }
        })
        .collect()
}

pub fn normalize_sample(h: &AngleDelayCsi) -> Result<AngleDelayCsi> {
    let norm = h.energy().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!(
            "angle-delay CSI has Frobenius norm {norm}"
        )));
    }
    Ok(AngleDelayCsi {
        h: h.h.mapv(|z| z / norm),
    })
}

/// Generates group `group_id` from its own seed. Degenerate draws are
/// redrawn from the same stream.
pub fn generate_sample(cfg: &ChannelConfig, seed: u64, group_id: u64) -> Result<MultiUserSample> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[group_id]);
    loop {
        let paths = generate_group_paths(cfg, &mut rng);
        let users: Result<Vec<_>> = paths
            .iter()
            .map(|p| {
                let sf = synthesize_channel(p, cfg)?;
                normalize_sample(&to_angle_delay(&sf, cfg.n_delay)?)
            })
            .collect();
        match users {
            Ok(users) => {
                return Ok(MultiUserSample {
                    group_id,
                    users,
                    paths: Some(paths),
                })
            }
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Fraction of the `top` largest-magnitude bins of `a` that are also among
/// the `top` largest of `b`.
pub fn support_overlap(a: &AngleDelayCsi, b: &AngleDelayCsi, top: usize) -> f64 {
    let top_bins = |h: &CMat| {
        let mut idx: Vec<usize> = (0..h.len()).collect();
        let flat: Vec<f64> = h.iter().map(|z| z.norm_sqr()).collect();
        idx.sort_by(|&i, &j| flat[j].total_cmp(&flat[i]));
        idx.truncate(top);
        idx
    };
    let ta = top_bins(&a.h);
    let tb = top_bins(&b.h);
    ta.iter().filter(|i| tb.contains(i)).count() as f64 / top as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_dft(n: usize, sign: f64) -> CMat {
        CMat::from_shape_fn((n, n), |(r, c)| {
            Complex64::from_polar(1.0 / (n as f64).sqrt(), sign * 2.0 * PI * (r * c) as f64 / n as f64)
        })
    }

    /// Dense-matrix route: F_d·H·F_aᴴ with explicit DFT matrices.
    fn brute_angle_delay(h: &CMat, n_delay: usize) -> CMat {
        let (n_sub, n_tx) = h.dim();
        let fd = brute_dft(n_sub, 1.0);
        let fa = brute_dft(n_tx, -1.0);
        let fa_h = fa.t().mapv(|z| z.conj());
        let full = fd.dot(h).dot(&fa_h);
        full.slice(ndarray::s![..n_delay, ..]).to_owned()
    }

    fn cfg(n_tx: usize, n_sub: usize) -> ChannelConfig {
        ChannelConfig {
            n_tx,
            n_sub,
            n_delay: n_sub,
            n_paths: 1,
            n_users: 1,
            ..Default::default()
        }
    }

    #[test]
    fn steering_vector_examples() {
        let a = steering_vector(0.0, 4);
        assert!(a.iter().all(|z| (*z - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        let a = steering_vector(PI / 2.0, 2);
        assert!((a[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((a[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
        for phi in [-1.2, -0.3, 0.0, 0.77, 1.5] {
            let n: f64 = steering_vector(phi, 8).iter().map(|z| z.norm_sqr()).sum();
            assert!((n.sqrt() - 8f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_broadside_path_is_flat() {
        let p = PathSet {
            gains: vec![Complex64::new(1.0, 0.0)],
            delays: vec![0.0],
            aods: vec![0.0],
        };
        let h = synthesize_channel(&p, &cfg(4, 8)).unwrap();
        assert_eq!(h.h.dim(), (8, 4));
        assert!(h.h.iter().all(|z| (*z - Complex64::new(2.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn synthesis_is_linear_in_gains() {
        let c = cfg(4, 8);
        let p = PathSet {
            gains: vec![Complex64::new(0.3, -0.2), Complex64::new(-1.0, 0.5)],
            delays: vec![1.5, 3.0],
            aods: vec![0.2, -0.7],
        };
        let h = synthesize_channel(&p, &c).unwrap();
        let k = Complex64::new(2.0, -1.0);
        let mut scaled = p.clone();
        scaled.gains.iter_mut().for_each(|g| *g *= k);
        let hs = synthesize_channel(&scaled, &c).unwrap();
        for (a, b) in h.h.iter().zip(hs.h.iter()) {
            assert!((a * k - b).norm() < 1e-12);
        }
        let mut zero = p.clone();
        zero.gains.iter_mut().for_each(|g| *g = Complex64::default());
        let hz = synthesize_channel(&zero, &c).unwrap();
        assert!(hz.h.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn empty_path_set_rejected() {
        let p = PathSet {
            gains: vec![],
            delays: vec![],
            aods: vec![],
        };
        assert!(synthesize_channel(&p, &cfg(4, 8)).is_err());
    }

    #[test]
    fn fft_route_matches_dense_dft() {
        let c = ChannelConfig {
            n_tx: 8,
            n_sub: 32,
            n_delay: 12,
            n_paths: 3,
            ..Default::default()
        };
        let mut r = rng::stream(3, &[]);
        let p = &generate_group_paths(&c, &mut r)[0];
        let h = synthesize_channel(p, &c).unwrap();
        let fast = to_angle_delay(&h, 12).unwrap();
        let slow = brute_angle_delay(&h.h, 12);
        for (a, b) in fast.h.iter().zip(slow.iter()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn angle_delay_edge_cases() {
        let z = SpatialFrequencyCsi {
            h: CMat::zeros((8, 4)),
        };
        assert!(to_angle_delay(&z, 8).unwrap().h.iter().all(|v| v.norm() == 0.0));
        assert!(matches!(to_angle_delay(&z, 9), Err(Error::Usage(_))));
    }

    #[test]
    fn normalization() {
        let mut h = AngleDelayCsi::zeros(2, 2);
        h.h[[0, 0]] = Complex64::new(3.0, 0.0);
        h.h[[1, 1]] = Complex64::new(0.0, 4.0);
        let n = normalize_sample(&h).unwrap();
        assert!((n.energy() - 1.0).abs() < 1e-15);
        let again = normalize_sample(&n).unwrap();
        for (a, b) in n.h.iter().zip(again.h.iter()) {
            assert!((a - b).norm() < 1e-15);
        }
        assert!(matches!(
            normalize_sample(&AngleDelayCsi::zeros(2, 2)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn group_paths_structure() {
        let mut c = ChannelConfig {
            aod_jitter_rad: 0.0,
            ..Default::default()
        };
        let mut r = rng::stream(11, &[]);
        let ps = generate_group_paths(&c, &mut r);
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].aods, ps[1].aods);
        assert_eq!(ps[0].delays, ps[1].delays);
        assert_ne!(ps[0].gains, ps[1].gains);
        for p in &ps {
            assert!(p.delays.iter().all(|&d| (0.0..c.n_delay as f64).contains(&d)));
            assert!(p.aods.iter().all(|a| a.abs() < AOD_RANGE_RAD));
        }
        c.n_users = 1;
        assert_eq!(generate_group_paths(&c, &mut r).len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = ChannelConfig::default();
        assert!(c.validate().is_ok());
        c.n_delay = c.n_sub + 1;
        assert!(c.validate().is_err());
        let c = ChannelConfig {
            n_paths: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
