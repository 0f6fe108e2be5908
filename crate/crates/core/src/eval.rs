//! NMSE evaluation, sweeps and result/plot-data files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::channel::{AngleDelayCsi, ChannelConfig};
use crate::checkpoint::Checkpoint;
use crate::codec::{self, AwgnUplink, CodecConfig, ModelParams, Noiseless, QuantizedUplink, Uplink, Variant};
use crate::error::{Error, Result};
use crate::sscc::{self, BerTable, QuantizerConfig};

/// `(1/M)·Σ_m ‖H_m − Ĥ_m‖² / ‖H_m‖²`.
pub fn nmse(truth: &[AngleDelayCsi], est: &[AngleDelayCsi]) -> Result<f64> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(Error::shape(truth.len(), est.len()));
    }
    let mut total = 0.0;
    for (t, e) in truth.iter().zip(est) {
        if t.dim() != e.dim() {
            return Err(Error::shape(format!("{:?}", t.dim()), format!("{:?}", e.dim())));
        }
        let energy = t.energy();
        if energy == 0.0 {
            return Err(Error::Degenerate("NMSE of an all-zero channel".into()));
        }
        let err: f64 = t.h.iter().zip(e.h.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
        total += err / energy;
    }
    Ok(total / truth.len() as f64)
}

/// `10·log10(x)`; `-inf` for zero.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Uplink used during evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalLink {
    Noiseless,
    Awgn { snr_db: f64 },
    /// Quantize, pass through a bit channel with error rate `ber`, dequantize.
    Quantized { quantizer: QuantizerConfig, ber: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// Mean over groups of the per-group NMSE.
    pub nmse_linear: f64,
    pub n_samples: usize,
}

impl EvalSummary {
    pub fn nmse_db(&self) -> f64 {
        to_db(self.nmse_linear)
    }
}

/// Evaluates `data` in batches. Noise for group `i` of user `m` comes from
/// the stream `(seed, i, m)`, so two models evaluated with the same seed see
/// the same noise.
pub fn evaluate(
    params: &ModelParams,
    cfg: &CodecConfig,
    data: &[Vec<AngleDelayCsi>],
    link: &EvalLink,
    seed: u64,
    batch: usize,
) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let users = data[0].len();
    cfg.check_users(users)?;
    let mut total = 0.0;
    for (c, chunk) in data.chunks(batch.max(1)).enumerate() {
        let keys: Vec<u64> = (0..chunk.len()).map(|i| (c * batch.max(1) + i) as u64).collect();
        let recon = reconstruct(params, cfg, chunk, link, seed, keys)?;
        for (truth, est) in chunk.iter().zip(&recon) {
            total += nmse(truth, est)?;
        }
    }
    Ok(EvalSummary {
        nmse_linear: total / data.len() as f64,
        n_samples: data.len(),
    })
}

/// Reconstructions `[group][user]` of a batch of groups.
pub fn reconstruct(
    params: &ModelParams,
    cfg: &CodecConfig,
    groups: &[Vec<AngleDelayCsi>],
    link: &EvalLink,
    seed: u64,
    row_keys: Vec<u64>,
) -> Result<Vec<Vec<AngleDelayCsi>>> {
    let users = groups[0].len();
    if groups.iter().any(|g| g.len() != users) {
        return Err(Error::Usage("groups differ in user count".into()));
    }
    let n = groups.len();
    let mut uplink: Box<dyn Uplink> = match *link {
        EvalLink::Noiseless => Box::new(Noiseless),
        EvalLink::Awgn { snr_db } => Box::new(AwgnUplink::uniform(seed, row_keys, users, snr_db)),
        EvalLink::Quantized { quantizer, ber } => {
            quantizer.validate()?;
            Box::new(QuantizedUplink {
                quantizer,
                seed,
                row_keys,
                ber: vec![ber; n],
                code_rate: 1.0,
                constellation_points: 2,
            })
        }
    };
    let mut g = Graph::new();
    let mv = params.bind(&mut g, false);
    let tokens: Vec<Var> = (0..users)
        .map(|u| g.constant(codec::stack_tokens(groups.iter().map(|grp| &grp[u]))))
        .collect();
    let fwd = codec::forward(&mut g, &mv, cfg, &tokens, uplink.as_mut())?;
    let per_user: Vec<Vec<AngleDelayCsi>> = fwd
        .recon
        .iter()
        .map(|&r| codec::unstack_tokens(g.value(r), cfg.n_tx, cfg.n_delay))
        .collect::<Result<_>>()?;
    Ok((0..n).map(|i| per_user.iter().map(|u| u[i].clone()).collect()).collect())
}

/// All power-normalized transmit values over `data` (every user).
pub fn transmitted_values(
    params: &ModelParams,
    cfg: &CodecConfig,
    data: &[Vec<AngleDelayCsi>],
    batch: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in data.chunks(batch.max(1)) {
        let users = chunk[0].len();
        let mut g = Graph::new();
        let mv = params.bind(&mut g, false);
        for u in 0..users {
            let t = g.constant(codec::stack_tokens(chunk.iter().map(|grp| &grp[u])));
            let v = codec::encode_graph(&mut g, &mv, cfg, t);
            let s = g.power_norm(v);
            out.extend(g.value(s).iter().cloned());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Djscc,
    Sscc,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Djscc => "djscc",
            Scheme::Sscc => "sscc",
        })
    }
}

/// One results row. Failed cells keep their grid coordinates, leave the NMSE
/// columns empty and carry the reason in `status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scheme: Scheme,
    pub variant: Variant,
    pub users: usize,
    pub cr: f64,
    pub snr_db: f64,
    /// Complex channel uses per user.
    pub overhead_symbols: usize,
    pub nmse_db: Option<f64>,
    pub nmse_linear: Option<f64>,
    /// Set when the reconstruction is exact (`nmse_db` is then `-inf`).
    pub nmse_neg_inf: bool,
    pub n_samples: usize,
    pub seed: u64,
    pub checkpoint: String,
    pub status: String,
}

impl EvalRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn check(&self) -> Result<()> {
        if !self.is_ok() {
            return Ok(());
        }
        let (Some(db), Some(lin)) = (self.nmse_db, self.nmse_linear) else {
            return Err(Error::InvalidConfig("ok row without NMSE".into()));
        };
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("ok row with zero samples".into()));
        }
        let consistent = if self.nmse_neg_inf {
            lin == 0.0
        } else {
            (db - to_db(lin)).abs() <= 1e-9 * db.abs().max(1.0)
        };
        if !consistent {
            return Err(Error::InvalidConfig(format!("nmse_db {db} does not match nmse_linear {lin}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn ok_rows(&self) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(|r| r.is_ok())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        for r in &self.rows {
            let mut row = r.clone();
            // serialize the sentinel as an empty cell; the flag column carries it
            if row.nmse_neg_inf {
                row.nmse_db = None;
            }
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rd.deserialize() {
            let mut row: EvalRow = rec?;
            if row.nmse_neg_inf {
                row.nmse_db = Some(f64::NEG_INFINITY);
            }
            row.check()?;
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

const CSV_HEADER: [&str; 13] = [
    "scheme",
    "variant",
    "users",
    "cr",
    "snr_db",
    "overhead_symbols",
    "nmse_db",
    "nmse_linear",
    "nmse_neg_inf",
    "n_samples",
    "seed",
    "checkpoint",
    "status",
];

/// Separate-coding link of a sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsccCell {
    pub code_rate: f64,
    pub constellation_points: u32,
    pub ber_table: BerTable,
}

/// One grid cell: a checkpoint expected to hold `variant` at `users`/`cr`,
/// evaluated at each SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub checkpoint: PathBuf,
    pub variant: Variant,
    pub users: usize,
    pub cr: f64,
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub sscc: Option<SsccCell>,
}

/// A sweep grid file: a list of `[[cell]]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub cell: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Evaluates every cell on the test groups supplied by `data` (keyed by the
/// checkpoint's channel configuration). Rows come out in cell order, then SNR
/// order. A cell that cannot be evaluated yields failed rows and the sweep
/// moves on.
pub fn run_sweep(
    cells: &[SweepCell],
    data: &mut dyn FnMut(&ChannelConfig) -> Result<Vec<Vec<AngleDelayCsi>>>,
    seed: u64,
    batch: usize,
) -> EvalReport {
    let mut rows = Vec::new();
    for cell in cells {
        let scheme = if cell.sscc.is_some() { Scheme::Sscc } else { Scheme::Djscc };
        let base = |snr: f64| EvalRow {
            scheme,
            variant: cell.variant,
            users: cell.users,
            cr: cell.cr,
            snr_db: snr,
            overhead_symbols: 0,
            nmse_db: None,
            nmse_linear: None,
            nmse_neg_inf: false,
            n_samples: 0,
            seed,
            checkpoint: cell.checkpoint.display().to_string(),
            status: String::new(),
        };
        match eval_cell(cell, data, seed, batch) {
            Ok(results) => {
                for (snr, res) in cell.snr_db.iter().zip(results) {
                    let mut row = base(*snr);
                    match res {
                        Ok((summary, overhead)) => {
                            row.overhead_symbols = overhead;
                            row.nmse_linear = Some(summary.nmse_linear);
                            row.nmse_db = Some(summary.nmse_db());
                            row.nmse_neg_inf = summary.nmse_linear == 0.0;
                            row.n_samples = summary.n_samples;
                            row.status = "ok".into();
                        }
                        Err(e) => row.status = format!("failed: {e}"),
                    }
                    rows.push(row);
                }
            }
            Err(e) => {
                log::warn!("sweep cell {} failed: {e}", cell.checkpoint.display());
                rows.extend(cell.snr_db.iter().map(|&snr| EvalRow {
                    status: format!("failed: {e}"),
                    ..base(snr)
                }));
            }
        }
    }
    EvalReport { rows }
}

type CellResult = Result<(EvalSummary, usize)>;

fn eval_cell(
    cell: &SweepCell,
    data: &mut dyn FnMut(&ChannelConfig) -> Result<Vec<Vec<AngleDelayCsi>>>,
    seed: u64,
    batch: usize,
) -> Result<Vec<CellResult>> {
    let ck = Checkpoint::load(&cell.checkpoint)?;
    let codec = &ck.header.codec;
    if codec.variant != cell.variant || (codec.compression_ratio() - cell.cr).abs() > 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "checkpoint holds {} at CR {}, cell expects {} at CR {}",
            codec.variant,
            codec.compression_ratio(),
            cell.variant,
            cell.cr
        )));
    }
    let channel = ChannelConfig {
        n_users: cell.users,
        ..ck.header.channel.clone()
    };
    let test = data(&channel)?;
    Ok(cell
        .snr_db
        .iter()
        .map(|&snr| -> CellResult {
            let (link, overhead) = match &cell.sscc {
                None => (EvalLink::Awgn { snr_db: snr }, codec.n_symbols()),
                Some(s) => {
                    let q = ck.state.quantizer.ok_or_else(|| {
                        Error::InvalidConfig("checkpoint has no calibrated quantizer".into())
                    })?;
                    let overhead =
                        sscc::overhead_symbols(codec.k_feedback, q.bits, s.code_rate, s.constellation_points)?;
                    (
                        EvalLink::Quantized {
                            quantizer: q,
                            ber: s.ber_table.ber_at(snr),
                        },
                        overhead,
                    )
                }
            };
            Ok((evaluate(&ck.state.params, codec, &test, &link, seed, batch)?, overhead))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotAxis {
    Snr,
    Cr,
    M,
}

impl std::str::FromStr for PlotAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(PlotAxis::Snr),
            "cr" => Ok(PlotAxis::Cr),
            "m" | "M" | "users" => Ok(PlotAxis::M),
            other => Err(Error::Usage(format!("unknown plot axis '{other}' (snr, cr, m)"))),
        }
    }
}

/// One plot series: rows sharing scheme, variant and the two non-axis
/// coordinates, sorted by the axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub scheme: Scheme,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    /// `scheme,x,nmse_db` with a header row.
    pub fn to_csv(&self, axis: PlotAxis) -> String {
        let x = match axis {
            PlotAxis::Snr => "snr_db",
            PlotAxis::Cr => "cr",
            PlotAxis::M => "users",
        };
        let mut s = format!("scheme,{x},nmse_db\n");
        for (a, b) in &self.points {
            s.push_str(&format!("{},{a},{b}\n", self.scheme));
        }
        s
    }
}

pub fn plot_series(report: &EvalReport, axis: PlotAxis) -> Result<Vec<Series>> {
    if report.ok_rows().next().is_none() {
        return Err(Error::Usage("report has no successful rows to plot".into()));
    }
    let mut groups: BTreeMap<String, (Scheme, Vec<(f64, f64)>)> = BTreeMap::new();
    for r in report.ok_rows() {
        let (x, key) = match axis {
            PlotAxis::Snr => (r.snr_db, format!("m{}_cr{}", r.users, r.cr)),
            PlotAxis::Cr => (r.cr, format!("m{}_snr{}", r.users, r.snr_db)),
            PlotAxis::M => (r.users as f64, format!("cr{}_snr{}", r.cr, r.snr_db)),
        };
        let name = format!("{}_{}_{key}", r.scheme, r.variant);
        groups
            .entry(name)
            .or_insert_with(|| (r.scheme, Vec::new()))
            .1
            .push((x, r.nmse_db.unwrap_or(f64::NEG_INFINITY)));
    }
    Ok(groups
        .into_iter()
        .map(|(name, (scheme, mut points))| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, scheme, points }
        })
        .collect())
}

/// Writes one `<series>.csv` per series under `dir`.
pub fn emit_plot_data(report: &EvalReport, axis: PlotAxis, dir: &Path) -> Result<Vec<PathBuf>> {
    let series = plot_series(report, axis)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    series
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.csv", s.name.replace('/', "_")));
            fs::write(&path, s.to_csv(axis)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn single(v: f64) -> AngleDelayCsi {
        let mut h = AngleDelayCsi::zeros(2, 2);
        h.h[[1, 0]] = Complex64::new(v, 0.0);
        h
    }

    #[test]
    fn nmse_examples() {
        let t = vec![single(1.0)];
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert_eq!(to_db(0.0), f64::NEG_INFINITY);
        assert_eq!(nmse(&t, &[AngleDelayCsi::zeros(2, 2)]).unwrap(), 1.0);
        let t2 = vec![single(1.0), single(1.0)];
        let e2 = vec![single(1.0 - 0.1), single(1.0 - 0.03f64.sqrt())];
        assert!((nmse(&t2, &e2).unwrap() - 0.02).abs() < 1e-12);
        assert!(nmse(&[AngleDelayCsi::zeros(2, 2)], &t).is_err());
    }

    fn row(snr: f64, db: f64) -> EvalRow {
        EvalRow {
            scheme: Scheme::Djscc,
            variant: Variant::Rca,
            users: 2,
            cr: 0.0625,
            snr_db: snr,
            overhead_symbols: 16,
            nmse_db: Some(db),
            nmse_linear: Some(10f64.powf(db / 10.0)),
            nmse_neg_inf: false,
            n_samples: 10,
            seed: 3,
            checkpoint: "a.ckpt".into(),
            status: "ok".into(),
        }
    }

    #[test]
    fn csv_round_trip_with_sentinel() {
        let mut exact = row(20.0, 0.0);
        exact.nmse_db = Some(f64::NEG_INFINITY);
        exact.nmse_linear = Some(0.0);
        exact.nmse_neg_inf = true;
        let mut failed = row(0.0, 0.0);
        failed.nmse_db = None;
        failed.nmse_linear = None;
        failed.n_samples = 0;
        failed.status = "failed: missing".into();
        let rep = EvalReport {
            rows: vec![row(10.0, -12.5), exact, failed],
        };
        let text = rep.to_csv().unwrap();
        assert!(text.starts_with("scheme,variant,users,cr,snr_db"));
        assert!(!text.contains("-inf"));
        assert_eq!(EvalReport::from_csv(&text).unwrap(), rep);
    }

    #[test]
    fn plot_series_sorted() {
        let rep = EvalReport {
            rows: vec![row(20.0, -15.0), row(0.0, -5.0), row(10.0, -10.0)],
        };
        let s = plot_series(&rep, PlotAxis::Snr).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points, vec![(0.0, -5.0), (10.0, -10.0), (20.0, -15.0)]);
        assert!(s[0].to_csv(PlotAxis::Snr).starts_with("scheme,snr_db,nmse_db\n"));
        let one = EvalReport { rows: vec![row(0.0, -1.0)] };
        assert_eq!(plot_series(&one, PlotAxis::Cr).unwrap()[0].points.len(), 1);
        assert!(plot_series(&EvalReport::default(), PlotAxis::M).is_err());
    }

    #[test]
    fn missing_checkpoint_is_cell_failure() {
        let cells = vec![SweepCell {
            checkpoint: PathBuf::from("/nonexistent/x.ckpt"),
            variant: Variant::Rca,
            users: 2,
            cr: 0.0625,
            snr_db: vec![0.0, 10.0],
            sscc: None,
        }];
        let rep = run_sweep(&cells, &mut |_| Ok(Vec::new()), 1, 8);
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.rows.iter().all(|r| r.status.starts_with("failed")));
    }
}
