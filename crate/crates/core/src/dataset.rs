//! Dataset files.
//!
//! Layout of one split file (`train.bin`, `val.bin`, `test.bin`):
//!
//! ```text
//! MUCSI-DATASET <header-bytes>\n
//! <header: pretty-printed JSON, exactly header-bytes long>
//! <records>
//! ```
//!
//! A record is one user group: `M` matrices of `N_a×N_t` complex values,
//! row-major, each value stored as two little-endian `f32` (re, im).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{generate_sample, AngleDelayCsi, ChannelConfig, CMat};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const DATASET_MAGIC: &str = "MUCSI-DATASET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7452_4149_4e00_0001,
            Split::Val => 0x7641_4c00_0000_0002,
            Split::Test => 0x7445_5354_0000_0003,
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.bin", self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub split: Split,
    pub n_tx: usize,
    pub n_sub: usize,
    pub n_delay: usize,
    pub n_users: usize,
    pub counts: SplitCounts,
    pub records: usize,
    pub master_seed: u64,
    pub channel: ChannelConfig,
}

/// In-memory split: `samples[group][user]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Vec<AngleDelayCsi>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.header.n_users
    }
}

/// Seed of group `index` in `split`; splits occupy disjoint tag spaces.
pub fn sample_seed(master_seed: u64, split: Split, index: u64) -> u64 {
    derive_seed(master_seed, &[split.tag(), index])
}

/// Generates the groups of one split in memory.
pub fn generate_split(
    cfg: &ChannelConfig,
    split: Split,
    count: usize,
    master_seed: u64,
) -> Result<Vec<Vec<AngleDelayCsi>>> {
    (0..count as u64)
        .map(|i| generate_sample(cfg, sample_seed(master_seed, split, i), i).map(|s| s.users))
        .collect()
}

fn encode_header(header: &DatasetHeader) -> Vec<u8> {
    let body = serde_json::to_string_pretty(header).expect("header serializes");
    let mut out = format!("{DATASET_MAGIC} {}\n", body.len()).into_bytes();
    out.extend_from_slice(body.as_bytes());
    out
}

fn write_record(out: &mut Vec<u8>, users: &[AngleDelayCsi]) {
    for u in users {
        for z in u.h.iter() {
            out.extend_from_slice(&(z.re as f32).to_le_bytes());
            out.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[Vec<AngleDelayCsi>]) -> Result<()> {
    let mut buf = encode_header(header);
    for s in samples {
        if s.len() != header.n_users {
            return Err(Error::shape(header.n_users, s.len()));
        }
        write_record(&mut buf, s);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let first = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::format(path, e))?;
    let len: usize = first
        .strip_prefix(DATASET_MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "bad magic line"))?;
    let body_end = nl + 1 + len;
    if bytes.len() < body_end {
        return Err(Error::format(path, "truncated header"));
    }
    let header: DatasetHeader =
        serde_json::from_slice(&bytes[nl + 1..body_end]).map_err(|e| Error::format(path, e))?;
    if header.version != DATASET_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", header.version)));
    }
    let per_matrix = header.n_delay * header.n_tx;
    let record_bytes = header.n_users * per_matrix * 8;
    let payload = &bytes[body_end..];
    if payload.len() != header.records * record_bytes {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, expected {} records of {record_bytes}",
                payload.len(),
                header.records
            ),
        ));
    }
    let f32_at = |off: usize| f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64;
    let samples = (0..header.records)
        .map(|r| {
            (0..header.n_users)
                .map(|u| {
                    let base = r * record_bytes + u * per_matrix * 8;
                    let data = (0..per_matrix)
                        .map(|i| Complex64::new(f32_at(base + 8 * i), f32_at(base + 8 * i + 4)))
                        .collect();
                    AngleDelayCsi {
                        h: CMat::from_shape_vec((header.n_delay, header.n_tx), data).unwrap(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(Dataset { header, samples })
}

/// Writes `train.bin`, `val.bin` and `test.bin` under `out_dir`.
pub fn generate_dataset(
    cfg: &ChannelConfig,
    counts: SplitCounts,
    master_seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::InvalidConfig("split counts must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for split in Split::ALL {
        let n = counts.get(split);
        let samples = generate_split(cfg, split, n, master_seed)?;
        let header = DatasetHeader {
            version: DATASET_VERSION,
            split,
            n_tx: cfg.n_tx,
            n_sub: cfg.n_sub,
            n_delay: cfg.n_delay,
            n_users: cfg.n_users,
            counts,
            records: n,
            master_seed,
            channel: cfg.clone(),
        };
        let path = out_dir.join(split.file_name());
        write_dataset(&path, &header, &samples)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads one split, either from `dir` or by regenerating it in memory.
pub fn load_or_generate(
    dir: Option<&Path>,
    cfg: &ChannelConfig,
    counts: SplitCounts,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if let Some(dir) = dir {
        let ds = read_dataset(&dir.join(split.file_name()))?;
        if ds.header.n_tx != cfg.n_tx || ds.header.n_delay != cfg.n_delay {
            return Err(Error::shape(
                format!("{}x{} dataset", cfg.n_delay, cfg.n_tx),
                format!("{}x{}", ds.header.n_delay, ds.header.n_tx),
            ));
        }
        return Ok(ds);
    }
    let n = counts.get(split);
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            split,
            n_tx: cfg.n_tx,
            n_sub: cfg.n_sub,
            n_delay: cfg.n_delay,
            n_users: cfg.n_users,
            counts,
            records: n,
            master_seed: seed,
            channel: cfg.clone(),
        },
        samples: generate_split(cfg, split, n, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ChannelConfig {
        ChannelConfig {
            n_tx: 4,
            n_sub: 16,
            n_delay: 4,
            n_paths: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_preserves_records_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let counts = SplitCounts {
            train: 3,
            val: 1,
            test: 1,
        };
        let cfg = small_cfg();
        generate_dataset(&cfg, counts, 5, dir.path()).unwrap();
        let ds = read_dataset(&dir.path().join("train.bin")).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.header.split, Split::Train);
        let fresh = generate_split(&cfg, Split::Train, 3, 5).unwrap();
        for (a, b) in ds.samples.iter().flatten().zip(fresh.iter().flatten()) {
            for (x, y) in a.h.iter().zip(b.h.iter()) {
                assert!((x - y).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn each_record_holds_m_matrices() {
        let dir = tempfile::tempdir().unwrap();
        let counts = SplitCounts {
            train: 2,
            val: 1,
            test: 1,
        };
        generate_dataset(&small_cfg(), counts, 1, dir.path()).unwrap();
        let ds = read_dataset(&dir.path().join("val.bin")).unwrap();
        assert_eq!(ds.samples[0].len(), 2);
        assert_eq!(ds.samples[0][0].dim(), (4, 4));
    }

    #[test]
    fn zero_counts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let counts = SplitCounts {
            train: 0,
            val: 1,
            test: 1,
        };
        assert!(generate_dataset(&small_cfg(), counts, 1, dir.path()).is_err());
    }

    #[test]
    fn corrupt_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, b"NOT-A-DATASET 3\nabc").unwrap();
        let err = read_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("bad.bin"));
        let missing = read_dataset(&dir.path().join("nope.bin")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }
}
