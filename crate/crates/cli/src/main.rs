use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use mucsi_core::checkpoint::Checkpoint;
use mucsi_core::config::ExperimentConfig;
use mucsi_core::dataset::{self, Split};
use mucsi_core::eval::{self, EvalReport, PlotAxis, SsccCell, SweepCell, SweepGrid};
use mucsi_core::sscc;
use mucsi_core::train::{self, CsvLog, NoLog, TrainLog, TrainState};
use mucsi_core::{AngleDelayCsi, ChannelConfig, ModelParams};

#[derive(Parser)]
#[command(name = "mucsi", version, about = "Multi-user CSI feedback experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test dataset files.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Master seed (defaults to `data.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training stage and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to continue from (required for stage 2).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (stage, epoch, step, lr, loss, val_nmse_db).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate one checkpoint on the test split at every `eval.snr_db`.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a grid of checkpoints listed as `[[cell]]` tables in a TOML file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analog feedback with quantize-and-transmit at equal overhead.
    SsccCompare {
        #[arg(long)]
        config: PathBuf,
        /// Channel uses per user.
        #[arg(long)]
        overhead: usize,
        /// `lo:hi:step` in dB.
        #[arg(long, default_value = "0:20:2")]
        snr_grid: String,
        /// Analog-feedback checkpoint sending `overhead` symbols.
        #[arg(long)]
        djscc: PathBuf,
        /// Checkpoint trained with the quantized link.
        #[arg(long)]
        sscc: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a results CSV and write plot-data series.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// snr, cr or m.
        #[arg(long, default_value = "snr")]
        axis: String,
        /// Directory for the series files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateData { config, out, seed } => generate_data(&config, &out, seed),
        Command::Train {
            config,
            stage,
            resume,
            out,
            log,
        } => train_cmd(&config, stage, resume.as_deref(), &out, log.as_deref()),
        Command::Evaluate {
            config,
            checkpoint,
            out,
        } => evaluate_cmd(&config, &checkpoint, &out),
        Command::Sweep { config, grid, out } => sweep_cmd(&config, &grid, &out),
        Command::SsccCompare {
            config,
            overhead,
            snr_grid,
            djscc,
            sscc,
            out,
        } => sscc_compare(&config, overhead, &snr_grid, &djscc, &sscc, &out),
        Command::Report { results, axis, out } => report_cmd(&results, &axis, &out),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn load_split(cfg: &ExperimentConfig, channel: &ChannelConfig, split: Split) -> Result<Vec<Vec<AngleDelayCsi>>> {
    let ds = dataset::load_or_generate(cfg.data.dir.as_deref(), channel, cfg.data.counts(), cfg.data.seed, split)?;
    ensure!(
        ds.n_users() == channel.n_users,
        "{} split holds {} users per group, expected {}",
        split.name(),
        ds.n_users(),
        channel.n_users
    );
    Ok(ds.samples)
}

fn generate_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.data.seed);
    let paths = dataset::generate_dataset(&cfg.channel, cfg.data.counts(), seed, out)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn train_cmd(config: &Path, stage: u8, resume: Option<&Path>, out: &Path, log: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ensure!(
                ck.header.codec == cfg.codec,
                "checkpoint {} was trained with a different codec configuration",
                p.display()
            );
            ck.state
        }
        None if stage == 2 => bail!("stage 2 fine-tunes a stage-1 checkpoint; pass --resume"),
        None => TrainState::new(ModelParams::init(&cfg.codec, cfg.train.seed)?),
    };
    info!(
        "{} parameters, variant {}, {} users, CR {}",
        state.params.count(),
        cfg.codec.variant,
        cfg.channel.n_users,
        cfg.codec.compression_ratio()
    );
    let train_set = load_split(&cfg, &cfg.channel, Split::Train)?;
    let val_set = load_split(&cfg, &cfg.channel, Split::Val)?;
    let mut sink: Box<dyn TrainLog> = match log {
        Some(p) => Box::new(CsvLog::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(NoLog),
    };
    let run = if stage == 1 { train::train_stage1 } else { train::train_stage2 };
    let state = run(state, &cfg.codec, &cfg.train, &train_set, Some(&val_set), sink.as_mut())?;
    Checkpoint::new(&cfg.codec, &cfg.channel, &state, cfg.train.seed, true).save(out)?;
    info!("wrote {} (stage {}, step {})", out.display(), state.stage, state.step);
    Ok(())
}

fn sscc_cell(cfg: &ExperimentConfig) -> Result<SsccCell> {
    Ok(SsccCell {
        code_rate: cfg.sscc.code_rate,
        constellation_points: cfg.sscc.constellation_points,
        ber_table: cfg.sscc.table()?,
    })
}

fn finish(report: &EvalReport, out: &Path) -> Result<()> {
    report.write_csv(out)?;
    let failed = report.rows.iter().filter(|r| !r.is_ok()).count();
    for r in &report.rows {
        match r.nmse_db {
            Some(db) => println!(
                "{} {} M={} CR={} SNR={} dB: NMSE {:.3} dB",
                r.scheme, r.variant, r.users, r.cr, r.snr_db, db
            ),
            None => println!("{} {} M={} SNR={} dB: {}", r.scheme, r.variant, r.users, r.snr_db, r.status),
        }
    }
    if failed > 0 {
        warn!("{failed} of {} rows failed", report.rows.len());
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn evaluate_cmd(config: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let cell = SweepCell {
        checkpoint: checkpoint.to_path_buf(),
        variant: ck.header.codec.variant,
        users: cfg.channel.n_users,
        cr: ck.header.codec.compression_ratio(),
        snr_db: cfg.eval.snr_db.clone(),
        sscc: match ck.state.quantizer {
            Some(_) => Some(sscc_cell(&cfg)?),
            None => None,
        },
    };
    let report = eval::run_sweep(
        &[cell],
        &mut |ch| load_split(&cfg, ch, Split::Test).map_err(to_core),
        cfg.eval.seed,
        cfg.eval.batch_size,
    );
    ensure!(report.ok_rows().next().is_some(), "evaluation failed: {}", report.rows[0].status);
    finish(&report, out)
}

fn to_core(e: anyhow::Error) -> mucsi_core::Error {
    mucsi_core::Error::Usage(format!("{e:#}"))
}

fn sweep_cmd(config: &Path, grid: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let grid = SweepGrid::load(grid)?;
    ensure!(!grid.cell.is_empty(), "sweep grid has no [[cell]] entries");
    let report = eval::run_sweep(
        &grid.cell,
        &mut |ch| load_split(&cfg, ch, Split::Test).map_err(to_core),
        cfg.eval.seed,
        cfg.eval.batch_size,
    );
    finish(&report, out)
}

/// Parses `lo:hi:step` into an inclusive grid.
fn parse_snr_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad SNR grid '{s}'"))?;
    let [lo, hi, step] = parts[..] else {
        bail!("SNR grid must be lo:hi:step, got '{s}'");
    };
    ensure!(step > 0.0 && lo <= hi, "SNR grid needs step > 0 and lo <= hi");
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

fn sscc_compare(
    config: &Path,
    overhead: usize,
    snr_grid: &str,
    djscc: &Path,
    sscc_ckpt: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let snr = parse_snr_grid(snr_grid)?;
    let dj = Checkpoint::load(djscc)?;
    ensure!(
        dj.header.codec.n_symbols() == overhead,
        "{} sends {} symbols, not {overhead}",
        djscc.display(),
        dj.header.codec.n_symbols()
    );
    let sc = Checkpoint::load(sscc_ckpt)?;
    let q = sc
        .state
        .quantizer
        .with_context(|| format!("{} has no quantizer; train it with the quantized link", sscc_ckpt.display()))?;
    let used = sscc::overhead_symbols(sc.header.codec.k_feedback, q.bits, cfg.sscc.code_rate, cfg.sscc.constellation_points)?;
    ensure!(
        used == overhead,
        "{} needs {used} symbols (b={}, q={}, r={}, a={}), not {overhead}",
        sscc_ckpt.display(),
        sc.header.codec.k_feedback,
        q.bits,
        cfg.sscc.code_rate,
        cfg.sscc.constellation_points
    );
    let cell = |path: &Path, ck: &Checkpoint, sscc: Option<SsccCell>| SweepCell {
        checkpoint: path.to_path_buf(),
        variant: ck.header.codec.variant,
        users: cfg.channel.n_users,
        cr: ck.header.codec.compression_ratio(),
        snr_db: snr.clone(),
        sscc,
    };
    let cells = vec![cell(djscc, &dj, None), cell(sscc_ckpt, &sc, Some(sscc_cell(&cfg)?))];
    let report = eval::run_sweep(
        &cells,
        &mut |ch| load_split(&cfg, ch, Split::Test).map_err(to_core),
        cfg.eval.seed,
        cfg.eval.batch_size,
    );
    finish(&report, out)
}

fn report_cmd(results: &Path, axis: &str, out: &Path) -> Result<()> {
    let report = EvalReport::read_csv(results)?;
    let axis: PlotAxis = axis.parse()?;
    let series = eval::plot_series(&report, axis)?;
    for s in &series {
        let pts: Vec<String> = s.points.iter().map(|(x, y)| format!("{x}:{y:.2}")).collect();
        println!("{:<40} {}", s.name, pts.join(" "));
    }
    let files = eval::emit_plot_data(&report, axis, out)?;
    info!("wrote {} series under {}", files.len(), out.display());
    Ok(())
}
