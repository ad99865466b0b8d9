use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use seedet::data::{read_annotations, read_volume, PhantomConfig};
use seedet::eval::{
    bootstrap_band, evaluate, froc, froc_svg, read_candidates, write_candidates, write_froc_csv, PlotSeries,
};
use seedet::nn::Ablation;
use seedet::train::{
    detect, make_phantoms, read_checkpoint, write_checkpoint, write_loss_log, Dataset, LogRow, RunConfig, Trainer,
};
use seedet::{Error, Result};

const BAND_LEVEL: f64 = 0.95;
const PROGRESS_EVERY: usize = 10;

#[derive(Parser)]
#[command(name = "seedet", version, about = "3D lung nodule detector on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset (volumes, annotations CSV, manifest).
    MakePhantoms {
        /// Phantom generator settings as JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector; writes the checkpoint and `<out>.loss.csv`.
    Train {
        /// Run settings as JSON, overlaid on the desk-scale (or paper-scale) defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Start from the full-size reference settings instead of the desk-scale ones.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Run a checkpoint over one volume and write candidates.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidates against annotations.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Bootstrap resamples for a 95% band (0 = none).
        #[arg(long, default_value_t = 0)]
        bootstrap: usize,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    #[value(name = "no_se")]
    NoSe,
    #[value(name = "no_focal")]
    NoFocal,
    #[value(name = "baseline")]
    Baseline,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::NoSe => Ablation::NoSe,
            AblationArg::NoFocal => Ablation::NoFocal,
            AblationArg::Baseline => Ablation::BaselineRpn,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakePhantoms { config, out } => {
            let config: PhantomConfig = match config {
                Some(p) => serde_json::from_str(&read_text(&p)?)?,
                None => PhantomConfig::default(),
            };
            let manifest = make_phantoms(&config, &out)?;
            println!("wrote {} volumes to {}", manifest.volumes.len(), out.display());
            Ok(())
        }
        Command::Train { config, data, out, ablation, paper_scale } => {
            let base = if paper_scale { RunConfig::default() } else { RunConfig::desk_scale() };
            let mut cfg = match config {
                Some(p) => overlay(base, &read_text(&p)?)?,
                None => base,
            };
            if let Some(a) = ablation {
                cfg = cfg.with_ablation(a.into());
            }
            train(cfg, &data, &out)
        }
        Command::Detect { ckpt, volume, out } => {
            let ckpt = read_checkpoint(&ckpt)?;
            let network = ckpt.network()?;
            let volume = read_volume(&volume)?;
            let candidates = detect(&network, &ckpt.config, &volume)?;
            write_candidates(&out, &candidates)?;
            println!("{} candidates for {}", candidates.len(), volume.scan_id);
            Ok(())
        }
        Command::Eval { candidates, annotations, out, svg, bootstrap } => {
            let cands = read_candidates(&candidates)?;
            let anns = read_annotations(&annotations)?;
            let (scans, unknown) = evaluate(&cands, &anns);
            for id in &unknown {
                eprintln!("warning: scan {id} has no annotations; counted as nodule-free");
            }
            let curve = froc(&scans)?;
            let band = if bootstrap > 0 { Some(bootstrap_band(&scans, bootstrap, BAND_LEVEL, 0)?) } else { None };
            write_froc_csv(&out, &curve, band.as_deref())?;
            if let Some(path) = svg {
                let text = froc_svg(&[PlotSeries { label: "detector", curve: &curve, band: band.as_deref() }]);
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            println!("mean sensitivity {:.4}", curve.mean);
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let checks = seedet::gradcheck::suite(seed)?;
            let mut failed = 0;
            for c in &checks {
                println!("{c}");
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(Error::GradientCheck { failed });
            }
            Ok(())
        }
    }
}

fn train(cfg: RunConfig, data: &Path, out: &Path) -> Result<()> {
    let dataset = Dataset::load(data)?;
    let mut trainer = Trainer::new(cfg)?;
    let total = trainer.total_steps(dataset.len());
    let log_path = out.with_extension("loss.csv");
    let mut rows: Vec<LogRow> = Vec::with_capacity(total);
    let every = trainer.config.checkpoint_every;
    let result = trainer.train(&dataset, |row, t| {
        rows.push(*row);
        if row.step % PROGRESS_EVERY == 0 || row.step + 1 == total {
            eprintln!("step {}/{total} loss {:.5} (cls {:.5} reg {:.5})", row.step + 1, row.total, row.l_cls, row.l_reg);
        }
        if every > 0 && t.step() % every == 0 {
            write_checkpoint(out, &t.checkpoint())?;
            write_loss_log(&log_path, &rows)?;
        }
        Ok(())
    });
    write_loss_log(&log_path, &rows)?;
    result?;
    write_checkpoint(out, &trainer.checkpoint())?;
    println!("checkpoint {} after {} steps", out.display(), trainer.step());
    Ok(())
}

/// Deserializes `text` on top of `base`: keys present in the JSON replace
/// the base values, nested objects merge recursively.
fn overlay(base: RunConfig, text: &str) -> Result<RunConfig> {
    let patch: serde_json::Value = serde_json::from_str(text)?;
    let mut value = serde_json::to_value(&base)?;
    merge(&mut value, patch);
    Ok(serde_json::from_value(value)?)
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
