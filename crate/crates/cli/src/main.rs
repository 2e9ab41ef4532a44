//! `opdd`: synthetic data generation, training, evaluation and BEV plots.

mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};
use opdd_core::{write_point_records, HitDistance, ImitationConfig};
use opdd_data::{generate_synthetic, load_dataset, load_sequence, Split};
use opdd_model::{evaluate, train, visualize, Checkpoint, EvalConfig, PlannerPredictor};

#[derive(Debug, Parser)]
#[command(name = "opdd", version, about = "End-to-end trajectory planner toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            Self::Train => Some(Split::Train),
            Self::Val => Some(Split::Val),
            Self::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HitArg {
    Full3d,
    Bev,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic sequences described by a TOML spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint and write the JSON metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Also write per-point errors as CSV.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full3d")]
        hit_distance: HitArg,
    },
    /// Write one bird's-eye-view plot per frame of a sequence.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { spec, out } => gen_data(spec, out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => run_train(config, data, out, resume),
        Command::Eval {
            ckpt,
            data,
            report,
            split,
            points,
            hit_distance,
        } => run_eval(ckpt, data, report, split, points, hit_distance),
        Command::Viz { ckpt, seq, out } => {
            let planner = Checkpoint::load(&ckpt)?.planner(DType::F32, &Device::Cpu)?;
            let written = visualize(&planner, load_sequence(&seq)?, &out)?;
            println!("wrote {} plots to {}", written.len(), out.display());
            Ok(())
        }
    }
}

fn gen_data(spec: PathBuf, out: PathBuf) -> Result<()> {
    let specs = config::load_gen_spec(&spec)?;
    for (name, s) in &specs {
        let dir = out.join(name);
        generate_synthetic(s, &dir).with_context(|| format!("generating {name}"))?;
        log::info!("{name}: {} frames, split {}", s.frame_count(), split_name(s.split));
    }
    println!("wrote {} sequences to {}", specs.len(), out.display());
    Ok(())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
    }
}

fn run_train(config: PathBuf, data: PathBuf, out: PathBuf, resume: Option<PathBuf>) -> Result<()> {
    let mut cfg = config::load_train_config(&config)?;
    cfg.apply_seed_env()?;
    let records = load_dataset(&data, Some(Split::Train))?;
    if records.is_empty() {
        bail!("no training sequences under {}", data.display());
    }
    log::info!("training on {} sequences with seed {}", records.len(), cfg.seed);
    let summary = train(&cfg, records, &out, resume.as_deref())?;
    let last = summary.updates.last();
    println!(
        "finished at step {} (epoch {}); final loss {}; checkpoint {}",
        summary.progress.step,
        summary.progress.epoch,
        last.map_or("n/a".to_string(), |u| format!("{:.4}", u.total)),
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn run_eval(
    ckpt: PathBuf,
    data: PathBuf,
    report: PathBuf,
    split: SplitArg,
    points: Option<PathBuf>,
    hit: HitArg,
) -> Result<()> {
    let planner = Checkpoint::load(&ckpt)?.planner(DType::F32, &Device::Cpu)?;
    let records = load_dataset(&data, split.split())?;
    if records.is_empty() {
        bail!("no sequences in split {split:?} under {}", data.display());
    }
    let cfg = EvalConfig {
        imitation: ImitationConfig {
            hit_distance: match hit {
                HitArg::Full3d => HitDistance::Full3d,
                HitArg::Bev => HitDistance::Bev,
            },
            ..ImitationConfig::default()
        },
        ..EvalConfig::default()
    };
    let eval = evaluate(&mut PlannerPredictor::new(&planner)?, records, &cfg)?;
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(&eval.report)?;
    std::fs::write(&report, text).with_context(|| format!("writing {}", report.display()))?;
    if let Some(path) = points {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_point_records(BufWriter::new(file), &eval.points)?;
    }
    for row in &eval.report.imitation.rows {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!(
            "{:>6}  n={:<6} err={:<7} ap@0.5={:<6} ap@1={:<6} ap@2={}",
            row.range,
            row.count,
            fmt(row.distance_error),
            fmt(row.ap_at(0.5)),
            fmt(row.ap_at(1.0)),
            fmt(row.ap_at(2.0))
        );
    }
    println!(
        "{} samples from {} sequences, {:.1} frames/s; report {}",
        eval.report.samples,
        eval.report.sequences,
        eval.frames_per_second,
        report.display()
    );
    Ok(())
}
