use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cascadereg::affine::{affine_register_with, AffineConfig};
use cascadereg::checkpoint::Checkpoint;
use cascadereg::harness::{
    case_dirs, evaluate_suite, load_case, register_case, save_study, save_synthetic, volume_path, write_suite_csv, PRE,
    POST, PREPROCESSED_SUFFIX,
};
use cascadereg::nifti::{save_field, save_volume};
use cascadereg::synth::make_synthetic_case;
use cascadereg::train::{prepare_case, train, warp_study, TrainConfig};
use cascadereg::volume::Contrast;

const CHECKPOINT_FILE: &str = "checkpoint.tar";
const TRAIN_LOG: &str = "train.log.jsonl";

#[derive(Parser)]
#[command(name = "cascadereg", version, about = "Multi-contrast deformable MRI registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic case: volumes, landmark CSVs and the true field.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Z-normalize and histogram-match a case; writes `*_pp.nii.gz`.
    Preprocess {
        #[arg(long)]
        case: PathBuf,
    },
    /// Affine pre-registration of one case.
    Affine {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file whose `[affine]` section overrides the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on every case under `--data`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register one case with a trained checkpoint.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every case under `--data` and write a CSV table.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    Ok(Checkpoint::load(&file)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, size, out } => {
            let case = make_synthetic_case(seed, size)?;
            save_synthetic(&case, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Preprocess { case } => {
            let mut data = load_case(&case)?;
            if data.preprocessed {
                log::warn!("{} already has preprocessed volumes; recomputing from the originals", case.display());
                for tag in [PRE, POST] {
                    for c in Contrast::ALL {
                        std::fs::remove_file(volume_path(&case, tag, c, PREPROCESSED_SUFFIX))?;
                    }
                }
                data = load_case(&case)?;
            }
            let data = data.into_preprocessed()?;
            let strip = |mut s: cascadereg::volume::MultiContrastStudy| {
                s.landmarks = None;
                s
            };
            save_study(&strip(data.pre), &case, PRE, PREPROCESSED_SUFFIX)?;
            save_study(&strip(data.post), &case, POST, PREPROCESSED_SUFFIX)?;
            println!("wrote preprocessed volumes to {}", case.display());
        }
        Command::Affine { case, out, config } => {
            let cfg: AffineConfig = read_config(config.as_deref())?.affine;
            let data = load_case(&case)?.into_preprocessed()?;
            let c = Contrast::parse(&cfg.contrast).with_context(|| format!("unknown contrast {}", cfg.contrast))?;
            let result = affine_register_with(data.pre.get(c), data.post.get(c), &cfg)?;
            if let Some(w) = &result.warning {
                log::warn!("{w}");
            }
            serde_json::to_writer_pretty(BufWriter::new(File::create(&out)?), &result)?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let mut warped = warp_study(&data.pre, &result.transform)?;
            warped.landmarks = None;
            save_study(&warped, dir, "pre", "_affine")?;
            println!("mse {:.6} (identity {:.6}); wrote {}", result.mse, result.identity_mse, out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = read_config(config.as_deref())?;
            std::fs::create_dir_all(&out)?;
            let mut cases = Vec::new();
            for dir in case_dirs(&data)? {
                let c = load_case(&dir)?.into_preprocessed()?;
                cases.push(prepare_case(&c.pre, &c.post, &cfg)?);
            }
            let mut log = BufWriter::new(File::create(out.join(TRAIN_LOG))?);
            let (ckpt, logs) = train(&cfg, &cases, Some(&mut log))?;
            ckpt.save(out.join(CHECKPOINT_FILE))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            if let (Some(a), Some(b)) = (logs.first(), logs.last()) {
                println!("l_total {:.6} -> {:.6} over {} steps", a.report.l_total, b.report.l_total, logs.len());
            }
        }
        Command::Register { ckpt, case, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let data = load_case(&case)?.into_preprocessed()?;
            let r = register_case(&ckpt, &data.pre, &data.post)?;
            std::fs::create_dir_all(&out)?;
            let grid = *data.post.grid();
            save_field(&r.field, &grid, out.join("field.nii.gz"))?;
            save_volume(&r.warped, out.join("warped_t1ce.nii.gz"))?;
            serde_json::to_writer_pretty(BufWriter::new(File::create(out.join("score.json"))?), &r.scores())?;
            match &r.score {
                Some(s) => println!("median AE {:.3} mm, robustness {:.2}", s.median_ae, s.robustness),
                None => println!("no landmarks; wrote field and warped volume"),
            }
        }
        Command::Evaluate { ckpt, data, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let mut cases = Vec::new();
            for dir in case_dirs(&data)? {
                cases.push(load_case(&dir)?.into_preprocessed()?);
            }
            let report = evaluate_suite(&ckpt, &cases)?;
            write_suite_csv(&report, BufWriter::new(File::create(&out)?))?;
            println!(
                "{} cases: pooled median {:.3} mm, mean {:.3} mm, robustness {:.2}",
                report.summary.cases, report.summary.pooled_median, report.pooled_mean, report.summary.mean_robustness
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

