use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use truvil_core::data::compress::{check_crf, compress_augment_with, Encoder};
use truvil_core::data::{scan_dataset, write_synthetic_dataset, DatasetLayout, Split, SynthConfig};
use truvil_core::train::{evaluate, infer, train, Checkpoint, InferOptions, ModelPredictor, TrainConfig, TrainOptions};
use truvil_core::{Device, Error, Result};

const DETERMINISTIC_ENV: &str = "TRUVIL_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "truvil", version, about = "Video inpainting localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model.
    Train {
        /// TOML training configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Expected training configuration; its model must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write probability maps and masks for every frame of one video.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write frames with the predicted region tinted.
        #[arg(long)]
        overlay: bool,
    },
    /// H.264 round trip of every video in a dataset.
    Compress {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 23)]
        crf: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        videos: usize,
        #[arg(long, default_value_t = 9)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if deterministic() {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            data,
            out,
            resume,
            stop_after,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ck = train(&cfg, &data, &out, &TrainOptions { resume, stop_after, encoder: None })?;
            println!(
                "trained {} epochs ({} steps), fingerprint {}, checkpoints in {}",
                ck.meta.epoch,
                ck.meta.step,
                ck.meta.fingerprint,
                out.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            threshold,
            config,
            json,
        } => {
            let expected = config.map(|p| load_config(Some(&p))).transpose()?;
            let ck = Checkpoint::load(&ckpt, &Device::Cpu)?;
            let (model, _store) = ck.build_model(expected.as_ref().map(|c| c.model_config()).as_ref(), &Device::Cpu)?;
            let records = scan_dataset(&data, &DatasetLayout::with_split(Split::Test))?;
            if records.is_empty() {
                return Err(Error::Data {
                    path: data,
                    message: "no videos found".into(),
                });
            }
            let predictor = ModelPredictor {
                model: &model,
                resolution: ck.meta.config.resolution(),
                batch_size: ck.meta.config.batch_size,
                device: Device::Cpu,
            };
            let report = evaluate(&predictor, &records, threshold, deterministic())?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Infer {
            ckpt,
            video,
            out,
            threshold,
            overlay,
        } => {
            let ck = Checkpoint::load(&ckpt, &Device::Cpu)?;
            let opts = InferOptions {
                threshold,
                overlay,
                batch_size: ck.meta.config.batch_size,
            };
            let frames = infer(&ck, &video, &out, &opts)?;
            println!("wrote {} probability maps and masks to {}", frames.len(), out.display());
        }
        Command::Compress { data, crf, out } => {
            check_crf(crf)?;
            let records = scan_dataset(&data, &DatasetLayout::default())?;
            let encoder = Encoder::locate()?;
            for r in &records {
                let c = compress_augment_with(&encoder, r, crf, &out)?;
                println!("{}\t{} frames\tcrf {crf}", c.video_id, c.len());
            }
        }
        Command::Synth {
            out,
            videos,
            frames,
            width,
            height,
            seed,
        } => {
            let cfg = SynthConfig {
                videos,
                frames,
                width,
                height,
                seed,
                max_side: SynthConfig::default().max_side.min(width.min(height)),
                min_side: SynthConfig::default().min_side.min(width.min(height)),
                ..Default::default()
            };
            let recs = write_synthetic_dataset(&out, &cfg, Split::Train)?;
            println!("wrote {} videos to {}", recs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if deterministic() {
        // read by the thread pools on first use
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
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
