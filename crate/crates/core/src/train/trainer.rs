//! Two-phase training loop.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::compress::{compress_augment_with, CompressionMarker, Encoder};
use crate::data::dataset::{scan_dataset, scan_video, DatasetLayout, VideoRecord, COMPRESSED_MARKER};
use crate::data::{batch_tensors, compressed_selection, make_training_mix, sample_clip, ClipSample};
use crate::error::{Error, Result};
use crate::model::TruVil;
use crate::objectives::hybrid_loss;
use crate::params::ParamStore;
use crate::train::checkpoint::{Checkpoint, CheckpointMeta, EpochRecord};
use crate::train::config::TrainConfig;
use crate::train::eval::{evaluate, ModelPredictor};
use crate::train::optim::{AdamW, AdamWConfig};
use crate::train::schedule::CosineSchedule;

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Return after this many completed epochs (counted from zero).
    pub stop_after: Option<usize>,
    /// Encoder for phase 2; located on demand when `None`.
    pub encoder: Option<Encoder>,
}

/// Training and validation videos.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<VideoRecord>,
    pub val: Vec<VideoRecord>,
}

/// Hold out `floor(val_fraction * n)` videos, chosen by `seed`. Videos that
/// are already compressed never enter the split.
pub fn split_videos(records: &[VideoRecord], val_fraction: f64, seed: u64) -> Result<Split> {
    let clean: Vec<VideoRecord> = records.iter().filter(|r| !r.compressed).cloned().collect();
    let held = compressed_selection(clean.len(), val_fraction, seed ^ 0x5641_4c49_4441_5445)?;
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (i, r) in clean.into_iter().enumerate() {
        if held.binary_search(&i).is_ok() {
            split.val.push(r);
        } else {
            split.train.push(r);
        }
    }
    Ok(split)
}

/// RNG for one epoch, independent of how many epochs ran before it.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// `(video index, center frame)` pairs of one epoch in visiting order.
pub fn epoch_plan(records: &[VideoRecord], clips_per_video: usize, seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut rng = epoch_rng(seed, epoch);
    let mut plan = Vec::with_capacity(records.len() * clips_per_video);
    for (i, r) in records.iter().enumerate() {
        for _ in 0..clips_per_video {
            plan.push((i, rng.random_range(0..r.len())));
        }
    }
    plan.shuffle(&mut rng);
    plan
}

fn load_compressed(encoder: &Encoder, r: &VideoRecord, crf: u32, workdir: &Path) -> Result<VideoRecord> {
    let dir = workdir.join(&r.video_id);
    let marker = dir.join(COMPRESSED_MARKER);
    if let Ok(s) = std::fs::read_to_string(&marker) {
        if let Ok(m) = serde_json::from_str::<CompressionMarker>(&s) {
            if m.crf == crf {
                if let Ok(done) = scan_video(&dir, &DatasetLayout::with_split(r.split)) {
                    if done.len() == r.len() {
                        return Ok(done);
                    }
                }
            }
        }
    }
    compress_augment_with(encoder, r, crf, workdir)
}

fn phase_of(cfg: &TrainConfig, epoch: usize) -> u8 {
    if epoch < cfg.phase1_epochs {
        1
    } else {
        2
    }
}

fn load_batch(pool: &[VideoRecord], items: &[(usize, usize)], cfg: &TrainConfig, sequential: bool) -> Result<Vec<ClipSample>> {
    let res = Some(cfg.resolution());
    let load = |(v, c): &(usize, usize)| sample_clip(&pool[*v], *c, cfg.clip_len, res);
    if sequential {
        items.iter().map(load).collect()
    } else {
        items.par_iter().map(load).collect()
    }
}

/// Train per `cfg` on the videos under `train_root`, writing
/// `last.safetensors` after every epoch and `best.safetensors` whenever the
/// validation IoU improves (every epoch when there is no validation split).
pub fn train(cfg: &TrainConfig, train_root: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<Checkpoint> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let sequential = cfg.deterministic;
    let dev = Device::Cpu;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let records = scan_dataset(train_root, &DatasetLayout::default())?;
    let split = split_videos(&records, cfg.val_fraction, cfg.seed)?;
    if split.train.is_empty() {
        return Err(Error::data(train_root, "no uncompressed training videos"));
    }

    let store = ParamStore::new(cfg.seed, DType::F32, &dev);
    let model = TruVil::new(&mcfg, &store)?;
    let eval_model = TruVil::new(&mcfg, &store.inference_view())?;
    if cfg.noise_init_from_rgb {
        model.copy_rgb_to_noise(&store)?;
    }
    let mut optim = AdamW::new(AdamWConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
    });
    let mut meta = CheckpointMeta {
        epoch: 0,
        phase: 0,
        fingerprint: mcfg.fingerprint(),
        model: mcfg.clone(),
        config: cfg.clone(),
        history: Vec::new(),
        step: 0,
    };
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path, &dev)?;
        if ck.meta.fingerprint != meta.fingerprint {
            return Err(Error::Checkpoint(format!(
                "{}: fingerprint {} does not match configured model {}",
                path.display(),
                ck.meta.fingerprint,
                meta.fingerprint
            )));
        }
        ck.restore_params(&store)?;
        optim.restore(ck.meta.step, ck.optimizer_state(DType::F32, &dev)?);
        meta.epoch = ck.meta.epoch;
        meta.phase = ck.meta.phase;
        meta.history = ck.meta.history.clone();
        meta.step = ck.meta.step;
        log::info!("resumed from {} at epoch {}", path.display(), meta.epoch);
    }

    let loss_cfg = cfg.loss_config();
    let schedule = CosineSchedule::new(cfg.lr_initial, cfg.lr_final, cfg.cosine_epochs.unwrap_or(cfg.total_epochs()));
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut best_iou = meta
        .history
        .iter()
        .filter_map(|h| h.val_iou)
        .fold(f64::NEG_INFINITY, f64::max);

    if meta.epoch == 0 && cfg.total_epochs() == 0 {
        let ck = Checkpoint::capture(&store, Some(&optim), meta.clone())?;
        ck.save(&last_path)?;
        ck.save(&best_path)?;
        return Ok(ck);
    }

    let mut mix: Option<Vec<VideoRecord>> = None;
    let end = opts.stop_after.map_or(cfg.total_epochs(), |s| s.min(cfg.total_epochs()));
    let mut last = None;
    for epoch in meta.epoch..end {
        let phase = phase_of(cfg, epoch);
        let pool: &[VideoRecord] = if phase == 1 {
            &split.train
        } else {
            if mix.is_none() {
                let encoder = match &opts.encoder {
                    Some(e) => e.clone(),
                    None => Encoder::locate()?,
                };
                let workdir = out_dir.join("compressed");
                mix = Some(make_training_mix(&split.train, cfg.compressed_fraction, cfg.seed, |r| {
                    load_compressed(&encoder, r, cfg.crf, &workdir)
                })?);
            }
            mix.as_deref().expect("mix built")
        };
        let lr = schedule.lr(epoch);
        let plan = epoch_plan(pool, cfg.clips_per_video, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        for items in plan.chunks(cfg.batch_size) {
            let samples = load_batch(pool, items, cfg, sequential)?;
            let (x, y) = batch_tensors(&samples, DType::F32, &dev)?;
            let probs = model.forward(&x)?;
            let loss = hybrid_loss(&y, &probs, &loss_cfg)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                let provenance: Vec<String> = samples.iter().map(|s| s.provenance()).collect();
                return Err(Error::NonFiniteLoss {
                    value,
                    epoch,
                    provenance: provenance.join(", "),
                });
            }
            let grads = loss.backward()?;
            optim.step(&store, &grads, lr).map_err(|e| match e {
                Error::NonFiniteLoss { value, .. } => Error::NonFiniteLoss {
                    value,
                    epoch,
                    provenance: samples.iter().map(|s| s.provenance()).collect::<Vec<_>>().join(", "),
                },
                other => other,
            })?;
            loss_sum += value;
            batches += 1;
        }
        let (val_iou, val_f1) = if split.val.is_empty() {
            (None, None)
        } else {
            let predictor = ModelPredictor {
                model: &eval_model,
                resolution: cfg.resolution(),
                batch_size: cfg.batch_size,
                device: dev.clone(),
            };
            let r = evaluate(&predictor, &split.val, cfg.threshold, sequential)?;
            (Some(r.mean_iou), Some(r.mean_f1))
        };
        let record = EpochRecord {
            epoch,
            phase,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            steps: batches,
            val_iou,
            val_f1,
        };
        log::info!(
            "epoch {}/{} phase {} lr {:.3e} loss {:.6} val_iou {} val_f1 {}",
            epoch + 1,
            cfg.total_epochs(),
            phase,
            lr,
            record.train_loss,
            val_iou.map_or("-".into(), |v| format!("{v:.4}")),
            val_f1.map_or("-".into(), |v| format!("{v:.4}")),
        );
        meta.history.push(record);
        meta.epoch = epoch + 1;
        meta.phase = phase;
        meta.step = optim.step_count();
        let ck = Checkpoint::capture(&store, Some(&optim), meta.clone())?;
        ck.save(&last_path)?;
        let improved = match val_iou {
            Some(v) => v > best_iou,
            None => true,
        };
        if improved {
            best_iou = val_iou.unwrap_or(best_iou);
            ck.save(&best_path)?;
        }
        last = Some(ck);
    }
    match last {
        Some(ck) => Ok(ck),
        None => {
            let ck = Checkpoint::capture(&store, Some(&optim), meta)?;
            ck.save(&last_path)?;
            if !best_path.exists() {
                ck.save(&best_path)?;
            }
            Ok(ck)
        }
    }
}
