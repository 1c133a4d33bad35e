//! Per-frame inference on one video directory.

use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::dataset::list_images;
use crate::data::{Resolution, VideoFrames};
use crate::decoder::{binarize, check_threshold};
use crate::error::{Error, Result};
use crate::export::{resize_map, write_mask_png, write_overlay_png, write_probability_png};
use crate::train::eval::{predict_video, ModelPredictor};
use crate::train::Checkpoint;

#[derive(Debug, Clone)]
pub struct InferOptions {
    pub threshold: f64,
    pub overlay: bool,
    pub batch_size: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            overlay: false,
            batch_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutput {
    pub frame: PathBuf,
    pub probability: PathBuf,
    pub mask: PathBuf,
    pub positives: usize,
}

/// Frames of a video directory: `<dir>/frames/*` when present, else the
/// images directly inside `<dir>`.
pub fn video_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "video directory not found"));
    }
    let sub = dir.join("frames");
    let frames = list_images(if sub.is_dir() { &sub } else { dir })?;
    if frames.is_empty() {
        return Err(Error::data(dir, "no frames found"));
    }
    Ok(frames)
}

/// Write `probs/<stem>.png`, `masks/<stem>.png` (and `overlays/<stem>.png`)
/// under `out_dir`, all at the source frame resolution.
pub fn infer(ckpt: &Checkpoint, video_dir: &Path, out_dir: &Path, opts: &InferOptions) -> Result<Vec<FrameOutput>> {
    check_threshold(opts.threshold)?;
    let dev = Device::Cpu;
    let (model, _store) = ckpt.build_model(None, &dev)?;
    let paths = video_frames(video_dir)?;
    let res = Resolution {
        width: ckpt.meta.config.width,
        height: ckpt.meta.config.height,
    };
    let video_id = video_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let frames = VideoFrames::load_unlabelled(&video_id, &paths, Some(res))?;
    let predictor = ModelPredictor {
        model: &model,
        resolution: res,
        batch_size: opts.batch_size.max(1),
        device: dev,
    };
    let maps = predict_video(&predictor, &frames)?;

    let probs_dir = out_dir.join("probs");
    let masks_dir = out_dir.join("masks");
    let overlay_dir = out_dir.join("overlays");
    let mut dirs = vec![&probs_dir, &masks_dir];
    if opts.overlay {
        dirs.push(&overlay_dir);
    }
    for d in dirs {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut out = Vec::with_capacity(paths.len());
    for (path, map) in paths.iter().zip(&maps) {
        let (w, h) = image::image_dimensions(path).map_err(|e| Error::data(path, format!("unreadable image: {e}")))?;
        let full = resize_map(map, w as usize, h as usize)?;
        let mask = binarize(&full, opts.threshold)?;
        let stem = path.file_stem().expect("frame has a name").to_string_lossy().into_owned();
        let prob_path = probs_dir.join(format!("{stem}.png"));
        let mask_path = masks_dir.join(format!("{stem}.png"));
        write_probability_png(&full, &prob_path)?;
        write_mask_png(&mask, &mask_path)?;
        if opts.overlay {
            write_overlay_png(path, &mask, &overlay_dir.join(format!("{stem}.png")))?;
        }
        out.push(FrameOutput {
            frame: path.clone(),
            probability: prob_path,
            mask: mask_path,
            positives: mask.positives(),
        });
    }
    Ok(out)
}
