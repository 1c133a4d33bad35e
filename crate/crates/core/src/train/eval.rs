//! Sliding-window evaluation.

use candle_core::{DType, Device};
use rayon::prelude::*;

use crate::data::{batch_tensors, ClipSample, Resolution, VideoFrames, VideoRecord};
use crate::decoder::{binarize, LocalizationMap};
use crate::error::Result;
use crate::model::TruVil;
use crate::objectives::{f1_iou, EvalReport};

/// Anything that maps clips to middle-frame localization maps.
pub trait Predictor: Sync {
    fn clip_len(&self) -> usize;
    /// Resolution frames are resized to before prediction; `None` keeps
    /// the source size.
    fn resolution(&self) -> Option<Resolution>;
    fn batch_size(&self) -> usize {
        1
    }
    /// One map per sample, at the sample's resolution.
    fn predict(&self, samples: &[ClipSample]) -> Result<Vec<LocalizationMap>>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a TruVil,
    pub resolution: Resolution,
    pub batch_size: usize,
    pub device: Device,
}

impl Predictor for ModelPredictor<'_> {
    fn clip_len(&self) -> usize {
        self.model.config().clip_len
    }

    fn resolution(&self) -> Option<Resolution> {
        Some(self.resolution)
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn predict(&self, samples: &[ClipSample]) -> Result<Vec<LocalizationMap>> {
        let (x, _) = batch_tensors(samples, DType::F32, &self.device)?;
        let mut maps = self.model.localize(&x)?;
        for (m, s) in maps.iter_mut().zip(samples) {
            m.frame_index = s.center;
        }
        Ok(maps)
    }
}

/// Predict every frame of a video once, windows reflect-padded at the ends.
pub fn predict_video<P: Predictor + ?Sized>(predictor: &P, frames: &VideoFrames) -> Result<Vec<LocalizationMap>> {
    let t = predictor.clip_len();
    let bs = predictor.batch_size().max(1);
    let mut out = Vec::with_capacity(frames.len());
    let centers: Vec<usize> = (0..frames.len()).collect();
    for chunk in centers.chunks(bs) {
        let samples = chunk.iter().map(|c| frames.clip_at(*c, t)).collect::<Result<Vec<_>>>()?;
        out.extend(predictor.predict(&samples)?);
    }
    Ok(out)
}

/// Per-frame `(IoU, F1)` of one video.
pub fn score_video<P: Predictor + ?Sized>(predictor: &P, frames: &VideoFrames, threshold: f64) -> Result<Vec<(f64, f64)>> {
    predict_video(predictor, frames)?
        .iter()
        .enumerate()
        .map(|(i, m)| f1_iou(&binarize(m, threshold)?, frames.mask(i)))
        .collect()
}

/// Score every frame of every video. Video decoding runs in parallel
/// unless `sequential`; prediction order and the report do not depend on it.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    records: &[VideoRecord],
    threshold: f64,
    sequential: bool,
) -> Result<EvalReport> {
    crate::decoder::check_threshold(threshold)?;
    let res = predictor.resolution();
    let load = |r: &VideoRecord| VideoFrames::load(r, res);
    let videos: Vec<VideoFrames> = if sequential {
        records.iter().map(load).collect::<Result<_>>()?
    } else {
        records.par_iter().map(load).collect::<Result<_>>()?
    };
    let mut scores = Vec::with_capacity(videos.len());
    for v in &videos {
        scores.push((v.video_id.clone(), score_video(predictor, v, threshold)?));
    }
    Ok(EvalReport::from_frame_scores(threshold, scores))
}
