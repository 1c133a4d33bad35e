//! Training losses and pixel-level localization metrics.
//!
//! Loss functions take `(batch, ...)` tensors; the non-batch dimensions are
//! one field per sample. The focal term is summed over pixels and divided by
//! the pixel count (mean reduction); the IoU term is computed per sample and
//! averaged over the batch.

use std::fmt::Write as _;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::decoder::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Predictions are clamped to `[p_min, 1 - p_min]` inside the focal term.
    pub p_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 2.0,
            epsilon: 1e-6,
            lambda1: 0.5,
            lambda2: 0.5,
            p_min: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("loss epsilon must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || self.gamma < 0.0 {
            return Err(Error::Config("focal alpha must be in [0, 1] and gamma >= 0".into()));
        }
        if !(self.p_min > 0.0 && self.p_min < 0.5) {
            return Err(Error::Config("p_min must be in (0, 0.5)".into()));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, y: &Tensor, y_hat: &Tensor) -> Result<()> {
    if y.dims() != y_hat.dims() {
        return Err(Error::shape(op, format!("{:?}", y.dims()), format!("{:?}", y_hat.dims())));
    }
    if y.rank() == 0 {
        return Err(Error::shape(op, "rank >= 1", 0));
    }
    Ok(())
}

/// `mean(-a (1-p)^g y log p - (1-a) p^g (1-y) log(1-p))`.
pub fn focal_loss(y: &Tensor, y_hat: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    same_shape("focal_loss", y, y_hat)?;
    let p = y_hat.clamp(cfg.p_min, 1.0 - cfg.p_min)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let one_minus_y = y.affine(-1.0, 1.0)?;
    let pos = (one_minus_p.powf(cfg.gamma)? * y)?.mul(&p.log()?)?;
    let neg = (p.powf(cfg.gamma)? * one_minus_y)?.mul(&one_minus_p.log()?)?;
    let per_pixel = ((pos * (-cfg.alpha))? - (neg * (1.0 - cfg.alpha))?)?;
    Ok(per_pixel.mean_all()?)
}

/// `1 - sum(y p) / (sum(y + p - y p) + eps)`, per sample, batch mean.
pub fn iou_loss(y: &Tensor, y_hat: &Tensor, epsilon: f64) -> Result<Tensor> {
    same_shape("iou_loss", y, y_hat)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let b = y.dim(0)?;
    let y = y.reshape((b, ()))?;
    let p = y_hat.reshape((b, ()))?;
    let inter = (&y * &p)?;
    let inter_sum = inter.sum(1)?;
    let union_sum = ((&y + &p)? - &inter)?.sum(1)?;
    let ratio = inter_sum.div(&(union_sum + epsilon)?)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// `lambda1 * focal + lambda2 * iou`.
pub fn hybrid_loss(y: &Tensor, y_hat: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let focal = focal_loss(y, y_hat, cfg)?;
    let iou = iou_loss(y, y_hat, cfg.epsilon)?;
    Ok(((focal * cfg.lambda1)? + (iou * cfg.lambda2)?)?)
}

/// Pixel confusion counts of a prediction against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if (pred.width, pred.height) != (gt.width, gt.height) || pred.data.len() != gt.data.len() {
            return Err(Error::shape(
                "f1_iou",
                format!("{}x{}", gt.width, gt.height),
                format!("{}x{}", pred.width, pred.height),
            ));
        }
        let mut c = Confusion::default();
        for (p, g) in pred.data.iter().zip(&gt.data) {
            match (*p != 0, *g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// `(IoU, F1)`. Empty prediction on empty ground truth scores 1; any
    /// other case with no true positives scores 0.
    pub fn iou_f1(&self) -> (f64, f64) {
        if self.tp + self.fp + self.fn_ == 0 {
            return (1.0, 1.0);
        }
        let tp = self.tp as f64;
        let (fp, fn_) = (self.fp as f64, self.fn_ as f64);
        (tp / (tp + fp + fn_), 2.0 * tp / (2.0 * tp + fp + fn_))
    }
}

/// `(IoU, F1)` of a binary prediction against a binary ground truth.
pub fn f1_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    Ok(Confusion::from_masks(pred, gt)?.iou_f1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub iou: f64,
    pub f1: f64,
    pub frames: usize,
}

/// Per-video scores (each the mean over that video's frames) and their
/// unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub per_video: Vec<VideoScore>,
    pub mean_iou: f64,
    pub mean_f1: f64,
}

impl EvalReport {
    /// Builds the report from per-frame `(IoU, F1)` scores per video.
    /// Videos are ordered by id.
    pub fn from_frame_scores(threshold: f64, mut videos: Vec<(String, Vec<(f64, f64)>)>) -> Self {
        videos.sort_by(|a, b| a.0.cmp(&b.0));
        let per_video: Vec<VideoScore> = videos
            .into_iter()
            .map(|(video_id, frames)| {
                let n = frames.len().max(1) as f64;
                VideoScore {
                    video_id,
                    iou: frames.iter().map(|s| s.0).sum::<f64>() / n,
                    f1: frames.iter().map(|s| s.1).sum::<f64>() / n,
                    frames: frames.len(),
                }
            })
            .collect();
        let n = per_video.len().max(1) as f64;
        Self {
            threshold,
            mean_iou: per_video.iter().map(|v| v.iou).sum::<f64>() / n,
            mean_f1: per_video.iter().map(|v| v.f1).sum::<f64>() / n,
            per_video,
        }
    }

    /// Tab-separated table with a `#`-prefixed aggregate footer.
    pub fn to_table(&self) -> String {
        let mut s = String::from("video_id\tiou\tf1\n");
        for v in &self.per_video {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", v.video_id, v.iou, v.f1);
        }
        let _ = writeln!(s, "# mean\t{:.6}\t{:.6}", self.mean_iou, self.mean_f1);
        let _ = writeln!(s, "# videos\t{}", self.per_video.len());
        let _ = writeln!(s, "# threshold\t{}", self.threshold);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
