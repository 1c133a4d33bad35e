//! Frame decoding, resizing and clip assembly.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::data::dataset::VideoRecord;
use crate::decoder::BinaryMask;
use crate::error::{Error, Result};
use crate::ops::reflect_index;

/// Mask pixels with 8-bit luma at or above this value are positive.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            width: 432,
            height: 240,
        }
    }
}

/// `t` consecutive RGB frames, values in `[0, 1]`, stored planar as
/// `(t, 3, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Clip {
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = 3 * self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }
}

/// Training/evaluation unit: a clip and the mask of its middle frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub clip: Clip,
    pub mask: BinaryMask,
    pub video_id: String,
    /// Frame index (within the video) of the middle frame.
    pub center: usize,
}

impl ClipSample {
    pub fn provenance(&self) -> String {
        format!("{}@{}", self.video_id, self.center)
    }
}

/// Video frame indices for a `t`-frame window centered on `center`,
/// reflecting at the ends.
pub fn clip_indices(center: usize, t: usize, len: usize) -> Result<Vec<usize>> {
    if t == 0 || t.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("clip length {t} must be odd")));
    }
    if center >= len {
        return Err(Error::InvalidArgument(format!("center {center} outside video of {len} frames")));
    }
    let half = (t / 2) as isize;
    Ok((-half..=half).map(|d| reflect_index(center as isize + d, len)).collect())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::data(path, format!("unreadable image: {e}")))
}

/// Decode a frame to planar RGB in `[0, 1]`, bilinearly resized when a
/// resolution is given.
pub fn load_frame(path: &Path, res: Option<Resolution>) -> Result<(Vec<f32>, Resolution)> {
    let mut img = open_image(path)?.to_rgb8();
    if let Some(r) = res {
        if (img.width() as usize, img.height() as usize) != (r.width, r.height) {
            img = image::imageops::resize(&img, r.width as u32, r.height as u32, FilterType::Triangle);
        }
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok((out, Resolution { width: w, height: h }))
}

/// Decode a mask, threshold at [`MASK_THRESHOLD`], nearest-neighbour resize.
pub fn load_mask(path: &Path, res: Option<Resolution>) -> Result<BinaryMask> {
    let mut img = open_image(path)?.to_luma8();
    if let Some(r) = res {
        if (img.width() as usize, img.height() as usize) != (r.width, r.height) {
            img = image::imageops::resize(&img, r.width as u32, r.height as u32, FilterType::Nearest);
        }
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMask {
        width: w,
        height: h,
        data: img.pixels().map(|p| u8::from(p[0] >= MASK_THRESHOLD)).collect(),
    })
}

/// Load a `t`-frame clip around `center`.
pub fn sample_clip(record: &VideoRecord, center: usize, t: usize, res: Option<Resolution>) -> Result<ClipSample> {
    let idx = clip_indices(center, t, record.len())?;
    let mut data = Vec::new();
    let mut size = None;
    for i in &idx {
        let (f, r) = load_frame(&record.frames[*i], res)?;
        if size.is_some_and(|s| s != r) {
            return Err(Error::data(&record.frames[*i], "frame size differs from the rest of the clip"));
        }
        size = Some(r);
        data.extend_from_slice(&f);
    }
    let r = size.expect("clip has frames");
    let mask = load_mask(&record.masks[center], Some(r))?;
    Ok(ClipSample {
        clip: Clip {
            t,
            height: r.height,
            width: r.width,
            data,
        },
        mask,
        video_id: record.video_id.clone(),
        center,
    })
}

/// All frames and masks of one video, decoded once.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub video_id: String,
    pub resolution: Resolution,
    frames: Vec<Vec<f32>>,
    masks: Vec<BinaryMask>,
}

impl VideoFrames {
    pub fn load(record: &VideoRecord, res: Option<Resolution>) -> Result<Self> {
        if record.is_empty() {
            return Err(Error::data(&record.video_id, "video has no frames"));
        }
        let mut frames = Vec::with_capacity(record.len());
        let mut resolution = None;
        for p in &record.frames {
            let (f, r) = load_frame(p, res)?;
            if resolution.is_some_and(|s| s != r) {
                return Err(Error::data(p, "frame size differs from the rest of the video"));
            }
            resolution = Some(r);
            frames.push(f);
        }
        let resolution = resolution.expect("non-empty");
        let masks = record
            .masks
            .iter()
            .map(|m| load_mask(m, Some(resolution)))
            .collect::<Result<_>>()?;
        Ok(Self {
            video_id: record.video_id.clone(),
            resolution,
            frames,
            masks,
        })
    }

    /// Frames without ground truth; masks are all zero.
    pub fn load_unlabelled(video_id: &str, paths: &[std::path::PathBuf], res: Option<Resolution>) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::data(video_id, "video has no frames"));
        }
        let mut frames = Vec::with_capacity(paths.len());
        let mut resolution = None;
        for p in paths {
            let (f, r) = load_frame(p, res)?;
            if resolution.is_some_and(|s| s != r) {
                return Err(Error::data(p, "frame size differs from the rest of the video"));
            }
            resolution = Some(r);
            frames.push(f);
        }
        let r = resolution.expect("non-empty");
        Ok(Self {
            video_id: video_id.to_string(),
            resolution: r,
            masks: vec![BinaryMask::zeros(r.width, r.height); frames.len()],
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn mask(&self, i: usize) -> &BinaryMask {
        &self.masks[i]
    }

    pub fn clip_at(&self, center: usize, t: usize) -> Result<ClipSample> {
        let idx = clip_indices(center, t, self.len())?;
        let mut data = Vec::with_capacity(t * self.frames[0].len());
        for i in idx {
            data.extend_from_slice(&self.frames[i]);
        }
        Ok(ClipSample {
            clip: Clip {
                t,
                height: self.resolution.height,
                width: self.resolution.width,
                data,
            },
            mask: self.masks[center].clone(),
            video_id: self.video_id.clone(),
            center,
        })
    }
}

/// Stack samples into `(b, t, 3, h, w)` clips and `(b, 1, h, w)` masks.
pub fn batch_tensors(samples: &[ClipSample], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (t, h, w) = (first.clip.t, first.clip.height, first.clip.width);
    let mut clips = Vec::with_capacity(samples.len() * first.clip.data.len());
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.clip.t, s.clip.height, s.clip.width) != (t, h, w) {
            return Err(Error::shape(
                "batch_tensors",
                format!("{t}x{h}x{w}"),
                format!("{}x{}x{}", s.clip.t, s.clip.height, s.clip.width),
            ));
        }
        clips.extend_from_slice(&s.clip.data);
        masks.extend(s.mask.data.iter().map(|v| *v as f32));
    }
    let b = samples.len();
    Ok((
        Tensor::from_vec(clips, (b, t, 3, h, w), device)?.to_dtype(dtype)?,
        Tensor::from_vec(masks, (b, 1, h, w), device)?.to_dtype(dtype)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{scan_dataset, DatasetLayout};

    #[test]
    fn window_indices() {
        assert_eq!(clip_indices(2, 5, 9).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(clip_indices(0, 5, 9).unwrap(), vec![2, 1, 0, 1, 2]);
        assert_eq!(clip_indices(8, 5, 9).unwrap(), vec![6, 7, 8, 7, 6]);
        assert_eq!(clip_indices(0, 5, 1).unwrap(), vec![0; 5]);
        assert!(clip_indices(0, 4, 9).is_err());
        assert!(clip_indices(9, 5, 9).is_err());
    }

    fn tree(root: &Path) {
        for i in 0..6u8 {
            let f = root.join("v/frames").join(format!("{i:05}.png"));
            let m = root.join("v/masks").join(format!("{i:05}.png"));
            std::fs::create_dir_all(f.parent().unwrap()).unwrap();
            std::fs::create_dir_all(m.parent().unwrap()).unwrap();
            image::RgbImage::from_pixel(8, 6, image::Rgb([i * 40, 0, 255])).save(&f).unwrap();
            let mut mask = image::GrayImage::new(8, 6);
            mask.put_pixel(1, 1, image::Luma([200]));
            mask.put_pixel(2, 1, image::Luma([127]));
            mask.put_pixel(3, 1, image::Luma([128]));
            mask.save(&m).unwrap();
        }
    }

    #[test]
    fn sampled_clip_values_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        tree(dir.path());
        let rec = &scan_dataset(dir.path(), &DatasetLayout::default()).unwrap()[0];
        let s = sample_clip(rec, 0, 5, None).unwrap();
        assert_eq!((s.clip.t, s.clip.height, s.clip.width), (5, 6, 8));
        // reflected window {2,1,0,1,2}: red channel encodes the frame index
        let reds: Vec<f32> = (0..5).map(|i| s.clip.frame(i)[0]).collect();
        let want: Vec<f32> = [2u8, 1, 0, 1, 2].iter().map(|i| (i * 40) as f32 / 255.0).collect();
        assert_eq!(reds, want);
        assert!(s.clip.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.mask.positives(), 2);
        assert_eq!(s.mask.data[8 + 1], 1);
        assert_eq!(s.mask.data[8 + 2], 0);
        assert_eq!(s.mask.data[8 + 3], 1);

        let cached = VideoFrames::load(rec, None).unwrap();
        assert_eq!(cached.clip_at(0, 5).unwrap(), s);
        assert!(sample_clip(rec, 1, 4, None).is_err());
    }

    #[test]
    fn resized_clip_keeps_binary_masks() {
        let dir = tempfile::tempdir().unwrap();
        tree(dir.path());
        let rec = &scan_dataset(dir.path(), &DatasetLayout::default()).unwrap()[0];
        let r = Resolution { width: 16, height: 12 };
        let s = sample_clip(rec, 3, 5, Some(r)).unwrap();
        assert_eq!((s.clip.height, s.clip.width), (12, 16));
        assert!(s.mask.data.iter().all(|v| *v <= 1));
        let (x, y) = batch_tensors(&[s.clone(), s], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(x.dims(), &[2, 5, 3, 12, 16]);
        assert_eq!(y.dims(), &[2, 1, 12, 16]);
    }
}
