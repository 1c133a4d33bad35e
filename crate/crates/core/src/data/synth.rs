//! Synthetic inpainting corpus: textured noisy videos in which a moving
//! square has been smoothed out.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::dataset::{scan_dataset, DatasetLayout, Split, VideoRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub noise_std: f64,
    /// Box blur radius inside the square.
    pub blur_radius: usize,
    /// Weight of the blurred signal; the rest is the square's mean colour.
    pub blur_weight: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 20,
            frames: 9,
            width: 64,
            height: 64,
            min_side: 16,
            max_side: 28,
            noise_std: 0.05,
            blur_radius: 2,
            blur_weight: 0.7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("synthetic videos need frames and pixels".into()));
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.width.min(self.height) {
            return Err(Error::InvalidArgument(format!(
                "square side range {}..={} does not fit {}x{}",
                self.min_side, self.max_side, self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.blur_weight) || self.noise_std < 0.0 {
            return Err(Error::InvalidArgument("bad blur weight or noise level".into()));
        }
        Ok(())
    }
}

struct Square {
    side: usize,
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
}

impl Square {
    /// Top-left corner at frame `t`, bouncing off the borders.
    fn corner(&self, t: usize, w: usize, h: usize) -> (usize, usize) {
        fn bounce(p: f64, span: f64) -> f64 {
            if span <= 0.0 {
                return 0.0;
            }
            let m = p.rem_euclid(2.0 * span);
            if m > span {
                2.0 * span - m
            } else {
                m
            }
        }
        let x = bounce(self.x0 + self.dx * t as f64, (w - self.side) as f64);
        let y = bounce(self.y0 + self.dy * t as f64, (h - self.side) as f64);
        (x.round() as usize, y.round() as usize)
    }
}

/// One video as RGB frames (interleaved, `[0, 1]`) and 0/1 masks.
pub fn synth_video(cfg: &SynthConfig, index: usize) -> Result<(Vec<Vec<f32>>, Vec<Vec<u8>>)> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64));
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let freq: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let drift = rng.random_range(-0.3..0.3);
    let side = rng.random_range(cfg.min_side..=cfg.max_side);
    let sq = Square {
        side,
        x0: rng.random_range(0.0..=(w - side) as f64),
        y0: rng.random_range(0.0..=(h - side) as f64),
        dx: rng.random_range(-2.0..2.0),
        dy: rng.random_range(-2.0..2.0),
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut img = vec![0f32; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let (fx, fy) = freq[c];
                    let v = base[c]
                        + 0.2 * (fx * x as f64 + fy * y as f64 + phase[c] + drift * t as f64).sin()
                        + noise.sample(&mut rng);
                    img[(y * w + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        let (cx, cy) = sq.corner(t, w, h);
        let r = cfg.blur_radius as isize;
        let mut patch = vec![0f32; side * side * 3];
        let mut mean = [0f64; 3];
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = (cy + y) as isize + dy;
                            let xx = (cx + x) as isize + dx;
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += img[(yy as usize * w + xx as usize) * 3 + c] as f64;
                                n += 1.0;
                            }
                        }
                    }
                    patch[(y * side + x) * 3 + c] = (acc / n) as f32;
                    mean[c] += img[((cy + y) * w + cx + x) * 3 + c] as f64;
                }
            }
        }
        let area = (side * side) as f64;
        let mut mask = vec![0u8; h * w];
        for y in 0..side {
            for x in 0..side {
                let i = (cy + y) * w + cx + x;
                mask[i] = 1;
                for c in 0..3 {
                    let b = patch[(y * side + x) * 3 + c] as f64;
                    img[i * 3 + c] = (cfg.blur_weight * b + (1.0 - cfg.blur_weight) * mean[c] / area) as f32;
                }
            }
        }
        frames.push(img);
        masks.push(mask);
    }
    Ok((frames, masks))
}

/// Write `cfg.videos` videos under `root` in the dataset layout and scan them.
pub fn write_synthetic_dataset(root: &Path, cfg: &SynthConfig, split: Split) -> Result<Vec<VideoRecord>> {
    cfg.validate()?;
    for v in 0..cfg.videos {
        let dir = root.join(format!("synth_{v:03}"));
        let fdir = dir.join("frames");
        let mdir = dir.join("masks");
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        let (frames, masks) = synth_video(cfg, v)?;
        for (t, (f, m)) in frames.iter().zip(&masks).enumerate() {
            let bytes: Vec<u8> = f.iter().map(|v| (v * 255.0).round() as u8).collect();
            let img = image::RgbImage::from_raw(cfg.width as u32, cfg.height as u32, bytes).expect("buffer size");
            let p = fdir.join(format!("{t:05}.png"));
            img.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
            let mbytes: Vec<u8> = m.iter().map(|v| v * 255).collect();
            let mimg = image::GrayImage::from_raw(cfg.width as u32, cfg.height as u32, mbytes).expect("buffer size");
            let p = mdir.join(format!("{t:05}.png"));
            mimg.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
        }
    }
    scan_dataset(root, &DatasetLayout::with_split(split))
}
