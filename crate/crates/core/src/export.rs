//! Writing probability maps, masks and overlays as PNG files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::decoder::{BinaryMask, LocalizationMap};
use crate::error::{Error, Result};
use crate::ops;

/// 8-bit quantization, rounding half up.
pub fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Bilinear resize of a map to `width x height`.
pub fn resize_map(map: &LocalizationMap, width: usize, height: usize) -> Result<LocalizationMap> {
    if (map.width, map.height) == (width, height) {
        return Ok(map.clone());
    }
    let t = Tensor::from_vec(map.probs.clone(), (1, 1, map.height, map.width), &Device::Cpu)?;
    let r = ops::resize_bilinear(&t, height, width)?;
    Ok(LocalizationMap {
        width,
        height,
        probs: r.flatten_all()?.to_vec1()?,
        frame_index: map.frame_index,
    })
}

pub fn write_probability_png(map: &LocalizationMap, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = map.probs.iter().map(|p| quantize(*p)).collect();
    let img = image::GrayImage::from_raw(map.width as u32, map.height as u32, bytes)
        .ok_or_else(|| Error::shape("write_probability_png", map.width * map.height, map.probs.len()))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// 1-bit grayscale PNG.
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let row_bytes = mask.width.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.data[y * mask.width + x] != 0 {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&packed).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Source frame with masked pixels tinted red.
pub fn write_overlay_png(frame: &Path, mask: &BinaryMask, path: &Path) -> Result<()> {
    let mut img = image::ImageReader::open(frame)
        .map_err(|e| Error::io(frame, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(frame, e))?
        .decode()
        .map_err(|e| Error::data(frame, format!("unreadable image: {e}")))?
        .to_rgb8();
    if (img.width() as usize, img.height() as usize) != (mask.width, mask.height) {
        return Err(Error::shape(
            "write_overlay_png",
            format!("{}x{}", mask.width, mask.height),
            format!("{}x{}", img.width(), img.height()),
        ));
    }
    for (x, y, px) in img.enumerate_pixels_mut() {
        if mask.data[y as usize * mask.width + x as usize] != 0 {
            px[0] = ((px[0] as u16 + 255) / 2) as u8;
            px[1] /= 2;
            px[2] /= 2;
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
