//! H.264 round trip of whole videos through an external ffmpeg binary.
//!
//! The binary is taken from `TRUVIL_FFMPEG` when set, else `ffmpeg` on
//! `PATH`. It needs the libx264 encoder.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{list_images, VideoRecord, COMPRESSED_MARKER};
use crate::error::{Error, Result};

pub const MAX_CRF: u32 = 51;
pub const ENCODER_ENV: &str = "TRUVIL_FFMPEG";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CompressionMarker {
    pub crf: u32,
    pub source_video: String,
    pub codec: String,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    program: PathBuf,
}

impl Encoder {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
        }
    }

    /// Resolve the encoder binary and check that it runs.
    pub fn locate() -> Result<Self> {
        let program = std::env::var_os(ENCODER_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("ffmpeg"));
        let enc = Self { program };
        enc.probe()?;
        Ok(enc)
    }

    pub fn program(&self) -> &Path {
        &self.program
    }

    pub fn probe(&self) -> Result<()> {
        let out = Command::new(&self.program)
            .args(["-hide_banner", "-encoders"])
            .output()
            .map_err(|e| Error::Encoder(format!("cannot run {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Encoder(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        if !String::from_utf8_lossy(&out.stdout).contains("libx264") {
            return Err(Error::Encoder(format!("{} lacks the libx264 encoder", self.program.display())));
        }
        Ok(())
    }

    fn run(&self, args: &[&str]) -> Result<()> {
        let out = Command::new(&self.program)
            .args(["-hide_banner", "-loglevel", "error", "-nostdin", "-y"])
            .args(args)
            .output()
            .map_err(|e| Error::Encoder(format!("cannot run {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Encoder(format!(
                "{} {} exited with {}: {}",
                self.program.display(),
                args.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(())
    }
}

pub fn check_crf(crf: u32) -> Result<()> {
    if crf > MAX_CRF {
        return Err(Error::InvalidArgument(format!("crf {crf} outside [0, {MAX_CRF}]")));
    }
    Ok(())
}

/// Compress a video with the encoder found by [`Encoder::locate`].
pub fn compress_augment(record: &VideoRecord, crf: u32, workdir: &Path) -> Result<VideoRecord> {
    check_crf(crf)?;
    compress_augment_with(&Encoder::locate()?, record, crf, workdir)
}

/// Encode all frames of `record` into one H.264 stream at `crf` and decode
/// them back. The result lives in `<workdir>/<video_id>/` with the same
/// dataset layout; frame names keep their stems (as PNG), masks are copied
/// unchanged.
pub fn compress_augment_with(
    encoder: &Encoder,
    record: &VideoRecord,
    crf: u32,
    workdir: &Path,
) -> Result<VideoRecord> {
    check_crf(crf)?;
    if record.is_empty() {
        return Err(Error::data(&record.video_id, "cannot compress an empty video"));
    }
    let out_dir = workdir.join(&record.video_id);
    let stage = out_dir.join(".stage");
    let frames_dir = out_dir.join("frames");
    let masks_dir = out_dir.join("masks");
    for d in [&stage, &frames_dir, &masks_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut size = None;
    for (i, src) in record.frames.iter().enumerate() {
        let img = image::ImageReader::open(src)
            .map_err(|e| Error::io(src, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(src, e))?
            .decode()
            .map_err(|e| Error::data(src, format!("unreadable image: {e}")))?
            .to_rgb8();
        let dims = img.dimensions();
        if size.is_some_and(|s| s != dims) {
            return Err(Error::data(src, "frame size differs from the rest of the video"));
        }
        size = Some(dims);
        let dst = stage.join(format!("in_{:05}.png", i + 1));
        img.save(&dst).map_err(|e| Error::Image { path: dst, source: e })?;
    }
    let (w, h) = size.expect("non-empty video");

    let stream = out_dir.join("stream.mp4");
    let crf_s = crf.to_string();
    let input = stage.join("in_%05d.png");
    let output = stage.join("out_%05d.png");
    encoder.run(&[
        "-framerate",
        "25",
        "-i",
        &input.to_string_lossy(),
        "-vf",
        "pad=ceil(iw/2)*2:ceil(ih/2)*2",
        "-c:v",
        "libx264",
        "-crf",
        &crf_s,
        "-pix_fmt",
        "yuv444p",
        "-threads",
        "1",
        &stream.to_string_lossy(),
    ])?;
    let crop = format!("format=rgb24,crop={w}:{h}:0:0");
    encoder.run(&[
        "-threads",
        "1",
        "-i",
        &stream.to_string_lossy(),
        "-vf",
        &crop,
        "-pix_fmt",
        "rgb24",
        &output.to_string_lossy(),
    ])?;

    let decoded: Vec<PathBuf> = list_images(&stage)?
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("out_")))
        .collect();
    if decoded.len() != record.len() {
        return Err(Error::Encoder(format!(
            "{}: {} frames in, {} frames out after crf {crf}",
            record.video_id,
            record.len(),
            decoded.len()
        )));
    }

    let mut frames = Vec::with_capacity(record.len());
    let mut masks = Vec::with_capacity(record.len());
    for (i, (src_frame, src_mask)) in record.frames.iter().zip(&record.masks).enumerate() {
        let stem = src_frame.file_stem().expect("frame has a name").to_string_lossy();
        let dst = frames_dir.join(format!("{stem}.png"));
        let from = stage.join(format!("out_{:05}.png", i + 1));
        fs::rename(&from, &dst).map_err(|e| Error::io(&from, e))?;
        frames.push(dst);
        let mdst = masks_dir.join(src_mask.file_name().expect("mask has a name"));
        fs::copy(src_mask, &mdst).map_err(|e| Error::io(src_mask, e))?;
        masks.push(mdst);
    }
    fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    let marker = CompressionMarker {
        crf,
        source_video: record.video_id.clone(),
        codec: "h264".into(),
    };
    let marker_path = out_dir.join(COMPRESSED_MARKER);
    fs::write(&marker_path, serde_json::to_string_pretty(&marker).expect("marker serializes"))
        .map_err(|e| Error::io(&marker_path, e))?;

    Ok(VideoRecord {
        video_id: record.video_id.clone(),
        frames,
        masks,
        split: record.split,
        compressed: true,
    })
}
