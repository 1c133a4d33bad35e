//! Dataset directory scanning.
//!
//! A dataset root holds one directory per video:
//!
//! ```text
//! <root>/<video_id>/frames/00000.png
//! <root>/<video_id>/masks/00000.png
//! ```
//!
//! Frames and masks are paired by file stem. A `compressed.json` marker in a
//! video directory flags videos produced by the compression round trip.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
pub const COMPRESSED_MARKER: &str = "compressed.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames: Vec<PathBuf>,
    /// Index-aligned with `frames`.
    pub masks: Vec<PathBuf>,
    pub split: Split,
    pub compressed: bool,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub frames_dir: String,
    pub masks_dir: String,
    pub split: Split,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            frames_dir: "frames".into(),
            masks_dir: "masks".into(),
            split: Split::Train,
        }
    }
}

impl DatasetLayout {
    pub fn with_split(split: Split) -> Self {
        Self {
            split,
            ..Default::default()
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Image files of a directory in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn check_readable(path: &Path) -> Result<()> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|e| Error::data(path, format!("unreadable image: {e}")))?;
    Ok(())
}

/// Scan one video directory.
pub fn scan_video(dir: &Path, layout: &DatasetLayout) -> Result<VideoRecord> {
    let video_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::data(dir, "video directory has no name"))?;
    let frames_dir = dir.join(&layout.frames_dir);
    let masks_dir = dir.join(&layout.masks_dir);
    if !frames_dir.is_dir() {
        return Err(Error::data(&frames_dir, "missing frames directory"));
    }
    if !masks_dir.is_dir() {
        return Err(Error::data(&masks_dir, "missing masks directory"));
    }
    let frames = list_images(&frames_dir)?;
    let mask_files = list_images(&masks_dir)?;
    let mut masks = Vec::with_capacity(frames.len());
    for frame in &frames {
        let s = stem(frame);
        match mask_files.iter().find(|m| stem(m) == s) {
            Some(m) => masks.push(m.clone()),
            None => {
                return Err(Error::data(
                    frame,
                    format!("no mask named {s}.* in {}", masks_dir.display()),
                ))
            }
        }
    }
    if mask_files.len() != frames.len() {
        let orphan = mask_files
            .iter()
            .find(|m| !masks.contains(m))
            .cloned()
            .unwrap_or(masks_dir.clone());
        return Err(Error::data(
            orphan,
            format!("{} masks for {} frames", mask_files.len(), frames.len()),
        ));
    }
    for p in frames.iter().chain(masks.iter()) {
        check_readable(p)?;
    }
    Ok(VideoRecord {
        video_id,
        frames,
        masks,
        split: layout.split,
        compressed: dir.join(COMPRESSED_MARKER).is_file(),
    })
}

/// Scan every video directory under `root`, ordered by video id.
pub fn scan_dataset(root: &Path, layout: &DatasetLayout) -> Result<Vec<VideoRecord>> {
    if !root.is_dir() {
        return Err(Error::data(root, "dataset root is not a directory"));
    }
    sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|p| scan_video(&p, layout))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, v: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::GrayImage::from_pixel(4, 4, image::Luma([v])).save(path).unwrap();
    }

    fn make_video(root: &Path, id: &str, n: usize) {
        for i in 0..n {
            write_png(&root.join(id).join("frames").join(format!("{i:05}.png")), 100);
            write_png(&root.join(id).join("masks").join(format!("{i:05}.png")), 255);
        }
    }

    #[test]
    fn well_formed_tree() {
        let dir = tempfile::tempdir().unwrap();
        make_video(dir.path(), "vid_b", 3);
        make_video(dir.path(), "vid_a", 2);
        fs::write(dir.path().join("README.txt"), "ignored").unwrap();
        let recs = scan_dataset(dir.path(), &DatasetLayout::default()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].video_id, "vid_a");
        assert_eq!(recs[1].len(), 3);
        for r in &recs {
            assert_eq!(r.frames.len(), r.masks.len());
            for (f, m) in r.frames.iter().zip(&r.masks) {
                assert_eq!(f.file_name(), m.file_name());
            }
            assert!(!r.compressed);
        }
    }

    #[test]
    fn missing_mask_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        make_video(dir.path(), "v", 3);
        fs::remove_file(dir.path().join("v/masks/00001.png")).unwrap();
        let err = scan_dataset(dir.path(), &DatasetLayout::default()).unwrap_err();
        assert!(err.to_string().contains("frames/00001.png"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn extra_mask_is_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        make_video(dir.path(), "v", 2);
        write_png(&dir.path().join("v/masks/00009.png"), 0);
        let err = scan_dataset(dir.path(), &DatasetLayout::default()).unwrap_err();
        assert!(err.to_string().contains("00009.png"), "{err}");
    }

    #[test]
    fn unreadable_frame_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        make_video(dir.path(), "v", 2);
        fs::write(dir.path().join("v/frames/00000.png"), b"not a png").unwrap();
        let err = scan_dataset(dir.path(), &DatasetLayout::default()).unwrap_err();
        assert!(err.to_string().contains("frames/00000.png"), "{err}");
    }

    #[test]
    fn empty_root_and_missing_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dataset(dir.path(), &DatasetLayout::default()).unwrap().is_empty());
        assert!(scan_dataset(&dir.path().join("nope"), &DatasetLayout::default()).is_err());
    }
}
