use std::fs;

use candle_core::{DType, Device};
use truvil_core::data::{
    batch_tensors, clip_indices, compress_augment_with, compressed_selection, load_frame, load_mask, make_training_mix,
    sample_clip, scan_dataset, synth_video, write_synthetic_dataset, DatasetLayout, Encoder, Resolution, Split,
    SynthConfig, VideoFrames, VideoRecord,
};
use truvil_core::Error;

fn small_synth(videos: usize) -> SynthConfig {
    SynthConfig {
        videos,
        frames: 6,
        width: 40,
        height: 32,
        min_side: 8,
        max_side: 12,
        ..Default::default()
    }
}

fn encoder() -> Encoder {
    Encoder::locate().expect("an ffmpeg with libx264 is required for these tests")
}

fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse: f64 = a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[test]
fn synthetic_tree_scans_back() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_synthetic_dataset(dir.path(), &small_synth(3), Split::Train).unwrap();
    let scanned = scan_dataset(dir.path(), &DatasetLayout::default()).unwrap();
    assert_eq!(written, scanned);
    assert_eq!(scanned.len(), 3);
    for r in &scanned {
        assert_eq!(r.len(), 6);
        assert!(!r.compressed);
    }
    // masks on disk match the generator
    let (_, masks) = synth_video(&small_synth(3), 1).unwrap();
    for (i, want) in masks.iter().enumerate() {
        let got = load_mask(&scanned[1].masks[i], None).unwrap();
        assert_eq!(&got.data, want);
        assert!(got.positives() > 0);
    }
}

#[test]
fn clip_mask_belongs_to_center_frame() {
    let dir = tempfile::tempdir().unwrap();
    let recs = write_synthetic_dataset(dir.path(), &small_synth(1), Split::Train).unwrap();
    let rec = &recs[0];
    for center in 0..rec.len() {
        let s = sample_clip(rec, center, 5, None).unwrap();
        assert_eq!((s.clip.t, s.clip.height, s.clip.width), (5, 32, 40));
        assert_eq!(s.mask, load_mask(&rec.masks[center], None).unwrap());
        let idx = clip_indices(center, 5, rec.len()).unwrap();
        assert_eq!(idx[2], center);
        for (k, i) in idx.iter().enumerate() {
            let (frame, _) = load_frame(&rec.frames[*i], None).unwrap();
            assert_eq!(s.clip.frame(k), frame.as_slice());
        }
    }
    let frames = VideoFrames::load(rec, None).unwrap();
    assert_eq!(frames.clip_at(0, 5).unwrap().clip.data, sample_clip(rec, 0, 5, None).unwrap().clip.data);
}

#[test]
fn resized_sampling_and_batching() {
    let dir = tempfile::tempdir().unwrap();
    let recs = write_synthetic_dataset(dir.path(), &small_synth(2), Split::Train).unwrap();
    let res = Resolution { width: 20, height: 16 };
    let samples: Vec<_> = recs.iter().map(|r| sample_clip(r, 3, 5, Some(res)).unwrap()).collect();
    assert_eq!((samples[0].mask.width, samples[0].mask.height), (20, 16));
    assert!(samples[0].mask.data.iter().all(|v| *v <= 1));
    let (clips, masks) = batch_tensors(&samples, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(clips.dims(), &[2, 5, 3, 16, 20]);
    assert_eq!(masks.dims(), &[2, 1, 16, 20]);
    let v = clips.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    assert!(batch_tensors(&[], DType::F32, &Device::Cpu).is_err());
}

#[test]
fn video_shorter_than_clip_reflects() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { frames: 2, ..small_synth(1) };
    let recs = write_synthetic_dataset(dir.path(), &cfg, Split::Train).unwrap();
    let s = sample_clip(&recs[0], 0, 5, None).unwrap();
    assert_eq!(s.clip.t, 5);
    assert_eq!(s.clip.frame(0), s.clip.frame(4));
    assert_eq!(s.clip.frame(1), s.clip.frame(3));
}

#[test]
fn malformed_trees_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), &small_synth(2), Split::Train).unwrap();
    fs::remove_dir_all(dir.path().join("synth_001/masks")).unwrap();
    let err = scan_dataset(dir.path(), &DatasetLayout::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("synth_001/masks"), "{err}");
}

fn frames_of(rec: &VideoRecord) -> Vec<Vec<f32>> {
    rec.frames.iter().map(|p| load_frame(p, None).unwrap().0).collect()
}

#[test]
fn lossless_crf_round_trip_is_near_exact() {
    let dir = tempfile::tempdir().unwrap();
    let recs = write_synthetic_dataset(&dir.path().join("src"), &small_synth(1), Split::Train).unwrap();
    let out = compress_augment_with(&encoder(), &recs[0], 0, &dir.path().join("c0")).unwrap();
    assert!(out.compressed);
    for (a, b) in frames_of(&recs[0]).iter().zip(frames_of(&out)) {
        let p = psnr(a, &b);
        assert!(p >= 45.0, "psnr {p:.2} dB");
    }
}

#[test]
fn lossy_round_trips_keep_count_size_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        width: 41,
        height: 33,
        ..small_synth(1)
    };
    let recs = write_synthetic_dataset(&dir.path().join("src"), &cfg, Split::Train).unwrap();
    let enc = encoder();
    let mut prev = f64::INFINITY;
    for crf in [18, 23, 28] {
        let work = dir.path().join(format!("crf{crf}"));
        let out = compress_augment_with(&enc, &recs[0], crf, &work).unwrap();
        assert_eq!(out.len(), recs[0].len());
        for (src, dst) in recs[0].frames.iter().zip(&out.frames) {
            assert_eq!(image::image_dimensions(src).unwrap(), image::image_dimensions(dst).unwrap());
            assert_eq!(src.file_name(), dst.file_name());
        }
        for (src, dst) in recs[0].masks.iter().zip(&out.masks) {
            assert_eq!(fs::read(src).unwrap(), fs::read(dst).unwrap());
        }
        assert!(!work.join("synth_000/.stage").exists());
        let rescanned = scan_dataset(&work, &DatasetLayout::default()).unwrap();
        assert!(rescanned[0].compressed);
        let mean: f64 = frames_of(&recs[0]).iter().zip(frames_of(&out)).map(|(a, b)| psnr(a, &b)).sum::<f64>()
            / out.len() as f64;
        assert!(mean <= prev + 1e-9, "crf {crf}: {mean:.2} dB after {prev:.2} dB");
        prev = mean;
    }
}

#[test]
fn out_of_range_crf_never_reaches_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let recs = write_synthetic_dataset(&dir.path().join("src"), &small_synth(1), Split::Train).unwrap();
    let err = compress_augment_with(&Encoder::new("/nonexistent/ffmpeg"), &recs[0], 60, &dir.path().join("w")).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(!dir.path().join("w").exists());
}

#[test]
fn training_mix_replaces_a_seeded_quarter() {
    let ids: Vec<String> = (0..20).map(|i| format!("v{i:02}")).collect();
    let mix = make_training_mix(&ids, 0.25, 9, |id| Ok(format!("{id}+c"))).unwrap();
    assert_eq!(mix.len(), 20);
    let marked: Vec<_> = mix.iter().filter(|s| s.ends_with("+c")).collect();
    assert_eq!(marked.len(), 5);
    let sel = compressed_selection(20, 0.25, 9).unwrap();
    for (i, s) in mix.iter().enumerate() {
        assert_eq!(s.ends_with("+c"), sel.contains(&i));
        assert!(s.starts_with(&ids[i]));
    }
    assert_eq!(sel, compressed_selection(20, 0.25, 9).unwrap());
    assert!(compressed_selection(20, 1.5, 9).is_err());
    assert!(compressed_selection(20, 0.0, 9).unwrap().is_empty());
}

#[test]
fn synth_is_seeded() {
    let cfg = small_synth(2);
    assert_eq!(synth_video(&cfg, 0).unwrap(), synth_video(&cfg, 0).unwrap());
    assert_ne!(synth_video(&cfg, 0).unwrap().1, synth_video(&cfg, 1).unwrap().1);
    let other = SynthConfig { seed: 5, ..cfg.clone() };
    assert_ne!(synth_video(&cfg, 0).unwrap().0, synth_video(&other, 0).unwrap().0);
}
