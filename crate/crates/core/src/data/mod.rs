//! Dataset ingestion, clip sampling and compression augmentation.

pub mod clip;
pub mod compress;
pub mod dataset;
pub mod mix;
pub mod synth;

pub use clip::{batch_tensors, clip_indices, load_frame, load_mask, sample_clip, Clip, ClipSample, Resolution, VideoFrames};
pub use compress::{compress_augment, compress_augment_with, CompressionMarker, Encoder};
pub use dataset::{scan_dataset, scan_video, DatasetLayout, Split, VideoRecord};
pub use mix::{compressed_selection, make_training_mix};
pub use synth::{synth_video, write_synthetic_dataset, SynthConfig};
