//! Video inpainting localization: a two-stream RGB/noise transformer with
//! cross-modality fusion and an attentive noise decoder.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod decoder;
pub mod error;
pub mod export;
pub mod model;
pub mod noise_residual;
pub mod objectives;
pub mod ops;
pub mod params;
pub mod train;

pub use candle_core::Device;
pub use error::{Error, Result};
pub use model::{ModelConfig, TruVil};
pub use params::ParamStore;
