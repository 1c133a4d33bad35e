//! Full localization network.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{self, BlockOptions, FeaturePyramid, StageSpec, TwoStreamEncoder};
use crate::decoder::{AttentiveNoiseDecoder, LocalizationMap, MlpFuse};
use crate::error::{Error, Result};
use crate::noise_residual::{Hp3d, NoiseFeature};
use crate::params::ParamStore;

/// Architecture hyper-parameters. Everything here feeds the fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub unified_channels: usize,
    pub low_channels: usize,
    pub head_channels: usize,
    pub clip_len: usize,
    pub block: BlockOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: backbone::DEFAULT_WIDTHS,
            depths: backbone::DEFAULT_DEPTHS,
            unified_channels: 256,
            low_channels: 32,
            head_channels: 64,
            clip_len: 5,
            block: BlockOptions::default(),
        }
    }
}

impl ModelConfig {
    /// Small preset used for desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            widths: [16, 32, 48, 64],
            depths: [1, 1, 2, 1],
            unified_channels: 32,
            low_channels: 16,
            head_channels: 16,
            clip_len: 5,
            block: BlockOptions::default(),
        }
    }

    pub fn stage_specs(&self) -> [StageSpec; 4] {
        backbone::stage_specs(self.widths, self.depths)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("stage widths must be >= 1".into()));
        }
        if self.unified_channels == 0 || self.low_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("decoder widths must be >= 1".into()));
        }
        if self.clip_len == 0 || self.clip_len.is_multiple_of(2) {
            return Err(Error::Config(format!("clip length {} must be odd", self.clip_len)));
        }
        for w in &self.widths[2..] {
            let heads = (w / self.block.head_dim).max(1);
            if w % heads != 0 {
                return Err(Error::Config(format!("width {w} does not split into {heads} heads")));
            }
        }
        Ok(())
    }

    /// Short stable hash identifying the architecture.
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Network outputs for a batch of clips.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub noise0: NoiseFeature,
    pub pyramid: FeaturePyramid,
    pub fused: Tensor,
    /// Middle-frame probabilities `(b, 1, h, w)`.
    pub probs: Tensor,
}

/// Input high-pass layer, two-stream encoder, MLP fusion and attentive
/// noise decoder.
#[derive(Debug, Clone)]
pub struct TruVil {
    config: ModelConfig,
    input_hp3d: Hp3d,
    encoder: TwoStreamEncoder,
    mlp: MlpFuse,
    decoder: AttentiveNoiseDecoder,
}

impl TruVil {
    pub fn new(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        let specs = config.stage_specs();
        let w = config.widths;
        Ok(Self {
            config: config.clone(),
            input_hp3d: Hp3d::new(3, root.pp("input_hp3d"))?,
            encoder: TwoStreamEncoder::new(specs, config.block, root.pp("encoder"))?,
            mlp: MlpFuse::new([w[0], w[1], w[2], w[3], w[3]], config.unified_channels, root.pp("mlp"))?,
            decoder: AttentiveNoiseDecoder::new(
                3,
                config.unified_channels,
                config.low_channels,
                config.head_channels,
                root.pp("decoder"),
            )?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &TwoStreamEncoder {
        &self.encoder
    }

    pub fn mlp(&self) -> &MlpFuse {
        &self.mlp
    }

    pub fn decoder(&self) -> &AttentiveNoiseDecoder {
        &self.decoder
    }

    pub fn input_hp3d(&self) -> &Hp3d {
        &self.input_hp3d
    }

    /// Overwrite every noise-stream stage parameter with its RGB-stream
    /// counterpart.
    pub fn copy_rgb_to_noise(&self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.vars() {
            if let Some(rest) = name.strip_prefix("encoder.noise.") {
                let src = store
                    .get(&format!("encoder.rgb.{rest}"))
                    .ok_or_else(|| Error::Config(format!("no RGB counterpart for {name}")))?;
                var.set(&src.as_tensor().copy()?)?;
            }
        }
        Ok(())
    }

    /// `clip: (b, t, 3, h, w)` with values in `[0, 1]`.
    pub fn forward_full(&self, clip: &Tensor) -> Result<ForwardOutput> {
        let (_, t, c, _, _) = clip.dims5()?;
        if c != 3 {
            return Err(Error::shape("TruVil::forward", "3 channels", c));
        }
        if t != self.config.clip_len {
            return Err(Error::shape("TruVil::forward", format!("T = {}", self.config.clip_len), t));
        }
        let noise0 = NoiseFeature {
            data: self.input_hp3d.forward(clip)?,
            source_scale: 0,
        };
        let pyramid = self.encoder.encode_two_stream(clip, &noise0)?;
        let fused = self.mlp.forward(&pyramid)?;
        let probs = self.decoder.forward(&fused, &noise0)?;
        Ok(ForwardOutput {
            noise0,
            pyramid,
            fused,
            probs,
        })
    }

    pub fn forward(&self, clip: &Tensor) -> Result<Tensor> {
        Ok(self.forward_full(clip)?.probs)
    }

    /// Middle-frame maps, one per clip in the batch.
    pub fn localize(&self, clip: &Tensor) -> Result<Vec<LocalizationMap>> {
        let (b, t, _, h, w) = clip.dims5()?;
        let probs = self.forward(clip)?.to_dtype(candle_core::DType::F32)?;
        (0..b)
            .map(|i| {
                Ok(LocalizationMap {
                    width: w,
                    height: h,
                    probs: probs.get(i)?.flatten_all()?.to_vec1::<f32>()?,
                    frame_index: t / 2,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = ModelConfig::toy();
        let mut b = ModelConfig::toy();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.unified_channels += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn noise_stream_copy() {
        let store = ParamStore::new(1, candle_core::DType::F32, &candle_core::Device::Cpu);
        let model = TruVil::new(&ModelConfig::toy(), &store).unwrap();
        let a = store.get("encoder.rgb.stage2.embed.weight").unwrap();
        let b = store.get("encoder.noise.stage2.embed.weight").unwrap();
        let diff = |x: &candle_core::Var, y: &candle_core::Var| {
            (x.as_tensor() - y.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap()
        };
        assert!(diff(&a, &b) > 0.0);
        model.copy_rgb_to_noise(&store).unwrap();
        assert_eq!(diff(&a, &b), 0.0);
        // still separate storage
        a.set(&a.zeros_like().unwrap()).unwrap();
        assert!(diff(&a, &b) > 0.0);
    }

    #[test]
    fn even_clip_length_rejected() {
        let mut c = ModelConfig::toy();
        c.clip_len = 4;
        assert!(c.validate().is_err());
    }
}
