//! Multi-scale MLP fusion and attentive noise decoding.

use candle_core::Tensor;

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::noise_residual::NoiseFeature;
use crate::ops::{self, Padding};
use crate::params::{Init, ParamPath};

/// Per-pixel inpainting probability for the middle frame of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, values in `[0, 1]`.
    pub probs: Vec<f32>,
    /// Index of the frame this map refers to within its clip.
    pub frame_index: usize,
}

/// Binary per-pixel field (ground-truth masks and binarized predictions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, each entry 0 or 1.
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("BinaryMask", width * height, data.len()));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(())
}

/// Pixels with `prob >= threshold` become 1.
pub fn binarize(map: &LocalizationMap, threshold: f64) -> Result<BinaryMask> {
    check_threshold(threshold)?;
    Ok(BinaryMask {
        width: map.width,
        height: map.height,
        data: map.probs.iter().map(|p| u8::from(*p as f64 >= threshold)).collect(),
    })
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(cin: usize, cout: usize, p: ParamPath) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[cout, cin], Init::FanInUniform { fan_in: cin })?,
            bias: p.get("bias", &[cout], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::pointwise(x, &self.weight, Some(&self.bias))
    }
}

/// Projects every pyramid member to a common width, resizes all of them to
/// the 1/4-scale grid, concatenates on channels and fuses with one more
/// linear layer.
#[derive(Debug, Clone)]
pub struct MlpFuse {
    lateral: Vec<Linear>,
    fuse: Linear,
    unified_channels: usize,
}

impl MlpFuse {
    pub fn new(member_channels: [usize; 5], unified_channels: usize, p: ParamPath) -> Result<Self> {
        if unified_channels == 0 {
            return Err(Error::InvalidArgument("unified_channels must be >= 1".into()));
        }
        let lateral = member_channels
            .iter()
            .enumerate()
            .map(|(i, c)| Linear::new(*c, unified_channels, p.pp(format!("lateral{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            lateral,
            fuse: Linear::new(5 * unified_channels, unified_channels, p.pp("fuse"))?,
            unified_channels,
        })
    }

    pub fn unified_channels(&self) -> usize {
        self.unified_channels
    }

    /// `members[0]` defines the 1/4-scale target grid.
    pub fn forward_members(&self, members: &[&Tensor]) -> Result<Tensor> {
        if members.len() != 5 {
            return Err(Error::shape("mlp_fuse", "5 pyramid members", members.len()));
        }
        let (_, _, _, h, w) = members[0].dims5()?;
        let resized = members
            .iter()
            .zip(&self.lateral)
            .map(|(m, lin)| ops::resize_trilinear(&lin.forward(m)?, h, w))
            .collect::<Result<Vec<_>>>()?;
        self.fuse.forward(&Tensor::cat(&resized, 2)?)
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        self.forward_members(&pyramid.members())
    }
}

/// Intermediate tensors of the attentive noise decoder for one frame.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub low: Tensor,
    pub high: Tensor,
    pub gate: Tensor,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor,
    bias: Tensor,
}

impl Conv {
    fn new(cin: usize, cout: usize, k: usize, p: ParamPath) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[cout, cin, k, k], Init::FanInUniform { fan_in: cin * k * k })?,
            bias: p.get("bias", &[cout], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d_same(x, &self.weight, Some(&self.bias), Padding::Zero)
    }
}

/// Gated fusion of full-resolution noise features with upsampled semantic
/// features.
///
/// ```text
/// L    = Conv3x3(F_n0)
/// H    = Upsample(F)
/// gate = sigmoid(Conv3x3([L, H]))      one spatial attention channel
/// K    = L * gate
/// map  = sigmoid(Proj1x1(Conv3x3(relu(Conv3x3([K, H])))))
/// ```
///
/// Every operator here acts frame by frame, so the middle-frame map is the
/// same whether the middle frame is selected before or after the decoder.
/// [`Self::forward`] selects first; [`Self::forward_all_frames`] keeps all
/// frames.
#[derive(Debug, Clone)]
pub struct AttentiveNoiseDecoder {
    low: Conv,
    gate: Conv,
    head1: Conv,
    head2: Conv,
    proj: Conv,
    low_channels: usize,
}

impl AttentiveNoiseDecoder {
    pub fn new(
        noise_channels: usize,
        unified_channels: usize,
        low_channels: usize,
        head_channels: usize,
        p: ParamPath,
    ) -> Result<Self> {
        let both = low_channels + unified_channels;
        Ok(Self {
            low: Conv::new(noise_channels, low_channels, 3, p.pp("low"))?,
            gate: Conv::new(both, 1, 3, p.pp("gate"))?,
            head1: Conv::new(both, head_channels, 3, p.pp("head1"))?,
            head2: Conv::new(head_channels, head_channels, 3, p.pp("head2"))?,
            proj: Conv::new(head_channels, 1, 1, p.pp("proj"))?,
            low_channels,
        })
    }

    pub fn low_channels(&self) -> usize {
        self.low_channels
    }

    /// Single-frame decode: `f: (n, c, h4, w4)`, `noise: (n, 3, h, w)`.
    pub fn decode_frame(&self, f: &Tensor, noise: &Tensor) -> Result<DecoderTrace> {
        let (n, _, h, w) = noise.dims4()?;
        let low = self.low.forward(noise)?;
        let high = ops::resize_bilinear(f, h, w)?;
        if high.dims()[..1] != [n] || high.dims()[2..] != low.dims()[2..] {
            return Err(Error::shape(
                "attentive_noise_decode",
                format!("{:?}", low.dims()),
                format!("{:?}", high.dims()),
            ));
        }
        let gate = ops::sigmoid(&self.gate.forward(&Tensor::cat(&[&low, &high], 1)?)?)?;
        let refined = low.broadcast_mul(&gate)?;
        let z = self.head1.forward(&Tensor::cat(&[&refined, &high], 1)?)?.relu()?;
        let z = self.head2.forward(&z)?;
        let probs = ops::sigmoid(&self.proj.forward(&z)?)?;
        Ok(DecoderTrace {
            low,
            high,
            gate,
            probs,
        })
    }

    /// `f: (b, t, c, h/4, w/4)`, `fn0: (b, t, 3, h, w)` -> middle-frame
    /// probabilities `(b, 1, h, w)`.
    pub fn forward(&self, f: &Tensor, fn0: &NoiseFeature) -> Result<Tensor> {
        Ok(self.forward_traced(f, fn0)?.probs)
    }

    pub fn forward_traced(&self, f: &Tensor, fn0: &NoiseFeature) -> Result<DecoderTrace> {
        let (b, t, _, _, _) = f.dims5()?;
        let (nb, nt, _, _, _) = fn0.data.dims5()?;
        if (b, t) != (nb, nt) {
            return Err(Error::shape("attentive_noise_decode", format!("({b}, {t})"), format!("({nb}, {nt})")));
        }
        let mid = t / 2;
        self.decode_frame(&f.narrow(1, mid, 1)?.squeeze(1)?, &fn0.data.narrow(1, mid, 1)?.squeeze(1)?)
    }

    /// Decode every frame: `(b, t, 1, h, w)`.
    pub fn forward_all_frames(&self, f: &Tensor, fn0: &NoiseFeature) -> Result<Tensor> {
        let (b, t, c, h4, w4) = f.dims5()?;
        let (_, _, nc, h, w) = fn0.data.dims5()?;
        let trace = self.decode_frame(
            &f.reshape((b * t, c, h4, w4))?,
            &fn0.data.reshape((b * t, nc, h, w))?,
        )?;
        Ok(trace.probs.reshape((b, t, 1, h, w))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(probs: Vec<f32>) -> LocalizationMap {
        LocalizationMap {
            width: probs.len(),
            height: 1,
            probs,
            frame_index: 0,
        }
    }

    #[test]
    fn binarize_boundary_and_range() {
        assert_eq!(binarize(&map(vec![0.7; 4]), 0.5).unwrap().data, vec![1; 4]);
        assert_eq!(binarize(&map(vec![0.5; 4]), 0.5).unwrap().data, vec![1; 4]);
        assert_eq!(binarize(&map(vec![0.49, 0.5, 0.51, 0.0]), 0.5).unwrap().data, vec![0, 1, 1, 0]);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(binarize(&map(vec![0.5]), bad).is_err());
        }
    }

    #[test]
    fn mask_validation() {
        assert!(BinaryMask::new(2, 2, vec![0, 1, 1]).is_err());
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
        let m = BinaryMask::new(2, 1, vec![0, 1]).unwrap();
        assert_eq!(m.inverted().data, vec![1, 0]);
    }
}
