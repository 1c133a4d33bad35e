//! Two-stream, four-stage spatiotemporal encoder.
//!
//! Each stage is a strided patch embedding followed by a stack of
//! Uniformer-style blocks:
//!
//! ```text
//! Y = DPE(X) + X
//! Z = MHRA(Norm(Y)) + Y
//! X_out = FFN(Norm(Z)) + Z
//! ```
//!
//! Stages 1-2 aggregate locally with a depthwise `3x5x5` convolution;
//! stages 3-4 run full spatiotemporal multi-head self-attention. Only the
//! spatial axes are strided; `T` is preserved throughout.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{CrossModalityFusion, FusedStagePair};
use crate::error::{Error, Result};
use crate::noise_residual::{inject_multiscale_noise, Hp3d, NoiseFeature};
use crate::ops;
use crate::params::{Init, ParamPath};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub depth: usize,
    pub channels: usize,
    pub aggregator: Aggregator,
    pub spatial_stride: usize,
}

pub const DEFAULT_DEPTHS: [usize; 4] = [5, 8, 20, 7];
pub const DEFAULT_WIDTHS: [usize; 4] = [64, 128, 320, 512];
pub const STAGE_STRIDES: [usize; 4] = [4, 2, 2, 2];

/// Stage specs for the given widths and depths: local aggregation in the
/// first two stages, global in the last two.
pub fn stage_specs(widths: [usize; 4], depths: [usize; 4]) -> [StageSpec; 4] {
    std::array::from_fn(|i| StageSpec {
        depth: depths[i],
        channels: widths[i],
        aggregator: if i < 2 { Aggregator::Local } else { Aggregator::Global },
        spatial_stride: STAGE_STRIDES[i],
    })
}

/// Block hyper-parameters that are not part of [`StageSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    pub mlp_ratio: usize,
    pub head_dim: usize,
    /// `(temporal, spatial)` window of the local aggregator.
    pub local_window: (usize, usize),
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            mlp_ratio: 4,
            head_dim: 64,
            local_window: (3, 5),
        }
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: Tensor,
    beta: Tensor,
}

impl Norm {
    fn new(c: usize, p: ParamPath) -> Result<Self> {
        Ok(Self {
            gamma: p.get("gamma", &[c], Init::Ones)?,
            beta: p.get("beta", &[c], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, 2, &self.gamma, &self.beta, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
struct Pointwise {
    weight: Tensor,
    bias: Tensor,
}

impl Pointwise {
    fn new(cin: usize, cout: usize, init: Init, p: ParamPath) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[cout, cin], init)?,
            bias: p.get("bias", &[cout], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::pointwise(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
enum Mhra {
    Local {
        value: Pointwise,
        window: Tensor,
        window_bias: Tensor,
        proj: Pointwise,
    },
    Global {
        qkv: Tensor,
        qkv_bias: Tensor,
        proj: Pointwise,
        heads: usize,
    },
}

impl Mhra {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Mhra::Local {
                value,
                window,
                window_bias,
                proj,
            } => {
                let v = value.forward(x)?;
                let agg = ops::depthwise_conv3d(&v, window, Some(window_bias))?;
                proj.forward(&agg)
            }
            Mhra::Global { proj, .. } => {
                let (out, _) = self.global_attention(x)?;
                proj.forward(&out)
            }
        }
    }

    /// Multi-head attention output before the output projection, and the
    /// `(b, heads, n, n)` attention map.
    fn global_attention(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let Mhra::Global {
            qkv, qkv_bias, heads, ..
        } = self
        else {
            return Err(Error::InvalidArgument("local aggregator has no attention map".into()));
        };
        let (b, t, c, h, w) = x.dims5()?;
        let n = t * h * w;
        let dh = c / heads;
        let tokens = x.permute((0, 1, 3, 4, 2))?.contiguous()?.reshape((b, n, c))?;
        let proj = tokens
            .broadcast_matmul(&qkv.t()?)?
            .broadcast_add(qkv_bias)?
            .reshape((b, n, 3, *heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = proj.get(0)?.contiguous()?;
        let k = proj.get(1)?.contiguous()?;
        let v = proj.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let map = ops::softmax_last(&scores)?;
        let out = map
            .matmul(&v)?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b, t, h, w, c))?
            .permute((0, 1, 4, 2, 3))?
            .contiguous()?;
        Ok((out, map))
    }
}

/// One Uniformer block.
#[derive(Debug, Clone)]
pub struct UniformerBlock {
    spec: StageSpec,
    dpe: Tensor,
    dpe_bias: Tensor,
    norm1: Norm,
    mhra: Mhra,
    norm2: Norm,
    fc1: Pointwise,
    fc2: Pointwise,
}

impl UniformerBlock {
    pub fn new(spec: StageSpec, opts: BlockOptions, p: ParamPath) -> Result<Self> {
        let c = spec.channels;
        let mhra = match spec.aggregator {
            Aggregator::Local => {
                let (kt, ks) = opts.local_window;
                let q = p.pp("mhra");
                Mhra::Local {
                    value: Pointwise::new(c, c, Init::FanInUniform { fan_in: c }, q.pp("value"))?,
                    window: q.get("window", &[c, kt, ks, ks], Init::FanInUniform { fan_in: kt * ks * ks })?,
                    window_bias: q.get("window_bias", &[c], Init::Zeros)?,
                    proj: Pointwise::new(c, c, Init::FanInUniform { fan_in: c }, q.pp("proj"))?,
                }
            }
            Aggregator::Global => {
                let heads = (c / opts.head_dim).max(1);
                if !c.is_multiple_of(heads) {
                    return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
                }
                let q = p.pp("mhra");
                Mhra::Global {
                    qkv: q.get("qkv", &[3 * c, c], Init::Normal { std: 0.02 })?,
                    qkv_bias: q.get("qkv_bias", &[3 * c], Init::Zeros)?,
                    proj: Pointwise::new(c, c, Init::Normal { std: 0.02 }, q.pp("proj"))?,
                    heads,
                }
            }
        };
        let hidden = opts.mlp_ratio * c;
        Ok(Self {
            spec,
            dpe: p.get("dpe.weight", &[c, 3, 3, 3], Init::Zeros)?,
            dpe_bias: p.get("dpe.bias", &[c], Init::Zeros)?,
            norm1: Norm::new(c, p.pp("norm1"))?,
            mhra,
            norm2: Norm::new(c, p.pp("norm2"))?,
            fc1: Pointwise::new(c, hidden, Init::Normal { std: 0.02 }, p.pp("ffn.fc1"))?,
            fc2: Pointwise::new(hidden, c, Init::Normal { std: 0.02 }, p.pp("ffn.fc2"))?,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let c = x.dim(2)?;
        if c != self.spec.channels {
            return Err(Error::shape("uniformer_block", format!("{} channels", self.spec.channels), c));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.dims5()?;
        self.check(x)?;
        let y = (ops::depthwise_conv3d(x, &self.dpe, Some(&self.dpe_bias))? + x)?;
        let z = (self.mhra.forward(&self.norm1.forward(&y)?)? + &y)?;
        let hidden = self.fc1.forward(&self.norm2.forward(&z)?)?.gelu_erf()?;
        Ok((self.fc2.forward(&hidden)? + z)?)
    }

    /// Attention map of the global aggregator for the block input `x`
    /// (the map the block uses internally).
    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let y = (ops::depthwise_conv3d(x, &self.dpe, Some(&self.dpe_bias))? + x)?;
        Ok(self.mhra.global_attention(&self.norm1.forward(&y)?)?.1)
    }
}

/// Patch embedding plus block stack.
#[derive(Debug, Clone)]
pub struct Stage {
    spec: StageSpec,
    in_channels: usize,
    embed: Tensor,
    embed_bias: Tensor,
    embed_norm: Norm,
    blocks: Vec<UniformerBlock>,
}

impl Stage {
    pub fn new(in_channels: usize, spec: StageSpec, opts: BlockOptions, p: ParamPath) -> Result<Self> {
        let s = spec.spatial_stride;
        let blocks = (0..spec.depth)
            .map(|i| UniformerBlock::new(spec, opts, p.pp(format!("block{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            in_channels,
            embed: p.get(
                "embed.weight",
                &[spec.channels, in_channels, s, s],
                Init::FanInUniform { fan_in: in_channels * s * s },
            )?,
            embed_bias: p.get("embed.bias", &[spec.channels], Init::Zeros)?,
            embed_norm: Norm::new(spec.channels, p.pp("embed.norm"))?,
            blocks,
        })
    }

    pub fn spec(&self) -> &StageSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[UniformerBlock] {
        &self.blocks
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(2)?;
        if c != self.in_channels {
            return Err(Error::shape("stage embed", format!("{} channels", self.in_channels), c));
        }
        let s = self.spec.spatial_stride;
        let y = ops::per_frame(x, |f| ops::patch_embed(f, &self.embed, Some(&self.embed_bias), s))?;
        self.embed_norm.forward(&y)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.embed(x)?;
        for block in &self.blocks {
            y = block.forward(&y)?;
        }
        Ok(y)
    }
}

/// Encoder outputs consumed by the decoder: noise features at 1/4, 1/8,
/// 1/16 and 1/32 scale plus the final RGB feature at 1/32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub f_n1: NoiseFeature,
    pub f_n2: NoiseFeature,
    pub f_n3: NoiseFeature,
    pub f_n4_tilde: NoiseFeature,
    pub f4: Tensor,
}

impl FeaturePyramid {
    /// Members in decoder order.
    pub fn members(&self) -> [&Tensor; 5] {
        [
            &self.f_n1.data,
            &self.f_n2.data,
            &self.f_n3.data,
            &self.f_n4_tilde.data,
            &self.f4,
        ]
    }
}

/// Intermediate features, for inspection.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub rgb1: Tensor,
    pub rgb2: Tensor,
    pub rgb3: Tensor,
    pub noise3_tilde: Tensor,
    pub fused: FusedStagePair,
    pub pyramid: FeaturePyramid,
}

/// RGB and noise streams with separately learned weights, noise injection
/// after stages 1-2, and cross-modality fusion after stage 3.
#[derive(Debug, Clone)]
pub struct TwoStreamEncoder {
    rgb: Vec<Stage>,
    noise: Vec<Stage>,
    inject: Vec<Hp3d>,
    fusion: CrossModalityFusion,
    specs: [StageSpec; 4],
}

impl TwoStreamEncoder {
    pub fn new(specs: [StageSpec; 4], opts: BlockOptions, p: ParamPath) -> Result<Self> {
        let mut rgb = Vec::with_capacity(4);
        let mut noise = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, spec) in specs.iter().enumerate() {
            rgb.push(Stage::new(cin, *spec, opts, p.pp(format!("rgb.stage{}", i + 1)))?);
            noise.push(Stage::new(cin, *spec, opts, p.pp(format!("noise.stage{}", i + 1)))?);
            cin = spec.channels;
        }
        let inject = (0..2)
            .map(|i| Hp3d::new(specs[i].channels, p.pp(format!("mne.hp3d{}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(Self {
            rgb,
            noise,
            inject,
            fusion: CrossModalityFusion::new(specs[2].channels, p.pp("caf"))?,
            specs,
        })
    }

    pub fn specs(&self) -> &[StageSpec; 4] {
        &self.specs
    }

    pub fn fusion(&self) -> &CrossModalityFusion {
        &self.fusion
    }

    pub fn rgb_stages(&self) -> &[Stage] {
        &self.rgb
    }

    pub fn encode_two_stream(&self, f0: &Tensor, fn0: &NoiseFeature) -> Result<FeaturePyramid> {
        Ok(self.encode_traced(f0, fn0)?.pyramid)
    }

    pub fn encode_traced(&self, f0: &Tensor, fn0: &NoiseFeature) -> Result<EncoderTrace> {
        let (_, t, c, h, w) = f0.dims5()?;
        if f0.dims() != fn0.data.dims() {
            return Err(Error::shape(
                "encode_two_stream",
                format!("{:?}", f0.dims()),
                format!("{:?}", fn0.data.dims()),
            ));
        }
        if t == 0 {
            return Err(Error::shape("encode_two_stream", "T >= 1", t));
        }
        if c != 3 {
            return Err(Error::shape("encode_two_stream", "3 input channels", c));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("clip has zero-sized spatial dims".into()));
        }

        let rgb1 = self.rgb[0].forward(f0)?;
        let n1 = inject_multiscale_noise(&self.inject[0], &rgb1, &self.noise[0].forward(&fn0.data)?)?;
        let rgb2 = self.rgb[1].forward(&rgb1)?;
        let n2 = inject_multiscale_noise(&self.inject[1], &rgb2, &self.noise[1].forward(&n1)?)?;
        let rgb3 = self.rgb[2].forward(&rgb2)?;
        let noise3_tilde = self.noise[2].forward(&n2)?;
        let fused = self.fusion.forward(&rgb3, &noise3_tilde)?;
        let f4 = self.rgb[3].forward(&fused.f3_tilde)?;
        let n4 = self.noise[3].forward(&fused.fn3)?;
        let pyramid = FeaturePyramid {
            f_n1: NoiseFeature { data: n1, source_scale: 1 },
            f_n2: NoiseFeature { data: n2, source_scale: 2 },
            f_n3: NoiseFeature {
                data: fused.fn3.clone(),
                source_scale: 3,
            },
            f_n4_tilde: NoiseFeature { data: n4, source_scale: 4 },
            f4,
        };
        Ok(EncoderTrace {
            rgb1,
            rgb2,
            rgb3,
            noise3_tilde,
            fused,
            pyramid,
        })
    }
}

/// Spatial size of each pyramid level for an `h x w` input under the
/// ceil-mode stride rule.
pub fn pyramid_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
    let mut out = [(0, 0); 4];
    let (mut hh, mut ww) = (h, w);
    for (i, s) in STAGE_STRIDES.iter().enumerate() {
        hh = ops::ceil_div(hh, *s);
        ww = ops::ceil_div(ww, *s);
        out[i] = (hh, ww);
    }
    out
}
