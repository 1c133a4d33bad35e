//! Position, channel and time self-attention over `(b, t, c, h, w)` feature
//! maps, and the stage-3 cross-modality fusion built from them.
//!
//! All three attentions are projection-free: the affinity is the raw dot
//! product of the attended vectors, passed through a temperature-1 softmax,
//! and the result is blended back as `beta * (M X) + X` with a learnable
//! scalar `beta` that starts at zero.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Init, ParamPath};

/// Attention result plus the row-stochastic map that produced it.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub data: Tensor,
    /// `(b * groups, n, n)` softmax map; rows sum to one.
    pub map: Tensor,
    pub beta: f64,
}

/// Attend over rows of `x: (g, n, d)`; returns `(M x, M)`.
fn attend_rows(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let scores = x.matmul(&x.t()?)?;
    let map = ops::softmax_last(&scores)?;
    Ok((map.matmul(x)?, map))
}

fn blend(beta: &Tensor, attended: &Tensor, x: &Tensor) -> Result<Tensor> {
    Ok(attended.broadcast_mul(beta)?.add(x)?)
}

/// Time attention: per channel, frames attend to frames using the
/// `h * w`-dimensional frame vectors.
pub fn time_attention(x: &Tensor, beta: &Tensor) -> Result<AttentionOutput> {
    let (b, t, c, h, w) = x.dims5()?;
    if t == 0 {
        return Err(Error::shape("time_attention", "T >= 1", t));
    }
    let xs = x.permute((0, 2, 1, 3, 4))?.contiguous()?.reshape((b * c, t, h * w))?;
    let (att, map) = attend_rows(&xs)?;
    let y = blend(beta, &att, &xs)?
        .reshape((b, c, t, h, w))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?;
    Ok(AttentionOutput {
        data: y,
        map,
        beta: ops::scalar(beta)?,
    })
}

/// Position attention: every spatiotemporal position attends to all
/// `t * h * w` positions using its channel vector.
pub fn position_attention(x: &Tensor, beta: &Tensor) -> Result<AttentionOutput> {
    let (b, t, c, h, w) = x.dims5()?;
    let n = t * h * w;
    let xs = x.permute((0, 1, 3, 4, 2))?.contiguous()?.reshape((b, n, c))?;
    let (att, map) = attend_rows(&xs)?;
    let y = blend(beta, &att, &xs)?
        .reshape((b, t, h, w, c))?
        .permute((0, 1, 4, 2, 3))?
        .contiguous()?;
    Ok(AttentionOutput {
        data: y,
        map,
        beta: ops::scalar(beta)?,
    })
}

/// Channel attention: each channel map attends to all channel maps.
pub fn channel_attention(x: &Tensor, beta: &Tensor) -> Result<AttentionOutput> {
    let (b, t, c, h, w) = x.dims5()?;
    let xs = x.permute((0, 2, 1, 3, 4))?.contiguous()?.reshape((b, c, t * h * w))?;
    let (att, map) = attend_rows(&xs)?;
    let y = blend(beta, &att, &xs)?
        .reshape((b, c, t, h, w))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?;
    Ok(AttentionOutput {
        data: y,
        map,
        beta: ops::scalar(beta)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Position,
    Channel,
    Time,
}

/// One attention instance with its own `beta`.
#[derive(Debug, Clone)]
pub struct Attention {
    kind: AttentionKind,
    beta: Tensor,
}

impl Attention {
    pub fn new(kind: AttentionKind, p: ParamPath) -> Result<Self> {
        Ok(Self {
            kind,
            beta: p.get("beta", &[1], Init::Zeros)?,
        })
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn forward_full(&self, x: &Tensor) -> Result<AttentionOutput> {
        match self.kind {
            AttentionKind::Position => position_attention(x, &self.beta),
            AttentionKind::Channel => channel_attention(x, &self.beta),
            AttentionKind::Time => time_attention(x, &self.beta),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_full(x)?.data)
    }
}

/// Post-fusion stage-3 features.
#[derive(Debug, Clone)]
pub struct FusedStagePair {
    /// RGB stream after fusion.
    pub f3_tilde: Tensor,
    /// Noise stream after fusion.
    pub fn3: Tensor,
}

/// Cross-modality attentive fusion.
///
/// ```text
/// F_t   = W_t  · mean_halves(TA(cat_time(F3, Fn3~)))
/// F3~   = W_rgb   · cat_ch(PA_rgb(F3),     CA_noise(Fn3~), F_t)
/// Fn3   = W_noise · cat_ch(PA_noise(Fn3~), CA_rgb(F3),     F_t)
/// ```
///
/// The time attention runs over the `2T`-frame concatenation; its two
/// halves are averaged back to `T` frames before the 1x1 projection.
#[derive(Debug, Clone)]
pub struct CrossModalityFusion {
    pub pa_rgb: Attention,
    pub pa_noise: Attention,
    pub ca_rgb: Attention,
    pub ca_noise: Attention,
    pub ta: Attention,
    pub conv_t: (Tensor, Tensor),
    pub conv_rgb: (Tensor, Tensor),
    pub conv_noise: (Tensor, Tensor),
    channels: usize,
}

impl CrossModalityFusion {
    pub fn new(channels: usize, p: ParamPath) -> Result<Self> {
        let conv = |name: &str, cin: usize| -> Result<(Tensor, Tensor)> {
            let q = p.pp(name);
            Ok((
                q.get("weight", &[channels, cin], Init::FanInUniform { fan_in: cin })?,
                q.get("bias", &[channels], Init::Zeros)?,
            ))
        };
        Ok(Self {
            pa_rgb: Attention::new(AttentionKind::Position, p.pp("pa_rgb"))?,
            pa_noise: Attention::new(AttentionKind::Position, p.pp("pa_noise"))?,
            ca_rgb: Attention::new(AttentionKind::Channel, p.pp("ca_rgb"))?,
            ca_noise: Attention::new(AttentionKind::Channel, p.pp("ca_noise"))?,
            ta: Attention::new(AttentionKind::Time, p.pp("ta"))?,
            conv_t: conv("conv_t", channels)?,
            conv_rgb: conv("conv_rgb", 3 * channels)?,
            conv_noise: conv("conv_noise", 3 * channels)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Shared temporal feature `F_t`.
    pub fn time_feature(&self, f3: &Tensor, fn3_tilde: &Tensor) -> Result<Tensor> {
        let t = f3.dim(1)?;
        let joint = self.ta.forward(&Tensor::cat(&[f3, fn3_tilde], 1)?)?;
        let merged = ((joint.narrow(1, 0, t)? + joint.narrow(1, t, t)?)? * 0.5)?;
        ops::pointwise(&merged, &self.conv_t.0, Some(&self.conv_t.1))
    }

    pub fn forward(&self, f3: &Tensor, fn3_tilde: &Tensor) -> Result<FusedStagePair> {
        if f3.dims() != fn3_tilde.dims() {
            return Err(Error::shape(
                "caf_fuse",
                format!("{:?}", f3.dims()),
                format!("{:?}", fn3_tilde.dims()),
            ));
        }
        let c = f3.dim(2)?;
        if c != self.channels {
            return Err(Error::shape("caf_fuse", format!("{} channels", self.channels), c));
        }
        let ft = self.time_feature(f3, fn3_tilde)?;
        let rgb_in = Tensor::cat(&[&self.pa_rgb.forward(f3)?, &self.ca_noise.forward(fn3_tilde)?, &ft], 2)?;
        let noise_in = Tensor::cat(&[&self.pa_noise.forward(fn3_tilde)?, &self.ca_rgb.forward(f3)?, &ft], 2)?;
        Ok(FusedStagePair {
            f3_tilde: ops::pointwise(&rgb_in, &self.conv_rgb.0, Some(&self.conv_rgb.1))?,
            fn3: ops::pointwise(&noise_in, &self.conv_noise.0, Some(&self.conv_noise.1))?,
        })
    }
}
