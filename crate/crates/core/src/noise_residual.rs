//! Fixed high-pass residual filters and the layer that applies them to
//! spatiotemporal feature maps.
//!
//! An [`Hp3d`] layer reduces its input to three channels with a learnable
//! 1x1 projection, filters channel `k` with fixed kernel `k` frame by frame
//! (reflect padding, no temporal taps), and restores the original width
//! with a second learnable 1x1 projection. Neither projection has a bias, so
//! the whole layer annihilates constant inputs.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{Device, DType, Tensor};

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::params::{Init, ParamPath};

/// Spatial support every kernel is embedded in.
pub const KERNEL_SIZE: usize = 5;

/// Integer numerators of the three residual kernels, row-major 5x5.
const KERNEL_NUMERATORS: [[i32; 25]; 3] = [
    // 3x3 edge residual, embedded in 5x5
    [
        0, 0, 0, 0, 0, //
        0, -1, 2, -1, 0, //
        0, 2, -4, 2, 0, //
        0, -1, 2, -1, 0, //
        0, 0, 0, 0, 0,
    ],
    // 5x5 square residual
    [
        -1, 2, -2, 2, -1, //
        2, -6, 8, -6, 2, //
        -2, 8, -12, 8, -2, //
        2, -6, 8, -6, 2, //
        -1, 2, -2, 2, -1,
    ],
    // horizontal second-order residual
    [
        0, 0, 0, 0, 0, //
        0, 0, 0, 0, 0, //
        0, 1, -2, 1, 0, //
        0, 0, 0, 0, 0, //
        0, 0, 0, 0, 0,
    ],
];
const KERNEL_DIVISORS: [f64; 3] = [4.0, 12.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualKernel {
    pub numerators: [i32; KERNEL_SIZE * KERNEL_SIZE],
    pub divisor: f64,
}

impl ResidualKernel {
    /// Normalized kernel values, row-major.
    pub fn values(&self) -> [f64; KERNEL_SIZE * KERNEL_SIZE] {
        let mut out = [0.0; KERNEL_SIZE * KERNEL_SIZE];
        for (o, n) in out.iter_mut().zip(self.numerators.iter()) {
            *o = *n as f64 / self.divisor;
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.values().iter().sum()
    }
}

/// The three fixed high-pass kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct SrmKernelBank {
    kernels: [ResidualKernel; 3],
}

/// The canonical bank.
pub fn srm_kernel_bank() -> SrmKernelBank {
    SrmKernelBank {
        kernels: std::array::from_fn(|k| ResidualKernel {
            numerators: KERNEL_NUMERATORS[k],
            divisor: KERNEL_DIVISORS[k],
        }),
    }
}

impl SrmKernelBank {
    pub fn from_kernels(kernels: [ResidualKernel; 3]) -> Result<Self> {
        for (k, kernel) in kernels.iter().enumerate() {
            if kernel.divisor == 0.0 || !kernel.divisor.is_finite() {
                return Err(Error::InvalidArgument(format!("kernel {k} has divisor {}", kernel.divisor)));
            }
            if kernel.numerators.iter().sum::<i32>() != 0 {
                return Err(Error::InvalidArgument(format!("kernel {k} is not zero-sum")));
            }
        }
        Ok(Self { kernels })
    }

    pub fn kernels(&self) -> &[ResidualKernel; 3] {
        &self.kernels
    }

    /// Weight tensor `(3, 3, 5, 5)` applying kernel `k` to channel `k` only.
    pub fn weight(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let kk = KERNEL_SIZE * KERNEL_SIZE;
        let mut w = vec![0.0f64; 3 * 3 * kk];
        for (k, kernel) in self.kernels.iter().enumerate() {
            let base = (k * 3 + k) * kk;
            w[base..base + kk].copy_from_slice(&kernel.values());
        }
        Ok(Tensor::from_vec(w, (3, 3, KERNEL_SIZE, KERNEL_SIZE), device)?.to_dtype(dtype)?)
    }

    /// Fixed-filter stage: `(b, t, 3, h, w)` in, same shape out.
    pub fn filter(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, c, h, w) = x.dims5()?;
        if c != 3 {
            return Err(Error::shape("SrmKernelBank::filter", "3 channels", c));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("zero-sized spatial dims".into()));
        }
        let weight = self.weight(x.dtype(), x.device())?;
        ops::per_frame(x, |f| ops::conv2d_same(f, &weight, None, Padding::Reflect))
    }

    /// Plain-text form: one block per kernel, a `kernel 5x5 divisor D`
    /// header followed by five rows of integer numerators, blocks separated
    /// by blank lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, kernel) in self.kernels.iter().enumerate() {
            if k > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "kernel {KERNEL_SIZE}x{KERNEL_SIZE} divisor {}", kernel.divisor);
            for row in kernel.numerators.chunks(KERNEL_SIZE) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("kernel file: {msg}"));
        let mut kernels = Vec::new();
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        while let Some(header) = lines.next() {
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "kernel" || parts[2] != "divisor" {
                return Err(bad(format!("bad header {header:?}")));
            }
            if parts[1] != format!("{KERNEL_SIZE}x{KERNEL_SIZE}") {
                return Err(bad(format!("unsupported kernel size {}", parts[1])));
            }
            let divisor: f64 = parts[3].parse().map_err(|_| bad(format!("bad divisor {}", parts[3])))?;
            let mut numerators = [0i32; KERNEL_SIZE * KERNEL_SIZE];
            for r in 0..KERNEL_SIZE {
                let row = lines.next().ok_or_else(|| bad("truncated kernel".into()))?;
                let vals: Vec<i32> = row
                    .split_whitespace()
                    .map(|v| v.parse::<i32>().map_err(|_| bad(format!("bad entry {v:?}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != KERNEL_SIZE {
                    return Err(bad(format!("row {r} has {} entries", vals.len())));
                }
                numerators[r * KERNEL_SIZE..(r + 1) * KERNEL_SIZE].copy_from_slice(&vals);
            }
            kernels.push(ResidualKernel { numerators, divisor });
        }
        let kernels: [ResidualKernel; 3] = kernels
            .try_into()
            .map_err(|v: Vec<_>| bad(format!("expected 3 kernels, found {}", v.len())))?;
        Self::from_kernels(kernels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Noise-domain feature tagged with the stage it was taken from
/// (0 = input frames).
#[derive(Debug, Clone)]
pub struct NoiseFeature {
    pub data: Tensor,
    pub source_scale: usize,
}

/// High-pass layer: learnable 1x1 reduce to 3 channels, fixed residual
/// filters, learnable 1x1 restore.
#[derive(Debug, Clone)]
pub struct Hp3d {
    reduce: Tensor,
    restore: Tensor,
    bank: SrmKernelBank,
    channels: usize,
}

impl Hp3d {
    /// For `channels == 3` both projections start as the identity, so the
    /// layer initially emits the raw residuals.
    pub fn new(channels: usize, p: ParamPath) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("HP3D needs at least one channel".into()));
        }
        let (reduce_init, restore_init) = if channels == 3 {
            (Init::Identity, Init::Identity)
        } else {
            (Init::FanInUniform { fan_in: channels }, Init::FanInUniform { fan_in: 3 })
        };
        Ok(Self {
            reduce: p.get("reduce", &[3, channels], reduce_init)?,
            restore: p.get("restore", &[channels, 3], restore_init)?,
            bank: srm_kernel_bank(),
            channels,
        })
    }

    pub fn bank(&self) -> &SrmKernelBank {
        &self.bank
    }

    /// Output before the restore projection: `(b, t, 3, h, w)`.
    pub fn residuals(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, c, h, w) = x.dims5()?;
        if c != self.channels {
            return Err(Error::shape("Hp3d", format!("{} channels", self.channels), c));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("HP3D input has zero-sized spatial dims".into()));
        }
        let reduced = ops::pointwise(x, &self.reduce, None)?;
        self.bank.filter(&reduced)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::pointwise(&self.residuals(x)?, &self.restore, None)
    }
}

/// Multi-scale noise injection: `noise_tilde + hp3d(rgb)`.
pub fn inject_multiscale_noise(hp3d: &Hp3d, f_rgb: &Tensor, f_noise_tilde: &Tensor) -> Result<Tensor> {
    if f_rgb.dims() != f_noise_tilde.dims() {
        return Err(Error::shape(
            "inject_multiscale_noise",
            format!("{:?}", f_rgb.dims()),
            format!("{:?}", f_noise_tilde.dims()),
        ));
    }
    Ok((f_noise_tilde + hp3d.forward(f_rgb)?)?)
}
