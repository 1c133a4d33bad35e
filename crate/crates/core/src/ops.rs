//! Tensor building blocks shared by the network modules.
//!
//! Feature tensors use the layout `(batch, time, channels, height, width)`.
//! Per-frame 2D operators fold batch and time together into
//! `(batch * time, channels, height, width)`.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// Reflect an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    assert!(n > 0, "reflect_index on empty axis");
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

fn index_tensor(idx: Vec<u32>, device: &Device) -> Result<Tensor> {
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, device)?)
}

/// Pad the last two dimensions by `ph` rows and `pw` columns on each side.
pub fn pad2d(x: &Tensor, ph: usize, pw: usize, mode: Padding) -> Result<Tensor> {
    if ph == 0 && pw == 0 {
        return Ok(x.clone());
    }
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::shape("pad2d", "rank >= 2", x.rank()));
    }
    match mode {
        Padding::Zero => Ok(x
            .pad_with_zeros(rank - 2, ph, ph)?
            .pad_with_zeros(rank - 1, pw, pw)?),
        Padding::Reflect => {
            let h = x.dim(rank - 2)?;
            let w = x.dim(rank - 1)?;
            let rows: Vec<u32> = (0..h + 2 * ph)
                .map(|i| reflect_index(i as isize - ph as isize, h) as u32)
                .collect();
            let cols: Vec<u32> = (0..w + 2 * pw)
                .map(|i| reflect_index(i as isize - pw as isize, w) as u32)
                .collect();
            let y = x.index_select(&index_tensor(rows, x.device())?, rank - 2)?;
            Ok(y.index_select(&index_tensor(cols, x.device())?, rank - 1)?)
        }
    }
}

/// Stride-1 "same" 2D convolution (cross-correlation) of `x: (n, cin, h, w)`
/// with `weight: (cout, cin, kh, kw)`, odd kernel sizes.
///
/// Computed as a sum of one matrix product per kernel tap, which keeps the
/// working set at one shifted copy of the input instead of a full im2col
/// buffer. Full-resolution decoder maps make that difference matter.
pub fn conv2d_same(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    mode: Padding,
) -> Result<Tensor> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape("conv2d_same", format!("{wcin} input channels"), cin));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d_same needs odd kernels, got {kh}x{kw}"
        )));
    }
    let padded = pad2d(x, kh / 2, kw / 2, mode)?;
    let taps = weight.permute((2, 3, 0, 1))?.contiguous()?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..kh {
        for dx in 0..kw {
            let patch = if kh == 1 && kw == 1 {
                padded.reshape((n, cin, h * w))?
            } else {
                padded
                    .narrow(2, dy, h)?
                    .narrow(3, dx, w)?
                    .contiguous()?
                    .reshape((n, cin, h * w))?
            };
            let tap = taps.get(dy)?.get(dx)?.broadcast_left(n)?.contiguous()?;
            let y = tap.matmul(&patch)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
    }
    let mut y = acc.expect("kernel has at least one tap").reshape((n, cout, h, w))?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((1, cout, 1, 1))?)?;
    }
    Ok(y)
}

/// Apply a per-frame 2D operator to a `(b, t, c, h, w)` tensor.
pub fn per_frame<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let (b, t, c, h, w) = x.dims5()?;
    let y = f(&x.reshape((b * t, c, h, w))?)?;
    let (_, c2, h2, w2) = y.dims4()?;
    Ok(y.reshape((b, t, c2, h2, w2))?)
}

/// Channel-mixing linear map over dimension 2 of a `(b, t, c, h, w)` tensor.
/// `weight: (cout, cin)`.
pub fn pointwise(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, t, c, h, w) = x.dims5()?;
    let (cout, cin) = weight.dims2()?;
    if cin != c {
        return Err(Error::shape("pointwise", format!("{cin} channels"), c));
    }
    let flat = x.reshape((b * t, c, h * w))?;
    let mut y = weight.broadcast_left(b * t)?.contiguous()?.matmul(&flat)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(&bias.reshape((1, cout, 1))?)?;
    }
    Ok(y.reshape((b, t, cout, h, w))?)
}

/// Depthwise spatiotemporal convolution with zero padding.
/// `x: (b, t, c, h, w)`, `weight: (c, kt, kh, kw)` with odd kernel sizes.
pub fn depthwise_conv3d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, t, c, h, w) = x.dims5()?;
    let (wc, kt, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::shape("depthwise_conv3d", format!("{wc} channels"), c));
    }
    let padded = x
        .pad_with_zeros(1, kt / 2, kt / 2)?
        .pad_with_zeros(3, kh / 2, kh / 2)?
        .pad_with_zeros(4, kw / 2, kw / 2)?;
    let mut acc: Option<Tensor> = None;
    for dt in 0..kt {
        let slab = padded.narrow(1, dt, t)?;
        for dy in 0..kh {
            let rows = slab.narrow(3, dy, h)?;
            for dx in 0..kw {
                let tap = weight
                    .narrow(1, dt, 1)?
                    .narrow(2, dy, 1)?
                    .narrow(3, dx, 1)?
                    .reshape((1, 1, c, 1, 1))?;
                let y = rows.narrow(4, dx, w)?.broadcast_mul(&tap)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => (a + y)?,
                });
            }
        }
    }
    let mut y = acc.expect("kernel has at least one tap");
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((1, 1, c, 1, 1))?)?;
    }
    Ok(y)
}

/// Output size of a ceil-mode stride.
pub fn ceil_div(n: usize, s: usize) -> usize {
    n.div_ceil(s)
}

/// Non-overlapping strided patch embedding (kernel = stride = `s`) on
/// `(n, cin, h, w)` with `weight: (cout, cin, s, s)`.
///
/// Inputs whose size is not a multiple of `s` are zero padded up to the next
/// multiple, split as evenly as possible (the extra row/column goes after),
/// so the output is `ceil(h / s) x ceil(w / s)`.
pub fn patch_embed(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, s: usize) -> Result<Tensor> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin || kh != s || kw != s {
        return Err(Error::shape(
            "patch_embed",
            format!("({cout}, {cin}, {s}, {s})"),
            format!("{:?}", weight.dims()),
        ));
    }
    let (ho, wo) = (ceil_div(h, s), ceil_div(w, s));
    let (extra_h, extra_w) = (ho * s - h, wo * s - w);
    let x = x
        .pad_with_zeros(2, extra_h / 2, extra_h - extra_h / 2)?
        .pad_with_zeros(3, extra_w / 2, extra_w - extra_w / 2)?;
    // (n, cin, ho, s, wo, s) -> (n, ho, wo, cin, s, s)
    let patches = x
        .reshape((n, cin, ho, s, wo, s))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((n, ho * wo, cin * s * s))?;
    let wmat = weight.reshape((cout, cin * s * s))?.t()?;
    let mut y = patches.broadcast_matmul(&wmat)?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((1, 1, cout))?)?;
    }
    Ok(y.transpose(1, 2)?.contiguous()?.reshape((n, cout, ho, wo))?)
}

/// Linear interpolation weights for resizing an axis of length `n_in` to
/// `n_out`, half-pixel centers (align-corners off). Row-major
/// `(n_out, n_in)` matrix.
pub fn linear_resize_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for d in 0..n_out {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let l = src - i0 as f64;
        m[d * n_in + i0] += 1.0 - l;
        m[d * n_in + i1] += l;
    }
    m
}

/// Bilinear resize of the last two dimensions of `(n, c, h, w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let ah = Tensor::from_vec(linear_resize_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dt)?;
    let aw = Tensor::from_vec(linear_resize_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dt)?;
    let flat = x.reshape((n * c, h, w))?;
    let cols = flat.broadcast_matmul(&aw.t()?)?; // (nc, h, out_w)
    let y = ah.broadcast_left(n * c)?.contiguous()?.matmul(&cols)?; // (nc, out_h, out_w)
    Ok(y.reshape((n, c, out_h, out_w))?)
}

/// Trilinear resize of `(b, t, c, h, w)` to `(b, t, c, out_h, out_w)`.
///
/// The temporal length is unchanged, and linear interpolation onto the same
/// grid is the identity, so this reduces to per-frame bilinear resizing.
pub fn resize_trilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    per_frame(x, |f| resize_bilinear(f, out_h, out_w))
}

/// Layer normalization over `dim` with affine `gamma`, `beta` of length
/// `x.dim(dim)`.
pub fn layer_norm(x: &Tensor, dim: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(dim)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(dim)?;
    let y = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    let mut shape = vec![1usize; x.rank()];
    shape[dim] = x.dim(dim)?;
    Ok(y.broadcast_mul(&gamma.reshape(shape.as_slice())?)?
        .broadcast_add(&beta.reshape(shape.as_slice())?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Scalar tensor value as f64.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Flattened tensor values as f64.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
