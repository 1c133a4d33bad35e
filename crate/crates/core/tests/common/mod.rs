//! Brute-force reference implementations shared by the test targets.
#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use truvil_core::noise_residual::KERNEL_SIZE;
use truvil_core::ops::{reflect_index, scalar, to_f64_vec};

pub type Dims = (usize, usize, usize, usize, usize);

pub fn idx(d: Dims, b: usize, t: usize, c: usize, y: usize, x: usize) -> usize {
    (((b * d.1 + t) * d.2 + c) * d.3 + y) * d.4 + x
}

/// Dense 2D cross-correlation with reflect padding, one channel.
pub fn dense_filter(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = KERNEL_SIZE;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    let yy = reflect_index(y as isize + ky as isize - r, h);
                    let xx = reflect_index(x as isize + kx as isize - r, w);
                    s += img[yy * w + xx] * kernel[ky * k + kx];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Self-attention over a set of vectors: returns (beta * M v + v, M).
pub fn attend(vectors: &[Vec<f64>], beta: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = vectors.len();
    let mut map = vec![vec![0.0; n]; n];
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            map[i][j] = e[j] / z;
        }
    }
    let out = (0..n)
        .map(|i| {
            (0..vectors[i].len())
                .map(|k| beta * (0..n).map(|j| map[i][j] * vectors[j][k]).sum::<f64>() + vectors[i][k])
                .collect()
        })
        .collect();
    (out, map)
}

#[derive(Debug, Clone, Copy)]
pub enum Axis {
    Time,
    Position,
    Channel,
}

/// Brute-force attention: groups of vectors gathered element by element.
pub fn attention_oracle(x: &[f64], d: Dims, axis: Axis, b: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let (nb, nt, nc, nh, nw) = d;
    for bi in 0..nb {
        // each group: list of items, each item a list of flat indices
        let groups: Vec<Vec<Vec<usize>>> = match axis {
            Axis::Time => (0..nc)
                .map(|c| {
                    (0..nt)
                        .map(|t| (0..nh * nw).map(|p| idx(d, bi, t, c, p / nw, p % nw)).collect())
                        .collect()
                })
                .collect(),
            Axis::Position => vec![(0..nt * nh * nw)
                .map(|p| {
                    let (t, y, x) = (p / (nh * nw), (p / nw) % nh, p % nw);
                    (0..nc).map(|c| idx(d, bi, t, c, y, x)).collect()
                })
                .collect()],
            Axis::Channel => vec![(0..nc)
                .map(|c| {
                    (0..nt * nh * nw)
                        .map(|p| idx(d, bi, p / (nh * nw), c, (p / nw) % nh, p % nw))
                        .collect()
                })
                .collect()],
        };
        for g in groups {
            let vecs: Vec<Vec<f64>> = g.iter().map(|item| item.iter().map(|i| x[*i]).collect()).collect();
            let (res, _) = attend(&vecs, b);
            for (item, r) in g.iter().zip(res) {
                for (i, v) in item.iter().zip(r) {
                    out[*i] = v;
                }
            }
        }
    }
    out
}

pub const FD_STEP: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Largest relative gap between the autograd gradient of `f` at `x0` and
/// central differences, over `coords`.
pub fn fd_max_rel_err<F>(x0: &[f64], shape: &[usize], coords: &[usize], f: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let dev = Device::Cpu;
    let var = Var::from_tensor(&Tensor::from_vec(x0.to_vec(), shape, &dev).unwrap()).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let g = to_f64_vec(grads.get(var.as_tensor()).expect("gradient")).unwrap();
    let eval = |v: &[f64]| scalar(&f(&Tensor::from_vec(v.to_vec(), shape, &dev).unwrap())).unwrap();
    let mut worst = 0.0f64;
    for &i in coords {
        let mut p = x0.to_vec();
        p[i] += FD_STEP;
        let mut m = x0.to_vec();
        m[i] -= FD_STEP;
        let num = (eval(&p) - eval(&m)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g[i], num));
    }
    worst
}
