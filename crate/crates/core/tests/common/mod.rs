//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dhsl::{Dims, Tensor4};
use rand::Rng;

pub fn random_tensor<R: Rng>(dims: Dims, rng: &mut R) -> Tensor4<f64> {
    let data = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor4::from_vec(dims, data).unwrap()
}

pub fn random_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct nested-loop convolution; filters are `(kh, kw, c_in, c_out)`.
pub fn conv_oracle(input: &Tensor4<f64>, filters: &Tensor4<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor4<f64> {
    let d = input.dims();
    let f = filters.dims();
    let (kh, kw, c_in, c_out) = (f.n, f.h, f.w, f.c);
    let oh = (d.h + 2 * pad - kh) / stride + 1;
    let ow = (d.w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor4::zeros(Dims::new(d.n, oh, ow, c_out)).unwrap();
    for n in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..c_out {
                    let mut acc = bias[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            for ci in 0..c_in {
                                acc += input.get(n, iy as usize, ix as usize, ci) * filters.get(ky, kx, ci, co);
                            }
                        }
                    }
                    out.set(n, oy, ox, co, acc);
                }
            }
        }
    }
    out
}

/// Window maximum over in-bounds cells only, and the flat input index of
/// the first maximal cell in row-major window order.
pub fn maxpool_oracle(input: &Tensor4<f64>, k: usize, stride: usize, pad: usize) -> (Tensor4<f64>, Vec<usize>) {
    let d = input.dims();
    let oh = (d.h + 2 * pad - k) / stride + 1;
    let ow = (d.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor4::zeros(Dims::new(d.n, oh, ow, d.c)).unwrap();
    let mut arg = Vec::new();
    for n in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..d.c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            let v = input.get(n, iy as usize, ix as usize, c);
                            if v > best {
                                best = v;
                                best_idx = d.index(n, iy as usize, ix as usize, c);
                            }
                        }
                    }
                    out.set(n, oy, ox, c, best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (out, arg)
}

pub fn avgpool_oracle(input: &Tensor4<f64>, kh: usize, kw: usize, stride: usize) -> Tensor4<f64> {
    let d = input.dims();
    let oh = (d.h - kh) / stride + 1;
    let ow = (d.w - kw) / stride + 1;
    let mut out = Tensor4::zeros(Dims::new(d.n, oh, ow, d.c)).unwrap();
    for n in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..d.c {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += input.get(n, oy * stride + ky, ox * stride + kx, c);
                        }
                    }
                    out.set(n, oy, ox, c, acc / (kh * kw) as f64);
                }
            }
        }
    }
    out
}

pub const FD_STEP: f64 = 1e-4;

/// Central finite differences of `f` at `x` for the listed coordinates.
pub fn numeric_gradient(x: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, 1e-7)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

/// Every coordinate when small, otherwise an even spread of `max` of them.
pub fn sample_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub mod checks;
