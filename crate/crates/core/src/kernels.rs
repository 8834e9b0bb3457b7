//! Convolution, pooling and element-wise kernels over [`Tensor4`].
//!
//! All kernels are pure. Work is split over the batch axis with rayon; every
//! cross-sample reduction is performed in batch order so results do not depend
//! on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

/// Output extent of a sliding window along one axis.
pub fn window_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || len + 2 * pad < k {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    input: Dims,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(input: Dims, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        let (out_h, out_w) = match (window_out(input.h, kh, stride, pad), window_out(input.w, kw, stride, pad)) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(format!(
                    "{kh}x{kw} window (stride {stride}, pad {pad}) does not fit input {input}"
                )))
            }
        };
        Ok(Geometry {
            input,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.input.c
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output `o` and kernel offset `k`, `None` in the padding.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.pad)?;
        (pos < len).then_some(pos)
    }

    /// Unfolds one sample into a `(out_h * out_w) x (kh * kw * c)` patch matrix.
    fn im2col<T: Scalar>(&self, sample: &[T], col: &mut [T]) {
        let c = self.input.c;
        let row_len = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut col[(oy * self.out_w + ox) * row_len..][..row_len];
                for ky in 0..self.kh {
                    let sy = self.source(oy, ky, self.input.h);
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * c..][..c];
                        match (sy, self.source(ox, kx, self.input.w)) {
                            (Some(y), Some(x)) => {
                                dst.copy_from_slice(&sample[(y * self.input.w + x) * c..][..c])
                            }
                            _ => dst.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters patch gradients back onto the sample.
    fn col2im<T: Scalar>(&self, col: &[T], sample: &mut [T]) {
        let c = self.input.c;
        let row_len = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &col[(oy * self.out_w + ox) * row_len..][..row_len];
                for ky in 0..self.kh {
                    let Some(y) = self.source(oy, ky, self.input.h) else { continue };
                    for kx in 0..self.kw {
                        let Some(x) = self.source(ox, kx, self.input.w) else { continue };
                        let src = &row[(ky * self.kw + kx) * c..][..c];
                        let dst = &mut sample[(y * self.input.w + x) * c..][..c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(input: &Tensor4<T>, filters: &Tensor4<T>, bias_len: usize, stride: usize, pad: usize) -> Result<Geometry> {
    let f = filters.dims();
    if f.w != input.dims().c {
        return Err(Error::shape(format!(
            "filters {f} (kh x kw x c_in x c_out) do not match input {} channels",
            input.dims()
        )));
    }
    if bias_len != f.c {
        return Err(Error::shape(format!("bias of length {bias_len} does not match filters {f}")));
    }
    if stride == 0 {
        return Err(Error::shape("convolution stride must be >= 1"));
    }
    Geometry::new(input.dims(), f.n, f.h, stride, pad)
}

/// 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor4<T>,
    filters: &Tensor4<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let g = conv_geometry(input, filters, bias.len(), stride, pad)?;
    let c_out = filters.dims().c;
    let out_dims = Dims::new(g.input.n, g.out_h, g.out_w, c_out);
    let mut out = Tensor4::zeros(out_dims)?;
    let (m, k) = (g.out_pixels(), g.patch_len());
    out.data_mut()
        .par_chunks_mut(out_dims.item_len())
        .enumerate()
        .for_each_init(
            || vec![T::zero(); m * k],
            |col, (i, dst)| {
                g.im2col(input.item(i), col);
                for row in dst.chunks_exact_mut(c_out) {
                    row.copy_from_slice(bias);
                }
                T::gemm(m, k, c_out, T::one(), col, (k, 1), filters.data(), (c_out, 1), T::one(), dst, (c_out, 1));
            },
        );
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub filters: Tensor4<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    filters: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let c_out = filters.dims().c;
    let g = conv_geometry(input, filters, c_out, stride, pad)?;
    let expected = Dims::new(g.input.n, g.out_h, g.out_w, c_out);
    if grad_out.dims() != expected {
        return Err(Error::shape(format!(
            "conv grad_out {} does not match forward output {expected}",
            grad_out.dims()
        )));
    }
    let (m, k) = (g.out_pixels(), g.patch_len());
    let mut grad_input = Tensor4::zeros(g.input)?;
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_input
        .data_mut()
        .par_chunks_mut(g.input.item_len())
        .enumerate()
        .map(|(i, dx)| {
            let dy = grad_out.item(i);
            let mut col = vec![T::zero(); m * k];
            g.im2col(input.item(i), &mut col);
            // dF_i = col^T * dY_i
            let mut df = vec![T::zero(); k * c_out];
            T::gemm(k, m, c_out, T::one(), &col, (1, k), dy, (c_out, 1), T::zero(), &mut df, (c_out, 1));
            // dcol = dY_i * F^T, reusing the patch buffer
            T::gemm(m, c_out, k, T::one(), dy, (c_out, 1), filters.data(), (1, c_out), T::zero(), &mut col, (k, 1));
            g.col2im(&col, dx);
            let mut db = vec![T::zero(); c_out];
            for row in dy.chunks_exact(c_out) {
                for (b, v) in db.iter_mut().zip(row) {
                    *b += *v;
                }
            }
            (df, db)
        })
        .collect();
    let (df, db) = pairwise_sum(&partials);
    let grad_filters = Tensor4::from_vec(filters.dims(), df)?;
    let grad_bias = db;
    Ok(ConvGrads {
        input: grad_input,
        filters: grad_filters,
        bias: grad_bias,
    })
}

/// Recursive halving sum over per-sample partials. Summing a batch `[a; b]`
/// gives exactly `sum(a) + sum(b)` when both halves have equal length.
fn pairwise_sum<T: Scalar>(parts: &[(Vec<T>, Vec<T>)]) -> (Vec<T>, Vec<T>) {
    match parts {
        [] => unreachable!("batch has at least one sample"),
        [only] => only.clone(),
        _ => {
            let (lo, hi) = parts.split_at(parts.len() / 2);
            let (mut f, mut b) = pairwise_sum(lo);
            let (f2, b2) = pairwise_sum(hi);
            f.iter_mut().zip(&f2).for_each(|(x, y)| *x += *y);
            b.iter_mut().zip(&b2).for_each(|(x, y)| *x += *y);
            (f, b)
        }
    }
}

/// Winning input offset for every max-pool output element.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgmaxMap {
    pub input_dims: Dims,
    pub output_dims: Dims,
    pub indices: Vec<usize>,
}

/// Max pooling; padded cells act as negative infinity and are never selected.
/// Ties go to the first candidate in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor4<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4<T>, ArgmaxMap)> {
    if pad >= kh || pad >= kw {
        return Err(Error::shape(format!("max-pool pad {pad} must be smaller than the {kh}x{kw} window")));
    }
    let g = Geometry::new(input.dims(), kh, kw, stride, pad)?;
    let d = g.input;
    let out_dims = Dims::new(d.n, g.out_h, g.out_w, d.c);
    let mut out = Tensor4::zeros(out_dims)?;
    let mut indices = vec![0usize; out_dims.len()];
    let src = input.data();
    out.data_mut()
        .par_chunks_mut(out_dims.item_len())
        .zip(indices.par_chunks_mut(out_dims.item_len()))
        .enumerate()
        .for_each(|(i, (dst, idx))| {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for ch in 0..d.c {
                        let mut best = T::neg_infinity();
                        let mut best_at = usize::MAX;
                        for ky in 0..kh {
                            let Some(y) = g.source(oy, ky, d.h) else { continue };
                            for kx in 0..kw {
                                let Some(x) = g.source(ox, kx, d.w) else { continue };
                                let at = d.index(i, y, x, ch);
                                if best_at == usize::MAX || src[at] > best {
                                    best = src[at];
                                    best_at = at;
                                }
                            }
                        }
                        let o = (oy * g.out_w + ox) * d.c + ch;
                        dst[o] = best;
                        idx[o] = best_at;
                    }
                }
            }
        });
    Ok((
        out,
        ArgmaxMap {
            input_dims: d,
            output_dims: out_dims,
            indices,
        },
    ))
}

pub fn maxpool_backward<T: Scalar>(argmax: &ArgmaxMap, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if grad_out.dims() != argmax.output_dims {
        return Err(Error::shape(format!(
            "max-pool grad_out {} does not match forward output {}",
            grad_out.dims(),
            argmax.output_dims
        )));
    }
    let mut grad_input = Tensor4::zeros(argmax.input_dims)?;
    let dx = grad_input.data_mut();
    for (&at, &g) in argmax.indices.iter().zip(grad_out.data()) {
        dx[at] += g;
    }
    Ok(grad_input)
}

/// Average pooling without padding.
pub fn avgpool_forward<T: Scalar>(input: &Tensor4<T>, kh: usize, kw: usize, stride: usize) -> Result<Tensor4<T>> {
    let g = Geometry::new(input.dims(), kh, kw, stride, 0)?;
    let d = g.input;
    let scale = T::one() / T::of((kh * kw) as f64);
    Tensor4::from_fn(Dims::new(d.n, g.out_h, g.out_w, d.c), |i, oy, ox, ch| {
        let mut acc = T::zero();
        for ky in 0..kh {
            for kx in 0..kw {
                acc += input.get(i, oy * stride + ky, ox * stride + kx, ch);
            }
        }
        acc * scale
    })
}

pub fn avgpool_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    input_dims: Dims,
) -> Result<Tensor4<T>> {
    let g = Geometry::new(input_dims, kh, kw, stride, 0)?;
    let expected = Dims::new(input_dims.n, g.out_h, g.out_w, input_dims.c);
    if grad_out.dims() != expected {
        return Err(Error::shape(format!(
            "avg-pool grad_out {} does not match forward output {expected}",
            grad_out.dims()
        )));
    }
    let scale = T::one() / T::of((kh * kw) as f64);
    let mut grad_input = Tensor4::zeros(input_dims)?;
    for i in 0..expected.n {
        for oy in 0..expected.h {
            for ox in 0..expected.w {
                for ch in 0..expected.c {
                    let share = grad_out.get(i, oy, ox, ch) * scale;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let at = input_dims.index(i, oy * stride + ky, ox * stride + kx, ch);
                            grad_input.data_mut()[at] += share;
                        }
                    }
                }
            }
        }
    }
    Ok(grad_input)
}

/// Element-wise map applied by [`elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Elementwise<'a, T> {
    Add(&'a Tensor4<T>),
    Sub(&'a Tensor4<T>),
    Mul(&'a Tensor4<T>),
    Abs,
    Relu,
    Scale(T),
}

pub fn elementwise<T: Scalar>(a: &Tensor4<T>, op: Elementwise<'_, T>) -> Result<Tensor4<T>> {
    let binary = |b: &Tensor4<T>, f: fn(T, T) -> T| -> Result<Tensor4<T>> {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("element-wise operands {} and {} differ", a.dims(), b.dims())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor4::from_vec(a.dims(), data)
    };
    let unary = |f: &dyn Fn(T) -> T| Tensor4::from_vec(a.dims(), a.data().iter().map(|&x| f(x)).collect());
    match op {
        Elementwise::Add(b) => binary(b, |x, y| x + y),
        Elementwise::Sub(b) => binary(b, |x, y| x - y),
        Elementwise::Mul(b) => binary(b, |x, y| x * y),
        Elementwise::Abs => unary(&|x| x.abs()),
        Elementwise::Relu => unary(&|x| if x > T::zero() { x } else { T::zero() }),
        Elementwise::Scale(s) => unary(&|x| x * s),
    }
}
