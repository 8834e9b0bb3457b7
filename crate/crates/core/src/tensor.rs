//! Dense rank-4 tensors.
//!
//! Storage order is `(n, h, w, c)` row-major with the channel index varying
//! fastest: element `(i, y, x, k)` lives at `((i * h + y) * w + x) * c + k`.
//! Filters reuse the same container with dims `(kh, kw, c_in, c_out)`.
//! The checkpoint format writes tensors in exactly this order.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Dims { n, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    #[inline]
    pub fn index(&self, i: usize, y: usize, x: usize, k: usize) -> usize {
        ((i * self.h + y) * self.w + x) * self.c + k
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: Dims, value: T) -> Result<Self> {
        check_dims(dims)?;
        Ok(Tensor4 {
            dims,
            data: vec![value; dims.len()],
        })
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fill a {dims} tensor ({} elements)",
                data.len(),
                dims.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims.len());
        for i in 0..dims.n {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    for k in 0..dims.c {
                        data.push(f(i, y, x, k));
                    }
                }
            }
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, y: usize, x: usize, k: usize) -> T {
        self.data[self.dims.index(i, y, x, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, y: usize, x: usize, k: usize, v: T) {
        let idx = self.dims.index(i, y, x, k);
        self.data[idx] = v;
    }

    /// Borrow of batch item `i`.
    pub fn item(&self, i: usize) -> &[T] {
        let len = self.dims.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Same data viewed with different dims of equal element count.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        check_dims(dims)?;
        if dims.len() != self.dims.len() {
            return Err(Error::shape(format!("cannot reshape {} into {dims}", self.dims)));
        }
        Ok(Tensor4 { dims, data: self.data })
    }

    /// Stacks tensors of equal per-item shape along the batch axis.
    pub fn concat_batch(parts: &[&Tensor4<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero tensors"))?
            .dims;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let d = p.dims;
            if (d.h, d.w, d.c) != (first.h, first.w, first.c) {
                return Err(Error::shape(format!("cannot concatenate {first} with {d}")));
            }
            n += d.n;
            data.extend_from_slice(&p.data);
        }
        Tensor4::from_vec(Dims::new(n, first.h, first.w, first.c), data)
    }

    /// Splits off batch items `[start, start + count)`.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.dims.n {
            return Err(Error::shape(format!(
                "batch slice [{start}, {}) out of range for {}",
                start + count,
                self.dims
            )));
        }
        let len = self.dims.item_len();
        Tensor4::from_vec(
            Dims { n: count, ..self.dims },
            self.data[start * len..(start + count) * len].to_vec(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.n == 0 || dims.h == 0 || dims.w == 0 || dims.c == 0 {
        return Err(Error::shape(format!("all tensor dims must be >= 1, got {dims}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_order_is_channel_fastest() {
        let t = Tensor4::<f64>::from_fn(Dims::new(2, 3, 4, 5), |i, y, x, k| {
            (i * 1000 + y * 100 + x * 10 + k) as f64
        })
        .unwrap();
        assert_eq!(t.data()[0..3], [0.0, 1.0, 2.0]);
        assert_eq!(t.data()[5], 10.0);
        assert_eq!(t.get(1, 2, 3, 4), 1234.0);
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(matches!(Tensor4::<f32>::zeros(Dims::new(1, 0, 2, 2)), Err(Error::Shape(_))));
        assert!(Tensor4::<f32>::from_vec(Dims::new(1, 1, 1, 2), vec![1.0]).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor4::<f32>::filled(Dims::new(2, 2, 2, 1), 1.0).unwrap();
        let b = Tensor4::<f32>::filled(Dims::new(1, 2, 2, 1), 2.0).unwrap();
        let ab = Tensor4::concat_batch(&[&a, &b]).unwrap();
        assert_eq!(ab.dims(), Dims::new(3, 2, 2, 1));
        assert_eq!(ab.slice_batch(0, 2).unwrap(), a);
        assert_eq!(ab.slice_batch(2, 1).unwrap(), b);
    }
}
