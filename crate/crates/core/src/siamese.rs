//! Two-branch feature extractor over a single shared [`LayerStack`].
//!
//! Both images of a pair go through the same parameter storage. In training
//! mode the two branches are run as one batch `[img1; img2]` whose batch-norm
//! statistics are pooled across branches, so both branches see identical
//! normalization.

use crate::error::{Error, Result};
use crate::layers::{LayerStack, Mode, StackConfig};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

/// Row-major `n x d` matrix of flattened feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T> {
    n: usize,
    d: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(n: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape(format!("{} values do not form a {n}x{d} feature batch", data.len())));
        }
        Ok(FeatureBatch { n, d, data })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        FeatureBatch {
            n,
            d,
            data: vec![T::zero(); n * d],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("feature rows differ in length"));
        }
        Ok(FeatureBatch {
            n: rows.len(),
            d,
            data: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.d.max(1)).take(self.n)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Features of one image pair.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePair<'a, T> {
    pub x1: &'a [T],
    pub x2: &'a [T],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures<T> {
    pub x1: FeatureBatch<T>,
    pub x2: FeatureBatch<T>,
}

impl<T: Scalar> PairFeatures<T> {
    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    pub fn pair(&self, i: usize) -> FeaturePair<'_, T> {
        FeaturePair {
            x1: self.x1.row(i),
            x2: self.x2.row(i),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SiameseExtractor<T> {
    stack: LayerStack<T>,
    cached: Option<Cached>,
}

#[derive(Clone, Copy, Debug)]
enum Cached {
    Pair(usize),
    Single(usize),
}

impl<T: Scalar> SiameseExtractor<T> {
    pub fn new(config: StackConfig) -> Result<Self> {
        Ok(SiameseExtractor {
            stack: LayerStack::new(config)?,
            cached: None,
        })
    }

    pub fn from_stack(stack: LayerStack<T>) -> Self {
        SiameseExtractor { stack, cached: None }
    }

    pub fn stack(&self) -> &LayerStack<T> {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut LayerStack<T> {
        &mut self.stack
    }

    pub fn feature_dim(&self) -> usize {
        self.stack.feature_dim()
    }

    fn flatten(out: Tensor4<T>) -> FeatureBatch<T> {
        let d = out.dims();
        FeatureBatch {
            n: d.n,
            d: d.item_len(),
            data: out.into_vec(),
        }
    }

    /// Runs both images of every pair through the shared stack.
    pub fn extract_pair(&mut self, img1: &Tensor4<T>, img2: &Tensor4<T>, mode: Mode) -> Result<PairFeatures<T>> {
        if img1.dims() != img2.dims() {
            return Err(Error::shape(format!(
                "pair members differ in shape: {} vs {}",
                img1.dims(),
                img2.dims()
            )));
        }
        let n = img1.dims().n;
        let both = Tensor4::concat_batch(&[img1, img2])?;
        let out = self.stack.forward_grouped(&both, mode, 2)?;
        let all = Self::flatten(out);
        let d = all.d;
        let (a, b) = all.data.split_at(n * d);
        self.cached = Some(Cached::Pair(n));
        Ok(PairFeatures {
            x1: FeatureBatch { n, d, data: a.to_vec() },
            x2: FeatureBatch { n, d, data: b.to_vec() },
        })
    }

    /// Single-branch forward, used to compute gallery features once.
    pub fn extract_single(&mut self, images: &Tensor4<T>, mode: Mode) -> Result<FeatureBatch<T>> {
        let out = self.stack.forward(images, mode)?;
        self.cached = Some(Cached::Single(images.dims().n));
        Ok(Self::flatten(out))
    }

    fn output_tensor(&self, n: usize, parts: &[&FeatureBatch<T>]) -> Result<Tensor4<T>> {
        let dims = self.stack.output_dims(n);
        let mut data = Vec::with_capacity(dims.len());
        for p in parts {
            if p.d != dims.item_len() {
                return Err(Error::shape(format!(
                    "feature gradient of dim {} does not match feature dim {}",
                    p.d,
                    dims.item_len()
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Tensor4::from_vec(dims, data)
    }

    /// Backpropagates feature gradients of both branches into the shared
    /// parameters; the accumulated gradient is the sum over branches.
    /// Returns the gradients with respect to both image batches.
    pub fn backward_pair(
        &mut self,
        grad_x1: &FeatureBatch<T>,
        grad_x2: &FeatureBatch<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let n = match self.cached {
            Some(Cached::Pair(n)) => n,
            _ => return Err(Error::State("backward_pair requires a preceding extract_pair".into())),
        };
        if grad_x1.n != n || grad_x2.n != n {
            return Err(Error::shape(format!(
                "expected {n} gradient rows per branch, got {} and {}",
                grad_x1.n, grad_x2.n
            )));
        }
        let g = self.output_tensor(2 * n, &[grad_x1, grad_x2])?;
        let dx = self.stack.backward(&g)?;
        Ok((dx.slice_batch(0, n)?, dx.slice_batch(n, n)?))
    }

    /// Backward for a preceding [`SiameseExtractor::extract_single`].
    pub fn backward_single(&mut self, grad: &FeatureBatch<T>) -> Result<Tensor4<T>> {
        let n = match self.cached {
            Some(Cached::Single(n)) => n,
            _ => return Err(Error::State("backward_single requires a preceding extract_single".into())),
        };
        if grad.n != n {
            return Err(Error::shape(format!("expected {n} gradient rows, got {}", grad.n)));
        }
        let g = self.output_tensor(n, &[grad])?;
        self.stack.backward(&g)
    }

    pub fn zero_grad(&mut self) {
        self.stack.zero_grad();
    }

    pub fn input_dims(&self, n: usize) -> Dims {
        self.stack.config().input_dims(n)
    }
}
