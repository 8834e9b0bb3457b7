//! The complete trainable network: shared extractor plus hybrid head.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Mode, NamedTensor, ParamGrad, StackConfig};
use crate::scalar::Scalar;
use crate::siamese::{FeatureBatch, PairFeatures, SiameseExtractor};
use crate::similarity::{self, HybridWeights, PairFeatureZ, PairLabel};
use crate::tensor::Tensor4;

/// Which projection terms of the head are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HeadMode {
    #[default]
    Hybrid,
    /// `w_m` pinned to zero.
    DiffOnly,
    /// `w_d` pinned to zero.
    MultOnly,
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Hybrid => "hybrid",
            HeadMode::DiffOnly => "diff-only",
            HeadMode::MultOnly => "mult-only",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(HeadMode::Hybrid),
            "diff-only" => Ok(HeadMode::DiffOnly),
            "mult-only" => Ok(HeadMode::MultOnly),
            other => Err(Error::Config(format!("unknown head mode `{other}`"))),
        }
    }
}

/// A mini-batch of image pairs: `first[i]` and `second[i]` form pair `i`.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    pub first: Tensor4<T>,
    pub second: Tensor4<T>,
    pub labels: Vec<PairLabel>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(first: Tensor4<T>, second: Tensor4<T>, labels: Vec<PairLabel>) -> Result<Self> {
        if first.dims() != second.dims() || first.dims().n != labels.len() {
            return Err(Error::shape(format!(
                "pair batch of {} / {} images with {} labels",
                first.dims(),
                second.dims(),
                labels.len()
            )));
        }
        Ok(PairBatch { first, second, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub loss: T,
    pub scores: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    extractor: SiameseExtractor<T>,
    head: HybridWeights<T>,
    head_mode: HeadMode,
    grad_head: HybridWeights<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: StackConfig, head_mode: HeadMode) -> Result<Self> {
        let extractor = SiameseExtractor::new(config)?;
        let d = extractor.feature_dim();
        Ok(Model {
            extractor,
            head: HybridWeights::zeros(d),
            head_mode,
            grad_head: HybridWeights::zeros(d),
        })
    }

    pub fn stack_config(&self) -> &StackConfig {
        self.extractor.stack().config()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.dim()
    }

    pub fn head(&self) -> &HybridWeights<T> {
        &self.head
    }

    /// Replaces the head weights; pinned terms are zeroed again.
    pub fn set_head(&mut self, head: HybridWeights<T>) -> Result<()> {
        if head.dim() != self.feature_dim() {
            return Err(Error::shape(format!(
                "head of dim {} for features of dim {}",
                head.dim(),
                self.feature_dim()
            )));
        }
        self.head = head;
        self.enforce_head_mode();
        Ok(())
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn grad_head(&self) -> &HybridWeights<T> {
        &self.grad_head
    }

    pub fn extractor(&self) -> &SiameseExtractor<T> {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut SiameseExtractor<T> {
        &mut self.extractor
    }

    pub(crate) fn enforce_head_mode(&mut self) {
        match self.head_mode {
            HeadMode::Hybrid => {}
            HeadMode::DiffOnly => {
                self.head.w_m.fill(T::zero());
                self.grad_head.w_m.fill(T::zero());
            }
            HeadMode::MultOnly => {
                self.head.w_d.fill(T::zero());
                self.grad_head.w_d.fill(T::zero());
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.extractor.zero_grad();
        self.grad_head.w_d.fill(T::zero());
        self.grad_head.w_m.fill(T::zero());
    }

    fn pair_z(features: &PairFeatures<T>, labels: &[PairLabel]) -> Result<Vec<(PairFeatureZ<T>, PairLabel)>> {
        (0..features.len())
            .map(|i| {
                let p = features.pair(i);
                Ok((PairFeatureZ::from_pair(p.x1, p.x2)?, labels[i]))
            })
            .collect()
    }

    /// Loss of a batch without touching gradients.
    pub fn loss(&mut self, batch: &PairBatch<T>, alpha: T, mode: Mode) -> Result<T> {
        let features = self.extractor.extract_pair(&batch.first, &batch.second, mode)?;
        let samples = Self::pair_z(&features, &batch.labels)?;
        Ok(similarity::logistic_loss(&self.head, &samples, alpha)?.loss)
    }

    /// Forward and backward over one batch. Gradients are reset first and
    /// left in the model for the optimizer.
    pub fn forward_backward(&mut self, batch: &PairBatch<T>, alpha: T, mode: Mode) -> Result<StepOutput<T>> {
        self.zero_grad();
        let features = self.extractor.extract_pair(&batch.first, &batch.second, mode)?;
        let samples = Self::pair_z(&features, &batch.labels)?;
        let out = similarity::logistic_loss(&self.head, &samples, alpha)?;
        self.grad_head = out.grad_w;
        self.enforce_head_mode();

        let (n, d) = (features.len(), self.feature_dim());
        let mut grad_x1 = FeatureBatch::zeros(n, d);
        let mut grad_x2 = FeatureBatch::zeros(n, d);
        for (i, gz) in out.grad_z.iter().enumerate() {
            let p = features.pair(i);
            let (d1, d2) = similarity::diff_backward(p.x1, p.x2, &gz.diff)?;
            let (m1, m2) = similarity::mult_backward(p.x1, p.x2, &gz.mult)?;
            for (g, (a, b)) in grad_x1.row_mut(i).iter_mut().zip(d1.iter().zip(&m1)) {
                *g = *a + *b;
            }
            for (g, (a, b)) in grad_x2.row_mut(i).iter_mut().zip(d2.iter().zip(&m2)) {
                *g = *a + *b;
            }
        }
        self.extractor.backward_pair(&grad_x1, &grad_x2)?;
        Ok(StepOutput {
            loss: out.loss,
            scores: out.scores,
        })
    }

    /// Inference-mode features for a batch of images.
    pub fn extract(&mut self, images: &Tensor4<T>) -> Result<FeatureBatch<T>> {
        self.extractor.extract_single(images, Mode::Infer)
    }

    pub fn score(&self, x1: &[T], x2: &[T]) -> Result<T> {
        similarity::hybrid_score(&self.head, x1, x2)
    }

    /// Learnable tensors with gradients: stack parameters, then the head.
    pub fn params_mut(&mut self) -> Vec<ParamGrad<'_, T>> {
        let mut out: Vec<ParamGrad<'_, T>> = self
            .extractor
            .stack_mut()
            .layers_mut()
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect();
        out.push(ParamGrad {
            name: "head.w_d".into(),
            value: &mut self.head.w_d,
            grad: &self.grad_head.w_d,
        });
        out.push(ParamGrad {
            name: "head.w_m".into(),
            value: &mut self.head.w_m,
            grad: &self.grad_head.w_m,
        });
        out
    }

    /// Names of the tensors returned by [`Model::params_mut`], in order.
    pub fn param_names(&self) -> Vec<String> {
        let learnable = ["filters", "bias", "gamma", "beta"];
        self.tensors()
            .into_iter()
            .filter(|t| t.name.starts_with("head.") || learnable.iter().any(|s| t.name.ends_with(&format!(".{s}"))))
            .map(|t| t.name)
            .collect()
    }

    pub fn learnable_count(&self) -> usize {
        let stack: usize = self
            .extractor
            .stack()
            .count_params()
            .iter()
            .map(|(_, c)| c.total())
            .sum();
        stack + 2 * self.feature_dim()
    }

    /// Every stored tensor (including batch-norm running statistics) in
    /// checkpoint order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out: Vec<_> = self.extractor.stack().layers().iter().flat_map(|l| l.tensors()).collect();
        let d = self.feature_dim();
        out.push(NamedTensor {
            name: "head.w_d".into(),
            dims: vec![d],
            data: &self.head.w_d,
        });
        out.push(NamedTensor {
            name: "head.w_m".into(),
            dims: vec![d],
            data: &self.head.w_m,
        });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = self
            .extractor
            .stack_mut()
            .layers_mut()
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect();
        out.push(&mut self.head.w_d);
        out.push(&mut self.head.w_m);
        out
    }

    /// All stored values as one vector, in [`Model::tensors`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, values: &[T]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.data.len()).sum();
        if values.len() != total {
            return Err(Error::shape(format!("expected {total} values, got {}", values.len())));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Converts all stored values to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.stack_config().clone(), self.head_mode).expect("same geometry");
        let values: Vec<U> = self.flatten().into_iter().map(|v| U::of(v.as_f64())).collect();
        out.load_flat(&values).expect("same layout");
        out
    }
}
