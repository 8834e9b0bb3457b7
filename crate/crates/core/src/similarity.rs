//! Hybrid similarity head.
//!
//! A feature pair `(x1, x2)` is reduced to `z = [|x1 - x2|, x1 .* x2]` and
//! scored by `w_d . |x1 - x2| + w_m . (x1 .* x2)`; larger scores mean more
//! similar. The weights are learned with an L2-regularized logistic loss on
//! labelled pairs. Fixed Euclidean, cosine and Mahalanobis scorers are kept
//! as baselines.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: dimension mismatch ({a} vs {b})")));
    }
    Ok(())
}

/// `|x1 - x2|`
pub fn diff_forward<T: Scalar>(x1: &[T], x2: &[T]) -> Result<Vec<T>> {
    check_len("diff", x1.len(), x2.len())?;
    Ok(x1.iter().zip(x2).map(|(&a, &b)| (a - b).abs()).collect())
}

/// Gradient of `|x1 - x2|`; the derivative at `x1[i] == x2[i]` is zero.
pub fn diff_backward<T: Scalar>(x1: &[T], x2: &[T], grad_diff: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_len("diff", x1.len(), x2.len())?;
    check_len("diff gradient", x1.len(), grad_diff.len())?;
    let g1: Vec<T> = x1
        .iter()
        .zip(x2)
        .zip(grad_diff)
        .map(|((&a, &b), &g)| {
            if a > b {
                g
            } else if a == b {
                T::zero()
            } else {
                -g
            }
        })
        .collect();
    let g2 = g1.iter().map(|&g| -g).collect();
    Ok((g1, g2))
}

/// `x1 .* x2`
pub fn mult_forward<T: Scalar>(x1: &[T], x2: &[T]) -> Result<Vec<T>> {
    check_len("mult", x1.len(), x2.len())?;
    Ok(x1.iter().zip(x2).map(|(&a, &b)| a * b).collect())
}

pub fn mult_backward<T: Scalar>(x1: &[T], x2: &[T], grad_mult: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_len("mult", x1.len(), x2.len())?;
    check_len("mult gradient", x1.len(), grad_mult.len())?;
    let g1 = grad_mult.iter().zip(x2).map(|(&g, &b)| g * b).collect();
    let g2 = grad_mult.iter().zip(x1).map(|(&g, &a)| g * a).collect();
    Ok((g1, g2))
}

/// Projection weights of the hybrid score.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridWeights<T> {
    pub w_d: Vec<T>,
    pub w_m: Vec<T>,
}

impl<T: Scalar> HybridWeights<T> {
    pub fn zeros(d: usize) -> Self {
        HybridWeights {
            w_d: vec![T::zero(); d],
            w_m: vec![T::zero(); d],
        }
    }

    pub fn new(w_d: Vec<T>, w_m: Vec<T>) -> Result<Self> {
        check_len("hybrid weights", w_d.len(), w_m.len())?;
        Ok(HybridWeights { w_d, w_m })
    }

    pub fn dim(&self) -> usize {
        self.w_d.len()
    }

    /// `W = [w_d, w_m]`
    pub fn concat(&self) -> Vec<T> {
        [self.w_d.as_slice(), self.w_m.as_slice()].concat()
    }

    pub fn squared_norm(&self) -> T {
        self.w_d.iter().chain(&self.w_m).map(|&v| v * v).sum()
    }
}

/// `z = [diff, mult]` for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatureZ<T> {
    pub diff: Vec<T>,
    pub mult: Vec<T>,
}

impl<T: Scalar> PairFeatureZ<T> {
    pub fn from_pair(x1: &[T], x2: &[T]) -> Result<Self> {
        Ok(PairFeatureZ {
            diff: diff_forward(x1, x2)?,
            mult: mult_forward(x1, x2)?,
        })
    }

    pub fn z(&self) -> Vec<T> {
        [self.diff.as_slice(), self.mult.as_slice()].concat()
    }

    pub fn dim(&self) -> usize {
        self.diff.len()
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// The two projected sub-scores `(w_d . |x1 - x2|, w_m . (x1 .* x2))`.
pub fn sub_scores<T: Scalar>(w: &HybridWeights<T>, x1: &[T], x2: &[T]) -> Result<(T, T)> {
    check_len("hybrid score", w.dim(), x1.len())?;
    let z = PairFeatureZ::from_pair(x1, x2)?;
    Ok((dot(&w.w_d, &z.diff), dot(&w.w_m, &z.mult)))
}

pub fn hybrid_score<T: Scalar>(w: &HybridWeights<T>, x1: &[T], x2: &[T]) -> Result<T> {
    let (d, m) = sub_scores(w, x1, x2)?;
    Ok(d + m)
}

fn score_z<T: Scalar>(w: &HybridWeights<T>, z: &PairFeatureZ<T>) -> T {
    dot(&w.w_d, &z.diff) + dot(&w.w_m, &z.mult)
}

/// Pair label: same identity or different identities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Same,
    Different,
}

impl PairLabel {
    pub fn sign<T: Scalar>(self) -> T {
        match self {
            PairLabel::Same => T::one(),
            PairLabel::Different => -T::one(),
        }
    }

    pub fn from_sign(y: i32) -> Result<Self> {
        match y {
            1 => Ok(PairLabel::Same),
            -1 => Ok(PairLabel::Different),
            other => Err(Error::Argument(format!("pair label must be +1 or -1, got {other}"))),
        }
    }
}

/// `log(1 + e^t)` without overflow.
pub fn softplus<T: Scalar>(t: T) -> T {
    t.max(T::zero()) + (-t.abs()).exp().ln_1p()
}

/// `1 / (1 + e^{-t})` without overflow.
pub fn sigmoid<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Gradient w.r.t. `W = [w_d, w_m]`, including the regularizer.
    pub grad_w: HybridWeights<T>,
    /// Gradient w.r.t. each sample's `z`.
    pub grad_z: Vec<PairFeatureZ<T>>,
    pub scores: Vec<T>,
}

/// `(1/K) sum_k log(1 + exp(-y_k W.z_k)) + (alpha/2) |W|^2`.
pub fn logistic_loss<T: Scalar>(
    w: &HybridWeights<T>,
    batch: &[(PairFeatureZ<T>, PairLabel)],
    alpha: T,
) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::Argument("logistic loss needs at least one sample".into()));
    }
    if alpha < T::zero() || !alpha.is_finite() {
        return Err(Error::Argument(format!("regularization weight must be >= 0, got {alpha}")));
    }
    let d = w.dim();
    let k = T::of(batch.len() as f64);
    let mut data_term = T::zero();
    let mut grad_w = HybridWeights {
        w_d: w.w_d.iter().map(|&v| alpha * v).collect(),
        w_m: w.w_m.iter().map(|&v| alpha * v).collect(),
    };
    let mut grad_z = Vec::with_capacity(batch.len());
    let mut scores = Vec::with_capacity(batch.len());
    for (z, label) in batch {
        check_len("logistic loss", z.dim(), d)?;
        let y: T = label.sign();
        let s = score_z(w, z);
        data_term += softplus(-y * s);
        // d/ds log(1 + e^{-ys}) = -y * sigmoid(-ys)
        let ds = -y * sigmoid(-y * s) / k;
        for (g, &v) in grad_w.w_d.iter_mut().zip(&z.diff) {
            *g += ds * v;
        }
        for (g, &v) in grad_w.w_m.iter_mut().zip(&z.mult) {
            *g += ds * v;
        }
        grad_z.push(PairFeatureZ {
            diff: w.w_d.iter().map(|&v| ds * v).collect(),
            mult: w.w_m.iter().map(|&v| ds * v).collect(),
        });
        scores.push(s);
    }
    let loss = data_term / k + alpha / T::of(2.0) * w.squared_norm();
    Ok(LossOutput {
        loss,
        grad_w,
        grad_z,
        scores,
    })
}

/// Dense `d x d` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix<T> {
    d: usize,
    data: Vec<T>,
}

impl<T: Scalar> SquareMatrix<T> {
    pub fn new(d: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != d * d {
            return Err(Error::shape(format!("{} values do not form a {d}x{d} matrix", data.len())));
        }
        Ok(SquareMatrix { d, data })
    }

    pub fn identity(d: usize) -> Self {
        let mut data = vec![T::zero(); d * d];
        for i in 0..d {
            data[i * d + i] = T::one();
        }
        SquareMatrix { d, data }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.d + c]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Fixed (non-learned) comparison metrics.
#[derive(Clone, Copy, Debug)]
pub enum Baseline<'a, T> {
    /// Squared Euclidean distance; smaller is more similar.
    Euclidean,
    /// Inner product of l2-normalized vectors; larger is more similar.
    Cosine,
    /// `(x1 - x2)^T M (x1 - x2)`; smaller is more similar.
    Mahalanobis(&'a SquareMatrix<T>),
}

const NORMALIZED_TOLERANCE: f64 = 1e-6;

pub fn baseline_score<T: Scalar>(metric: Baseline<'_, T>, x1: &[T], x2: &[T]) -> Result<T> {
    check_len("baseline score", x1.len(), x2.len())?;
    match metric {
        Baseline::Euclidean => Ok(x1.iter().zip(x2).map(|(&a, &b)| (a - b) * (a - b)).sum()),
        Baseline::Cosine => {
            for (name, x) in [("x1", x1), ("x2", x2)] {
                let norm = dot(x, x).sqrt().as_f64();
                if (norm - 1.0).abs() > NORMALIZED_TOLERANCE {
                    return Err(Error::Precondition(format!(
                        "cosine score needs l2-normalized inputs, |{name}| = {norm}"
                    )));
                }
            }
            Ok(dot(x1, x2))
        }
        Baseline::Mahalanobis(m) => {
            check_len("mahalanobis", m.dim(), x1.len())?;
            let diff: Vec<T> = x1.iter().zip(x2).map(|(&a, &b)| a - b).collect();
            let mut acc = T::zero();
            for (r, &dr) in diff.iter().enumerate() {
                let row = &m.data[r * m.d..(r + 1) * m.d];
                acc += dr * dot(row, &diff);
            }
            Ok(acc)
        }
    }
}

/// Scales `x` to unit l2 norm; the zero vector is returned unchanged.
pub fn l2_normalize<T: Scalar>(x: &[T]) -> Vec<T> {
    let norm = dot(x, x).sqrt();
    if norm > T::zero() {
        x.iter().map(|&v| v / norm).collect()
    } else {
        x.to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Mahalanobis,
    Euclidean,
    Cosine,
    Hybrid,
}

/// Number of learnable metric parameters for feature dimension `d`.
pub fn count_metric_params(kind: MetricKind, d: usize) -> usize {
    match kind {
        MetricKind::Mahalanobis => d * d,
        MetricKind::Euclidean | MetricKind::Cosine => 0,
        MetricKind::Hybrid => 2 * d,
    }
}
