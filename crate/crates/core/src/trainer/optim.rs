use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::model::{Model, PairBatch};
use crate::scalar::Scalar;

/// Relative improvement an epoch loss must show to count as progress.
pub const PLATEAU_THRESHOLD: f64 = 1e-3;

/// Velocity buffers, one per learnable tensor in [`Model::params_mut`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> MomentumState<T> {
    pub fn new(model: &mut Model<T>) -> Self {
        MomentumState {
            velocity: model.params_mut().iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.velocity.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws conv filters and head weights from N(0, init_std^2); biases and
/// batch-norm shifts start at 0, scales at 1, running statistics at (0, 1).
pub fn init_params<T: Scalar>(model: &mut Model<T>, config: &TrainConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_std).expect("validated std");
    let mut draw = |v: &mut [T]| v.iter_mut().for_each(|x| *x = T::of(normal.sample(&mut rng)));
    for layer in model.extractor_mut().stack_mut().layers_mut() {
        match layer {
            Layer::Conv(l) => {
                draw(l.filters.data_mut());
                l.bias.fill(T::zero());
            }
            Layer::BatchNorm(l) => {
                l.gamma.fill(T::one());
                l.beta.fill(T::zero());
                l.running_mean.fill(T::zero());
                l.running_var.fill(T::one());
            }
            Layer::MaxPool(_) | Layer::AvgPool(_) => {}
        }
    }
    let mut head = model.head().clone();
    draw(&mut head.w_d);
    draw(&mut head.w_m);
    model.set_head(head).expect("same dimension");
    model.zero_grad();
}

/// One SGD step with classical momentum: `v = mu*v - lr*g`, `theta += v`.
/// Batch-norm running statistics move as a side effect of the forward pass.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut MomentumState<T>,
    batch: &PairBatch<T>,
    lr: f64,
    config: &TrainConfig,
    step: u64,
) -> Result<T> {
    let out = model.forward_backward(batch, T::of(config.alpha), Mode::Train)?;
    if !out.loss.is_finite() {
        return Err(Error::Divergence {
            layer: "loss".into(),
            step,
        });
    }
    let (mu, lr, wd) = (T::of(config.momentum), T::of(lr), T::of(config.cnn_weight_decay));
    let params = model.params_mut();
    if params.len() != state.velocity.len() {
        return Err(Error::State(format!(
            "momentum state holds {} tensors, model has {}",
            state.velocity.len(),
            params.len()
        )));
    }
    for (p, v) in params.into_iter().zip(&mut state.velocity) {
        let decay = if p.name.starts_with("head.") { T::zero() } else { wd };
        for ((theta, &g), vel) in p.value.iter_mut().zip(p.grad).zip(v.iter_mut()) {
            let g = g + decay * *theta;
            *vel = mu * *vel - lr * g;
            *theta += *vel;
        }
        if !p.value.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence { layer: p.name, step });
        }
    }
    model.enforce_head_mode();
    Ok(out.loss)
}

/// Number of trailing epochs in a stage that did not beat the best earlier
/// epoch of that stage by more than the plateau threshold. The first epoch
/// of a stage has nothing to improve on and counts as stale.
pub fn stale_epochs(history: &[f64]) -> usize {
    let mut best = f64::INFINITY;
    let mut last_progress = None;
    for (i, &loss) in history.iter().enumerate() {
        if i > 0 && loss < best - PLATEAU_THRESHOLD * best.abs() {
            last_progress = Some(i);
        }
        best = best.min(loss);
    }
    match last_progress {
        Some(i) => history.len() - 1 - i,
        None => history.len(),
    }
}

/// Learning rate after an epoch, given the epoch losses of the current
/// stage (since the last decay). Decays by `lr_decay_factor`, floored at
/// `min_lr`, once `plateau_patience` epochs pass without progress.
pub fn lr_schedule_step(history: &[f64], lr: f64, config: &TrainConfig) -> f64 {
    if stale_epochs(history) >= config.plateau_patience {
        (lr * config.lr_decay_factor).max(config.min_lr)
    } else {
        lr
    }
}
