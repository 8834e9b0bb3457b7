use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{encode, Checkpoint};
use super::config::TrainConfig;
use super::optim::{init_params, lr_schedule_step, train_step, MomentumState};
use super::sampler::{build_batch, mine_hard_negatives, PairIndex, PairSampler};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::StackConfig;
use crate::model::Model;
use crate::scalar::Scalar;

const INIT_SALT: u64 = 0x696e_6974;
const MINING_SALT: u64 = 0x6d69_6e65;

/// Progress counters carried across checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub epoch_loss_sum: f64,
    pub epoch_steps: u64,
    /// Epoch losses since the last learning-rate decay.
    pub stage_history: Vec<f64>,
    /// Hard negatives for the current epoch (empty unless mining).
    pub mined: Vec<PairIndex>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            lr: config.base_lr,
            epoch_loss_sum: 0.0,
            epoch_steps: 0,
            stage_history: Vec::new(),
            mined: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    /// Rate used for this step.
    pub lr: f64,
    pub loss: f64,
    pub wall_seconds: f64,
}

/// Drives training over one identity set. Every step draws from its own
/// random stream keyed by the step number, so a resumed run replays the
/// same batches as an uninterrupted one.
pub struct Trainer<T> {
    config: TrainConfig,
    model: Model<T>,
    momentum: MomentumState<T>,
    state: TrainState,
    sampler: PairSampler,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model at the standard input size.
    pub fn new(config: TrainConfig, sampler: PairSampler) -> Result<Self> {
        let stack = StackConfig::standard(config.channel_multiplier);
        Self::with_stack(config, stack, sampler)
    }

    pub fn with_stack(config: TrainConfig, stack: StackConfig, sampler: PairSampler) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(stack, config.head_mode)?;
        init_params(&mut model, &config, crate::data::mix_seed(config.seed, INIT_SALT));
        let momentum = MomentumState::new(&mut model);
        let state = TrainState::new(&config);
        Ok(Trainer {
            config,
            model,
            momentum,
            state,
            sampler,
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(checkpoint: Checkpoint<T>, sampler: PairSampler) -> Result<Self> {
        let Checkpoint { model, config, state } = checkpoint;
        let (state, momentum) =
            state.ok_or_else(|| Error::State("checkpoint carries no optimizer state to resume from".into()))?;
        Ok(Trainer {
            config,
            model,
            momentum,
            state,
            sampler,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn momentum(&self) -> &MomentumState<T> {
        &self.momentum
    }

    pub fn steps_per_epoch(&self) -> u64 {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch as u64
        } else {
            self.sampler.image_count().div_ceil(self.config.batch_size).max(1) as u64
        }
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.max_epochs as u64
    }

    fn mine(&mut self, dataset: &Dataset) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::data::mix_seed(self.config.seed, MINING_SALT));
        rng.set_stream(self.state.epoch);
        self.state.mined = mine_hard_negatives(
            &mut self.model,
            dataset,
            &self.sampler,
            self.config.mining_pool,
            self.config.mining_keep,
            &mut rng,
        )?;
        Ok(())
    }

    /// One optimization step; closes the epoch (and applies the schedule)
    /// when the epoch's step budget is used up.
    pub fn step(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        if self.state.epoch_steps == 0 && self.config.hard_negative_mining {
            self.mine(dataset)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.state.step);
        let negatives = self.config.hard_negative_mining.then_some(self.state.mined.as_slice());
        let pairs = self.sampler.sample_batch(&self.config, negatives, &mut rng)?;
        let batch = build_batch::<T, _>(dataset, &pairs, self.config.augment, &mut rng)?;
        let lr = self.state.lr;
        let loss = train_step(&mut self.model, &mut self.momentum, &batch, lr, &self.config, self.state.step)?.as_f64();
        let record = StepRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            lr,
            loss,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        self.state.step += 1;
        self.state.epoch_loss_sum += loss;
        self.state.epoch_steps += 1;
        if self.state.epoch_steps == self.steps_per_epoch() {
            self.state.stage_history.push(self.state.epoch_loss_sum / self.state.epoch_steps as f64);
            let next = lr_schedule_step(&self.state.stage_history, self.state.lr, &self.config);
            if next != self.state.lr {
                self.state.lr = next;
                self.state.stage_history.clear();
            }
            self.state.epoch += 1;
            self.state.epoch_loss_sum = 0.0;
            self.state.epoch_steps = 0;
        }
        Ok(record)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode(&self.model, &self.config, Some((&self.state, &self.momentum)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Append-only tab-separated training log.
pub struct TrainingLog {
    out: BufWriter<File>,
}

pub const LOG_HEADER: &str = "step\tepoch\tlr\tloss\twall_seconds";

impl TrainingLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = TrainingLog { out: BufWriter::new(file) };
        if fresh {
            writeln!(log.out, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(log)
    }

    pub fn append(&mut self, r: &StepRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}\t{}\t{:e}\t{:.6}\t{:.3}", r.step, r.epoch, r.lr, r.loss, r.wall_seconds)?;
        self.out.flush()
    }
}
