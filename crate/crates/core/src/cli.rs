//! The `dhsl` command line: `synth`, `train`, `eval` and `params`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_synthetic, make_split, Dataset, Protocol, ProtocolSplit, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    average_curves, emit_results, evaluate_trial, extract_features, probe_gallery, score_distributions, EvalMetric,
    EvalReport, OutputFormat, RankTable,
};
use crate::layers::StackConfig;
use crate::model::{HeadMode, Model};
use crate::siamese::FeatureBatch;
use crate::similarity::{count_metric_params, MetricKind};
use crate::trainer::{parse_kv, Checkpoint, PairSampler, TrainConfig, Trainer, TrainingLog};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.dhsl";
pub const LOG_FILE: &str = "train_log.tsv";

#[derive(Debug, Parser)]
#[command(name = "dhsl", version, about = "Siamese CNN with a learned hybrid similarity for person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic identity dataset.
    Synth(SynthArgs),
    /// Train one model per protocol trial.
    Train(RunArgs),
    /// Evaluate trained trials and write CMC, rank-table and score files.
    Eval(RunArgs),
    /// Print parameter counts per layer and per metric head.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub identities: usize,
    /// Images per identity per camera.
    #[arg(long, default_value_t = 2)]
    pub per_id: usize,
    #[arg(long, default_value_t = 2)]
    pub cameras: usize,
    #[arg(long, default_value_t = 0)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0.2)]
    pub difficulty: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 1.0)]
    pub channel_mult: f64,
}

/// Flags shared by `train` and `eval`; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory (train) or results directory (eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory holding trained trials (eval only; defaults to --out).
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub pos_per_batch: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub channel_mult: Option<f64>,
    /// hybrid | euclidean | cosine | diff-only | mult-only
    #[arg(long)]
    pub metric: Option<String>,
    /// grid | viper | cuhk03 | custom:<train>:<test>:<trials>
    #[arg(long)]
    pub protocol: Option<String>,
    /// Run only the first N trials of the protocol.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Stop each trial after this many steps (0 = no cap).
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// hybrid | diff-only | mult-only (trained projection terms)
    #[arg(long)]
    pub head_mode: Option<String>,
    #[arg(long)]
    pub hard_mining: bool,
    /// tsv | jsonl
    #[arg(long)]
    pub format: Option<String>,
    /// Continue trials from their last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    pub force: bool,
}

/// Training config plus everything a run needs around it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    pub protocol: Protocol,
    /// 0 runs every trial of the protocol.
    pub trials: usize,
    pub max_steps: u64,
    pub metric: EvalMetric,
    pub workers: usize,
    pub format: OutputFormat,
    pub histogram_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            protocol: Protocol::ViperLike,
            trials: 0,
            max_steps: 0,
            metric: EvalMetric::Hybrid,
            workers: 1,
            format: OutputFormat::Tsv,
            histogram_bins: 20,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        let num = |v: &str| -> Result<u64> { v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))) };
        match key {
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "protocol" => self.protocol = value.parse()?,
            "trials" => self.trials = num(value)? as usize,
            "max_steps" => self.max_steps = num(value)?,
            "metric" => self.metric = value.parse()?,
            "workers" => self.workers = num(value)? as usize,
            "format" => self.format = value.parse()?,
            "histogram_bins" => self.histogram_bins = num(value)? as usize,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.train.to_text();
        for (k, v) in [
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
            ("protocol", self.protocol.to_string()),
            ("trials", self.trials.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("metric", self.metric.to_string()),
            ("workers", self.workers.to_string()),
            ("format", self.format.to_string()),
            ("histogram_bins", self.histogram_bins.to_string()),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.workers == 0 || self.histogram_bins == 0 {
            return Err(Error::Config("workers and histogram_bins must be at least 1".into()));
        }
        Ok(())
    }

    /// Config file (if any) then explicit flags, on top of `base`.
    pub fn resolve(base: RunConfig, args: &RunArgs) -> Result<Self> {
        let mut cfg = base;
        if let Some(path) = &args.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_kv(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        let flags: Vec<(&str, Option<String>)> = vec![
            ("data", args.data.as_ref().map(|p| p.display().to_string())),
            ("out", args.out.as_ref().map(|p| p.display().to_string())),
            ("seed", args.seed.map(|v| v.to_string())),
            ("workers", args.workers.map(|v| v.to_string())),
            ("alpha", args.alpha.map(|v| v.to_string())),
            ("base_lr", args.base_lr.map(|v| v.to_string())),
            ("batch_size", args.batch.map(|v| v.to_string())),
            ("pos_per_batch", args.pos_per_batch.map(|v| v.to_string())),
            ("momentum", args.momentum.map(|v| v.to_string())),
            ("min_lr", args.min_lr.map(|v| v.to_string())),
            ("channel_multiplier", args.channel_mult.map(|v| v.to_string())),
            ("metric", args.metric.clone()),
            ("protocol", args.protocol.clone()),
            ("trials", args.trials.map(|v| v.to_string())),
            ("max_epochs", args.max_epochs.map(|v| v.to_string())),
            ("max_steps", args.max_steps.map(|v| v.to_string())),
            ("head_mode", args.head_mode.clone()),
            ("hard_negative_mining", args.hard_mining.then(|| "true".to_string())),
            ("format", args.format.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn splits(&self, dataset: &Dataset) -> Result<Vec<ProtocolSplit>> {
        let mut splits = make_split(&dataset.manifest, self.protocol, self.train.seed)?;
        if self.trials > 0 {
            splits.truncate(self.trials);
        }
        Ok(splits)
    }
}

pub fn trial_dir(run: &Path, trial: usize) -> PathBuf {
    run.join(format!("trial_{trial:02}"))
}

fn is_nonempty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    if is_nonempty_dir(&args.out) {
        if !args.force {
            return Err(Error::Config(format!(
                "{} exists and is not empty (use --force to replace it)",
                args.out.display()
            )));
        }
        std::fs::remove_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    }
    let spec = SyntheticSpec::new(args.identities, args.per_id, args.cameras, args.difficulty, args.seed)?
        .with_distractors(args.distractors);
    let dataset = generate_synthetic(&spec)?;
    dataset.write(&args.out)?;
    let m = &dataset.manifest;
    Ok(format!(
        "wrote {} images to {}: {} identities, {} cameras, {} distractors\n",
        dataset.len(),
        args.out.display(),
        m.identities().len(),
        m.cameras().len(),
        m.distractors().len()
    ))
}

pub fn cmd_train(args: &RunArgs) -> Result<String> {
    let cfg = RunConfig::resolve(RunConfig::default(), args)?;
    let dataset = Dataset::open(&cfg.data)?;
    let splits = cfg.splits(&dataset)?;
    let config_path = cfg.out.join(CONFIG_FILE);
    if !args.resume && !args.force && config_path.exists() {
        return Err(Error::Config(format!(
            "{} already holds a run (use --resume or --force)",
            cfg.out.display()
        )));
    }
    if args.force && !args.resume && cfg.out.exists() {
        std::fs::remove_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    }
    create_dir(&cfg.out)?;
    write_text(&config_path, &cfg.to_text())?;

    let mut report = String::new();
    for split in &splits {
        let dir = trial_dir(&cfg.out, split.trial);
        create_dir(&dir)?;
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        let log_path = dir.join(LOG_FILE);
        let sampler = PairSampler::new(&dataset.manifest, &split.train_ids)?;
        let mut trainer = if args.resume && ckpt_path.exists() {
            Trainer::<f32>::resume(Checkpoint::load(&ckpt_path)?, sampler)?
        } else {
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            let train = TrainConfig {
                seed: split.seed,
                ..cfg.train.clone()
            };
            Trainer::new(train, sampler)?
        };
        let mut log = TrainingLog::open(&log_path)?;
        let steps_per_epoch = trainer.steps_per_epoch();
        let capped = |t: &Trainer<f32>| cfg.max_steps > 0 && t.state().step >= cfg.max_steps;
        let mut last_loss = f64::NAN;
        while !trainer.finished() && !capped(&trainer) {
            let record = trainer.step(&dataset)?;
            log.append(&record).map_err(|e| Error::io(&log_path, e))?;
            last_loss = record.loss;
            if trainer.state().epoch_steps == 0 {
                trainer.save(&ckpt_path)?;
            }
        }
        trainer.save(&ckpt_path)?;
        let _ = writeln!(
            report,
            "trial {}: {} steps ({} per epoch), {} epochs, lr {:e}, last loss {:.4}",
            split.trial,
            trainer.state().step,
            steps_per_epoch,
            trainer.state().epoch,
            trainer.state().lr,
            last_loss
        );
    }
    Ok(report)
}

fn check_metric(metric: EvalMetric, model: &Model<f32>) -> Result<()> {
    let pinned = match (metric, model.head_mode()) {
        (EvalMetric::MultOnly, HeadMode::DiffOnly) => Some("w_m"),
        (EvalMetric::DiffOnly, HeadMode::MultOnly) => Some("w_d"),
        _ => None,
    };
    if let Some(term) = pinned {
        return Err(Error::Config(format!(
            "metric {metric} scores with {term}, which is pinned to zero in a {} model",
            model.head_mode()
        )));
    }
    Ok(())
}

pub fn cmd_eval(args: &RunArgs) -> Result<String> {
    let run = args
        .run
        .clone()
        .or_else(|| args.out.clone())
        .ok_or_else(|| Error::Config("eval needs --run (or --out) pointing at a trained run".into()))?;
    let saved = std::fs::read_to_string(run.join(CONFIG_FILE)).map_err(|e| Error::io(run.join(CONFIG_FILE), e))?;
    let mut base = RunConfig::from_text(&saved)?;
    base.out = run.join("eval");
    let cfg = RunConfig::resolve(base, args)?;
    let dataset = Dataset::open(&cfg.data)?;
    let splits = cfg.splits(&dataset)?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join(CONFIG_FILE), &cfg.to_text())?;

    let mut curves = Vec::new();
    let (mut x1_all, mut x2_all, mut head, mut d) = (Vec::new(), Vec::new(), None, 0);
    for split in &splits {
        let path = trial_dir(&run, split.trial).join(CHECKPOINT_FILE);
        let mut model = Checkpoint::<f32>::load(&path)?.model;
        let expected = StackConfig::standard(cfg.train.channel_multiplier);
        if model.stack_config() != &expected {
            return Err(Error::Config(format!(
                "{} has feature dim {}, config channel multiplier {} implies a different network",
                path.display(),
                model.feature_dim(),
                cfg.train.channel_multiplier
            )));
        }
        check_metric(cfg.metric, &model)?;
        curves.push(evaluate_trial(&mut model, &dataset, split, cfg.metric)?);
        if split.trial == splits[0].trial {
            // sub-score diagnostics over all probe/gallery pairs of the first trial
            let pg = probe_gallery(&dataset.manifest, &split.test_ids, split.distractors_in_gallery)?;
            let probes = extract_features(&mut model, &dataset, &pg.probes)?;
            let gallery = extract_features(&mut model, &dataset, &pg.gallery)?;
            d = model.feature_dim();
            for p in 0..probes.len() {
                for g in 0..gallery.len() {
                    x1_all.extend_from_slice(probes.row(p));
                    x2_all.extend_from_slice(gallery.row(g));
                }
            }
            head = Some(model.head().clone());
        }
    }
    let curve = average_curves(&curves)?;
    let table = RankTable::standard(&curve);
    let head = head.expect("at least one trial");
    let n = x1_all.len() / d.max(1);
    let distributions = score_distributions(
        &head,
        &FeatureBatch::new(n, d, x1_all)?,
        &FeatureBatch::new(n, d, x2_all)?,
        cfg.histogram_bins,
    )?;
    let report = EvalReport {
        metric: cfg.metric,
        curve,
        table,
        distributions: Some(distributions),
    };
    let written = emit_results(&report, &cfg.out, cfg.format)?;
    let mut out = format!(
        "{} over {} trial(s), gallery size {}\n",
        cfg.metric, report.curve.trials, report.curve.gallery_size
    );
    for (r, v) in report.table.ranks.iter().zip(&report.table.rates) {
        let _ = writeln!(out, "rank {r:>2}: {:.2}%", v * 100.0);
    }
    for p in written {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    Ok(out)
}

pub fn cmd_params(args: &ParamsArgs) -> Result<String> {
    if !(args.channel_mult > 0.0) {
        return Err(Error::Config(format!("channel multiplier must be positive, got {}", args.channel_mult)));
    }
    let model = Model::<f32>::new(StackConfig::standard(args.channel_mult), HeadMode::Hybrid)?;
    let stack = model.extractor().stack();
    let mut out = String::new();
    let _ = writeln!(out, "{:<6}{:>12}{:>10}", "layer", "weights", "biases");
    let (mut conv_w, mut conv_b, mut bn) = (0, 0, 0);
    for (name, c) in stack.count_params() {
        let _ = writeln!(out, "{name:<6}{:>12}{:>10}", c.weights, c.biases);
        if name.starts_with('C') {
            conv_w += c.weights;
            conv_b += c.biases;
        } else {
            bn += c.total();
        }
    }
    let d = model.feature_dim();
    let _ = writeln!(out, "conv total: {conv_w} weights + {conv_b} biases");
    let _ = writeln!(out, "batch-norm affine: {bn}");
    let _ = writeln!(out, "feature dim d: {d}");
    for (name, kind) in [
        ("mahalanobis", MetricKind::Mahalanobis),
        ("euclidean", MetricKind::Euclidean),
        ("cosine", MetricKind::Cosine),
        ("hybrid", MetricKind::Hybrid),
    ] {
        let _ = writeln!(out, "{name} head: {}", count_metric_params(kind, d));
    }
    let _ = writeln!(out, "learnable total (hybrid): {}", model.learnable_count());
    Ok(out)
}

fn set_workers(args: &RunArgs) -> Result<()> {
    let n = args.workers.unwrap_or(1);
    if n == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    // a second initialization in one process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => {
            set_workers(&a)?;
            cmd_train(&a)
        }
        Command::Eval(a) => {
            set_workers(&a)?;
            cmd_eval(&a)
        }
        Command::Params(a) => cmd_params(&a),
    }
}
