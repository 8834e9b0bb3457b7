//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always visible.
//! Pass criterion numbers to run a subset: `cargo test --test acceptance -- 4 7`.

mod common;

use std::time::Instant;

use common::checks::*;
use dhsl::data::{generate_synthetic, make_split, Dataset, ImageRecord, Protocol, ProtocolSplit, SyntheticSpec};
use dhsl::data::{DatasetManifest, ManifestEntry};
use dhsl::evaluation::{
    evaluate_probe_gallery, evaluate_trial, extract_features, match_ranks, probe_gallery, CmcCurve, EvalMetric,
    ProbeGallery, ScoreMatrix,
};
use dhsl::layers::{LayerStack, Mode, StackConfig};
use dhsl::model::{HeadMode, Model};
use dhsl::similarity::{count_metric_params, sub_scores, MetricKind};
use dhsl::trainer::{init_params, Checkpoint, PairSampler, TrainConfig, Trainer};
use dhsl::{Dims, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generalization and ablation setup: 40 synthetic identities with two
/// images per camera at full nuisance strength. Easier settings let the
/// untrained Euclidean baseline match identities by raw colour alone.
const GEN_IDENTITIES: usize = 40;
const GEN_IMAGES_PER_CAMERA: usize = 2;
const GEN_DIFFICULTY: f64 = 1.0;
const GEN_TRIALS: usize = 3;
const GEN_STEPS: usize = 600;
const GEN_CHANNEL_MULTIPLIER: f64 = 0.5;
const GEN_SEED: u64 = 1;
const SPLIT_SEED: u64 = 9;

const SMALL_BATCH: usize = 16;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

/// Models trained once and shared by the generalization, ablation and
/// additivity criteria.
struct Trained {
    ds: Dataset,
    splits: Vec<ProtocolSplit>,
    untrained: Vec<Model<f32>>,
    hybrid: Vec<Model<f32>>,
    diff_only: Vec<Model<f32>>,
    mult_only: Vec<Model<f32>>,
}

#[derive(Default)]
struct Shared {
    trained: Option<Trained>,
}

fn small_config(seed: u64, channel_multiplier: f64, head_mode: HeadMode) -> TrainConfig {
    TrainConfig {
        batch_size: SMALL_BATCH,
        pos_per_batch: SMALL_BATCH / 2,
        channel_multiplier,
        seed,
        head_mode,
        ..Default::default()
    }
}

fn train_trial(ds: &Dataset, split: &ProtocolSplit, mode: HeadMode) -> Model<f32> {
    let config = small_config(split.seed, GEN_CHANNEL_MULTIPLIER, mode);
    let sampler = PairSampler::new(&ds.manifest, &split.train_ids).unwrap();
    let mut trainer = Trainer::new(config, sampler).unwrap();
    for _ in 0..GEN_STEPS {
        trainer.step(ds).unwrap();
    }
    trainer.into_model()
}

impl Shared {
    fn trained(&mut self, modes: &[HeadMode]) -> &mut Trained {
        let t = self.trained.get_or_insert_with(|| {
            let spec = SyntheticSpec::new(GEN_IDENTITIES, GEN_IMAGES_PER_CAMERA, 2, GEN_DIFFICULTY, GEN_SEED).unwrap();
            let ds = generate_synthetic(&spec).unwrap();
            let mut splits = make_split(&ds.manifest, Protocol::ViperLike, SPLIT_SEED).unwrap();
            splits.truncate(GEN_TRIALS);
            let untrained = splits
                .iter()
                .map(|s| {
                    let config = small_config(s.seed, GEN_CHANNEL_MULTIPLIER, HeadMode::Hybrid);
                    let sampler = PairSampler::new(&ds.manifest, &s.train_ids).unwrap();
                    Trainer::<f32>::new(config, sampler).unwrap().into_model()
                })
                .collect();
            Trained { ds, splits, untrained, hybrid: Vec::new(), diff_only: Vec::new(), mult_only: Vec::new() }
        });
        for &mode in modes {
            let slot = match mode {
                HeadMode::Hybrid => &mut t.hybrid,
                HeadMode::DiffOnly => &mut t.diff_only,
                HeadMode::MultOnly => &mut t.mult_only,
            };
            if slot.is_empty() {
                *slot = t.splits.iter().map(|s| train_trial(&t.ds, s, mode)).collect();
            }
        }
        t
    }
}

fn mean_rank1(models: &mut [Model<f32>], ds: &Dataset, splits: &[ProtocolSplit], metric: EvalMetric) -> (f64, Vec<f64>) {
    let per_trial: Vec<f64> = models
        .iter_mut()
        .zip(splits)
        .map(|(m, s)| evaluate_trial(m, ds, s, metric).unwrap().rank1())
        .collect();
    (per_trial.iter().sum::<f64>() / per_trial.len() as f64, per_trial)
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn gradient_soundness(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut layer_worst: Vec<(&str, f64)> = Vec::new();
    let max_of = |errs: Vec<f64>| errs.into_iter().fold(0.0, f64::max);
    layer_worst.push(("conv", max_of((0..CONV_SHAPES.len()).map(conv_error).collect())));
    layer_worst.push(("batch-norm", max_of((0..BN_SETTINGS.len()).map(bn_error).collect())));
    layer_worst.push(("max-pool", max_of((0..MAXPOOL_SHAPES.len()).map(maxpool_error).collect())));
    layer_worst.push(("avg-pool", max_of((0..AVGPOOL_SHAPES.len()).map(avgpool_error).collect())));
    layer_worst.push(("diff", max_of((0..5).map(diff_error).collect())));
    layer_worst.push(("mult", max_of((0..5).map(mult_error).collect())));
    layer_worst.push(("loss", max_of([0.0, 5e-2, 1.0].iter().enumerate().map(|(s, &a)| loss_error(a, s as u64)).collect())));
    let end_to_end = end_to_end_errors(6);
    let e2e_worst = end_to_end.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let layer_max = layer_worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = layer_max < 1e-4 && e2e_worst < 1e-3 && secs < 60.0;
    let layers: Vec<String> = layer_worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome::new(
        pass,
        format!("layers [{}] < 1e-4; end-to-end d=16 {e2e_worst:.1e} < 1e-3; {secs:.1} s", layers.join(", ")),
    )
}

/// Output sizes (h, w, c) of every layer at the 128x48 input.
const LAYER_OUTPUTS: [(&str, (usize, usize, usize)); 10] = [
    ("C1", (128, 48, 32)),
    ("B1", (128, 48, 32)),
    ("M1", (64, 24, 32)),
    ("C2", (64, 24, 64)),
    ("B2", (64, 24, 64)),
    ("M2", (32, 12, 64)),
    ("C3", (32, 12, 128)),
    ("B3", (32, 12, 128)),
    ("M3", (16, 6, 128)),
    ("A1", (16, 1, 128)),
];

fn shape_fidelity(_: &mut Shared) -> Outcome {
    let n = 2;
    let mut stack = LayerStack::<f32>::new(StackConfig::standard(1.0)).unwrap();
    let mut x = Tensor4::from_vec(Dims::new(n, 128, 48, 3), vec![0.5; n * 128 * 48 * 3]).unwrap();
    let mut mismatches = Vec::new();
    for (layer, &(name, (h, w, c))) in stack.layers_mut().iter_mut().zip(&LAYER_OUTPUTS) {
        x = layer.forward(&x, Mode::Train, 1).unwrap();
        if layer.name() != name || x.dims() != Dims::new(n, h, w, c) {
            mismatches.push(format!("{} -> {}", layer.name(), x.dims()));
        }
    }
    let d = stack.feature_dim();
    let rows = stack.layers().len();
    Outcome::new(
        mismatches.is_empty() && rows == 10 && d == 2048,
        format!("{rows} layers, A1 {} (d = {d}){}", x.dims(), if mismatches.is_empty() { String::new() } else { format!("; mismatches {mismatches:?}") }),
    )
}

fn parameter_accounting(_: &mut Shared) -> Outcome {
    let expected = |kind, d: usize| match kind {
        MetricKind::Mahalanobis => d * d,
        MetricKind::Euclidean | MetricKind::Cosine => 0,
        MetricKind::Hybrid => 2 * d,
    };
    let kinds = [MetricKind::Mahalanobis, MetricKind::Euclidean, MetricKind::Cosine, MetricKind::Hybrid];
    let all_match = [1, 16, 128, 1024, 2048]
        .iter()
        .all(|&d| kinds.iter().all(|&k| count_metric_params(k, d) == expected(k, d)));
    let at_2048: Vec<usize> = kinds.iter().map(|&k| count_metric_params(k, 2048)).collect();
    let model = Model::<f32>::new(StackConfig::standard(1.0), HeadMode::Hybrid).unwrap();
    let stack: usize = model.extractor().stack().count_params().iter().map(|(_, c)| c.total()).sum();
    let head = model.learnable_count() - stack;
    Outcome::new(
        all_match && at_2048 == [2048 * 2048, 0, 0, 4096] && head == 4096,
        format!("d=2048: mahalanobis {}, euclidean {}, cosine {}, hybrid {}; model head {head}", at_2048[0], at_2048[1], at_2048[2], at_2048[3]),
    )
}

fn overfit(_: &mut Shared) -> Outcome {
    let ds = generate_synthetic(&SyntheticSpec::new(10, 2, 2, 0.2, 4).unwrap()).unwrap();
    let ids = ds.manifest.identities();
    let pg = probe_gallery(&ds.manifest, &ids, false).unwrap();
    let config = small_config(11, 1.0, HeadMode::Hybrid);
    let sampler = PairSampler::new(&ds.manifest, &ids).unwrap();
    let mut trainer = Trainer::<f32>::new(config, sampler).unwrap();
    let start = Instant::now();
    let mut rank1 = 0.0;
    let mut steps = 0;
    while steps < 2000 {
        for _ in 0..25 {
            trainer.step(&ds).unwrap();
        }
        steps += 25;
        rank1 = evaluate_probe_gallery(trainer.model_mut(), &ds, &pg, EvalMetric::Hybrid, "train").unwrap().rank1();
        if rank1 >= 0.95 {
            break;
        }
    }
    Outcome::new(
        rank1 >= 0.95,
        format!(
            "training rank-1 {} after {steps} steps (batch {SMALL_BATCH} of {} images), {:.0} s",
            pct(rank1),
            ds.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn generalization(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let t = shared.trained(&[HeadMode::Hybrid]);
    let (hybrid, per_trial) = mean_rank1(&mut t.hybrid, &t.ds, &t.splits, EvalMetric::Hybrid);
    let (euclid, _) = mean_rank1(&mut t.untrained, &t.ds, &t.splits, EvalMetric::Euclidean);
    let chance = 1.0 / t.splits[0].test_ids.len() as f64;
    Outcome::new(
        hybrid >= 5.0 * chance && hybrid > euclid,
        format!(
            "hybrid rank-1 {} (trials {:?}) vs chance {} x5 and untrained euclidean {}; {GEN_STEPS} steps x {GEN_TRIALS} trials, {:.0} s",
            pct(hybrid),
            per_trial,
            pct(chance),
            pct(euclid),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn ablation(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let t = shared.trained(&[HeadMode::Hybrid, HeadMode::DiffOnly, HeadMode::MultOnly]);
    let (hybrid, _) = mean_rank1(&mut t.hybrid, &t.ds, &t.splits, EvalMetric::Hybrid);
    let (diff, _) = mean_rank1(&mut t.diff_only, &t.ds, &t.splits, EvalMetric::Hybrid);
    let (mult, _) = mean_rank1(&mut t.mult_only, &t.ds, &t.splits, EvalMetric::Hybrid);
    Outcome::new(
        hybrid >= diff.max(mult) - 0.02,
        format!(
            "hybrid {} vs diff-only {} / mult-only {} (margin 2 points); {:.0} s",
            pct(hybrid),
            pct(diff),
            pct(mult),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn untrained_model(seed: u64) -> Model<f32> {
    let mut model = Model::<f32>::new(StackConfig::standard(0.5), HeadMode::Hybrid).unwrap();
    init_params(&mut model, &TrainConfig::default(), seed);
    model
}

/// `ids` identities seen by two cameras, one uniform-noise image each.
fn noise_dataset(ids: u32, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut images = Vec::new();
    for id in 0..ids {
        for camera in 1..=2 {
            entries.push(ManifestEntry {
                path: format!("{id:04}_c{camera}_00.png").into(),
                identity: id,
                camera,
                is_distractor: false,
            });
            images.push(ImageRecord::from_fn(|_, _, _| rng.random::<f32>()));
        }
    }
    Dataset::new(DatasetManifest::new("noise", entries).unwrap(), images).unwrap()
}

fn cmc_properties(_: &mut Shared) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut curves: Vec<CmcCurve> = Vec::new();

    // chance level: untrained network, noise images, 10 seeds x 20 probes
    let gallery = 20u32;
    let mut hits = 0usize;
    let mut probes = 0usize;
    for seed in 0..10 {
        let ds = noise_dataset(gallery, 100 + seed);
        let mut model = untrained_model(200 + seed);
        let pg = probe_gallery(&ds.manifest, &ds.manifest.identities(), false).unwrap();
        let curve = evaluate_probe_gallery(&mut model, &ds, &pg, EvalMetric::Hybrid, "noise").unwrap();
        hits += (curve.rank1() * curve.probes as f64).round() as usize;
        probes += curve.probes;
        curves.push(curve);
    }
    let p = 1.0 / gallery as f64;
    let mean = probes as f64 * p;
    let sigma = (probes as f64 * p * (1.0 - p)).sqrt();
    let chance_ok = (hits as f64 - mean).abs() <= 3.0 * sigma;
    pass &= chance_ok;
    notes.push(format!("chance {hits}/{probes} hits vs {mean:.0} +- {:.1}", 3.0 * sigma));

    // distractor growth on a synthetic set with background images
    let ds = generate_synthetic(&SyntheticSpec::new(20, 1, 2, 0.6, 5).unwrap().with_distractors(60)).unwrap();
    let mut model = untrained_model(7);
    let ids = ds.manifest.identities();
    let base = probe_gallery(&ds.manifest, &ids, false).unwrap();
    let distractors = ds.manifest.distractors();
    let mut previous: Option<CmcCurve> = None;
    let mut growth_ok = true;
    for extra in [0, 15, 30, 60] {
        let mut pg: ProbeGallery = base.clone();
        for &i in &distractors[..extra] {
            pg.gallery.push(i);
            pg.gallery_ids.push(dhsl::data::DISTRACTOR_ID);
        }
        let curve = evaluate_probe_gallery(&mut model, &ds, &pg, EvalMetric::Hybrid, "growth").unwrap();
        if let Some(prev) = &previous {
            growth_ok &= (1..=base.gallery.len()).all(|r| curve.rate(r) <= prev.rate(r));
        }
        previous = Some(curve.clone());
        curves.push(curve);
    }
    pass &= growth_ok;
    notes.push(format!("distractor growth {}", if growth_ok { "monotone" } else { "VIOLATED" }));

    // positive affine maps (and negation with flipped order) keep rankings
    let probes_f = extract_features(&mut model, &ds, &base.probes).unwrap();
    let gallery_f = extract_features(&mut model, &ds, &base.gallery).unwrap();
    let mut affine_ok = true;
    for metric in [EvalMetric::Hybrid, EvalMetric::Euclidean] {
        let scores = ScoreMatrix::compute(metric, model.head(), &probes_f, &gallery_f).unwrap();
        let hib = metric.higher_is_better();
        let want = match_ranks(&scores, &base.probe_ids, &base.gallery_ids, hib).unwrap();
        for (a, b) in [(2.0, 0.0), (0.5, 3.0), (7.25, -1.5)] {
            let mapped = ScoreMatrix::new(scores.rows, scores.cols, scores.data.iter().map(|s| a * s + b).collect()).unwrap();
            affine_ok &= match_ranks(&mapped, &base.probe_ids, &base.gallery_ids, hib).unwrap() == want;
        }
        let negated = ScoreMatrix::new(scores.rows, scores.cols, scores.data.iter().map(|s| -s).collect()).unwrap();
        affine_ok &= match_ranks(&negated, &base.probe_ids, &base.gallery_ids, !hib).unwrap() == want;
    }
    pass &= affine_ok;
    notes.push(format!("affine invariance {}", if affine_ok { "holds" } else { "VIOLATED" }));

    let monotone = curves.iter().all(CmcCurve::is_monotone);
    pass &= monotone;
    notes.push(format!("{} curves monotone: {monotone}", curves.len()));
    Outcome::new(pass, notes.join("; "))
}

fn determinism(_: &mut Shared) -> Outcome {
    let ds = generate_synthetic(&SyntheticSpec::new(12, 2, 2, 0.5, 6).unwrap()).unwrap();
    let ids = ds.manifest.identities();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        pool.install(|| {
            let sampler = PairSampler::new(&ds.manifest, &ids).unwrap();
            let mut t = Trainer::<f32>::new(small_config(3, 0.25, HeadMode::Hybrid), sampler).unwrap();
            let losses: Vec<u64> = (0..50).map(|_| t.step(&ds).unwrap().loss.to_bits()).collect();
            (losses, t)
        })
    };
    let (a, trainer) = run();
    let (b, _) = run();
    let identical = a == b;

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.dhsl");
    let second = dir.path().join("second.dhsl");
    trainer.save(&first).unwrap();
    Checkpoint::<f32>::load(&first).unwrap().save(&second).unwrap();
    let bytes = std::fs::read(&first).unwrap();
    let round_trip = bytes == std::fs::read(&second).unwrap();
    Outcome::new(
        identical && round_trip,
        format!(
            "50-step loss trajectories {}; checkpoint of {} bytes {} after save-load-save",
            if identical { "bit-identical" } else { "DIFFER" },
            bytes.len(),
            if round_trip { "byte-identical" } else { "CHANGED" }
        ),
    )
}

fn oracle_equivalence(_: &mut Shared) -> Outcome {
    let instances = 120;
    let conv = conv_oracle_error(instances, 100);
    let maxpool = maxpool_oracle_error(instances, 101);
    let avgpool = avgpool_oracle_error(instances, 102);
    let ds = generate_synthetic(&SyntheticSpec::new(12, 2, 2, 0.5, 8).unwrap()).unwrap();
    let sampler = PairSampler::new(&ds.manifest, &ds.manifest.identities()).unwrap();
    let mut model = Model::<f32>::new(StackConfig::standard(0.25), HeadMode::Hybrid).unwrap();
    init_params(&mut model, &TrainConfig { init_std: 0.1, ..Default::default() }, 5);
    let (mined, expected) = mining_vs_full_sort(&mut model, &ds, &sampler, 256, 64, 21);
    let tol = 1e-10;
    Outcome::new(
        conv < tol && maxpool < tol && avgpool < tol && mined == expected,
        format!(
            "{instances} instances each: conv {conv:.1e}, max-pool {maxpool:.1e}, avg-pool {avgpool:.1e}; mining top-64 of 256 {}",
            if mined == expected { "matches full sort" } else { "DIFFERS from full sort" }
        ),
    )
}

fn additivity(shared: &mut Shared) -> Outcome {
    let t = shared.trained(&[HeadMode::Hybrid, HeadMode::DiffOnly]);
    let split = &t.splits[0];
    let pg = probe_gallery(&t.ds.manifest, &split.test_ids, false).unwrap();
    let mut worst = 0.0f64;
    let mut pairs = 0;
    let mut mult_max = 0.0f64;
    for (models, is_diff_only) in [(&mut t.hybrid, false), (&mut t.diff_only, true)] {
        let model = &mut models[0];
        let probes = extract_features(model, &t.ds, &pg.probes).unwrap();
        let gallery = extract_features(model, &t.ds, &pg.gallery).unwrap();
        for p in probes.rows() {
            for g in gallery.rows() {
                let (d, m) = sub_scores(model.head(), p, g).unwrap();
                let s = EvalMetric::Hybrid.score(model.head(), p, g).unwrap();
                worst = worst.max((d as f64 + m as f64 - s).abs());
                if is_diff_only {
                    mult_max = mult_max.max((m as f64).abs());
                }
                pairs += 1;
            }
        }
    }
    Outcome::new(
        worst <= 1e-6 && mult_max == 0.0,
        format!("max |dosead + dosem - hybrid| {worst:.1e} over {pairs} pairs; trained diff-only max |dosem| {mult_max}"),
    )
}

type Criterion = fn(&mut Shared) -> Outcome;

const CRITERIA: [(&str, Criterion); 10] = [
    ("gradient soundness", gradient_soundness),
    ("shape fidelity", shape_fidelity),
    ("parameter accounting", parameter_accounting),
    ("overfit", overfit),
    ("generalization", generalization),
    ("ablation ordering", ablation),
    ("cmc properties", cmc_properties),
    ("determinism and serialization", determinism),
    ("oracle equivalence", oracle_equivalence),
    ("additivity diagnostic", additivity),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome = check(&mut shared);
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {number:>2} {name}: {} [{:.1} s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed.push(number);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
