//! Single-shot ranking evaluation: probe/gallery construction, score
//! matrices under each metric, CMC curves and sub-score diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{Dataset, DatasetManifest, ProtocolSplit, DISTRACTOR_ID};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::siamese::FeatureBatch;
use crate::similarity::{self, Baseline, HybridWeights};

/// Images per inference forward pass.
pub const EXTRACT_CHUNK: usize = 64;

/// Inference-mode features of the given dataset entries, row `i` for
/// `indices[i]`.
pub fn extract_features<T: Scalar>(model: &mut Model<T>, dataset: &Dataset, indices: &[usize]) -> Result<FeatureBatch<T>> {
    let d = model.feature_dim();
    let mut data = Vec::with_capacity(indices.len() * d);
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let batch = dataset.batch(chunk)?.cast::<T>();
        data.extend_from_slice(model.extract(&batch)?.data());
    }
    FeatureBatch::new(indices.len(), d, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMetric {
    Hybrid,
    Euclidean,
    Cosine,
    /// Only the `w_d . |x1 - x2|` term of the learned score.
    DiffOnly,
    /// Only the `w_m . (x1 .* x2)` term of the learned score.
    MultOnly,
}

impl EvalMetric {
    pub const ALL: [EvalMetric; 5] = [
        EvalMetric::Hybrid,
        EvalMetric::Euclidean,
        EvalMetric::Cosine,
        EvalMetric::DiffOnly,
        EvalMetric::MultOnly,
    ];

    pub fn higher_is_better(&self) -> bool {
        !matches!(self, EvalMetric::Euclidean)
    }

    /// Score of one feature pair under this metric.
    pub fn score<T: Scalar>(&self, head: &HybridWeights<T>, x1: &[T], x2: &[T]) -> Result<f64> {
        let v = match self {
            EvalMetric::Hybrid => similarity::hybrid_score(head, x1, x2)?,
            EvalMetric::DiffOnly => similarity::sub_scores(head, x1, x2)?.0,
            EvalMetric::MultOnly => similarity::sub_scores(head, x1, x2)?.1,
            EvalMetric::Euclidean => similarity::baseline_score(Baseline::Euclidean, x1, x2)?,
            EvalMetric::Cosine => {
                let (a, b) = (similarity::l2_normalize(x1), similarity::l2_normalize(x2));
                let zero = |v: &[T]| v.iter().all(|x| *x == T::zero());
                if zero(&a) || zero(&b) {
                    T::zero()
                } else {
                    similarity::baseline_score(Baseline::Cosine, &a, &b)?
                }
            }
        };
        Ok(v.as_f64())
    }
}

impl fmt::Display for EvalMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMetric::Hybrid => "hybrid",
            EvalMetric::Euclidean => "euclidean",
            EvalMetric::Cosine => "cosine",
            EvalMetric::DiffOnly => "diff-only",
            EvalMetric::MultOnly => "mult-only",
        })
    }
}

impl FromStr for EvalMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMetric::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}` (hybrid|euclidean|cosine|diff-only|mult-only)")))
    }
}

/// Entry indices of probes and gallery plus their identities. Distractors
/// carry [`DISTRACTOR_ID`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeGallery {
    pub probes: Vec<usize>,
    pub probe_ids: Vec<u32>,
    pub gallery: Vec<usize>,
    pub gallery_ids: Vec<u32>,
}

/// Single-shot split of the test identities. For each identity the probe
/// camera is its lowest camera id and the gallery camera the next one;
/// the gallery holds the first gallery-camera image in manifest order and
/// every image outside the gallery camera becomes a probe. Distractors are
/// appended to the gallery when requested.
pub fn probe_gallery(manifest: &DatasetManifest, test_ids: &[u32], with_distractors: bool) -> Result<ProbeGallery> {
    let mut out = ProbeGallery {
        probes: Vec::new(),
        probe_ids: Vec::new(),
        gallery: Vec::new(),
        gallery_ids: Vec::new(),
    };
    for &id in test_ids {
        let images = manifest.images_of(id);
        let cams: BTreeSet<u32> = images.iter().map(|&i| manifest.entries[i].camera).collect();
        let gallery_cam = *cams.iter().nth(1).ok_or_else(|| {
            Error::Protocol(format!(
                "identity {id} is seen by {} camera(s); a probe needs a gallery match in another camera",
                cams.len()
            ))
        })?;
        let first = images
            .iter()
            .copied()
            .find(|&i| manifest.entries[i].camera == gallery_cam)
            .expect("camera present");
        out.gallery.push(first);
        out.gallery_ids.push(id);
        for &i in &images {
            if manifest.entries[i].camera != gallery_cam {
                out.probes.push(i);
                out.probe_ids.push(id);
            }
        }
    }
    if with_distractors {
        for i in manifest.distractors() {
            out.gallery.push(i);
            out.gallery_ids.push(DISTRACTOR_ID);
        }
    }
    Ok(out)
}

/// Dense `probes x gallery` score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} score matrix from {} values", data.len())));
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn compute<T: Scalar>(
        metric: EvalMetric,
        head: &HybridWeights<T>,
        probes: &FeatureBatch<T>,
        gallery: &FeatureBatch<T>,
    ) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..probes.len())
            .into_par_iter()
            .map(|p| {
                (0..gallery.len())
                    .map(|g| metric.score(head, probes.row(p), gallery.row(g)))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        ScoreMatrix::new(probes.len(), gallery.len(), rows.concat())
    }
}

/// 1-based rank of each probe's true match. An entry outranks the match
/// if it scores strictly better, or equally with a lower gallery index.
pub fn match_ranks(scores: &ScoreMatrix, probe_ids: &[u32], gallery_ids: &[u32], higher_is_better: bool) -> Result<Vec<usize>> {
    if probe_ids.len() != scores.rows || gallery_ids.len() != scores.cols {
        return Err(Error::shape(format!(
            "{}x{} score matrix for {} probes and {} gallery entries",
            scores.rows,
            scores.cols,
            probe_ids.len(),
            gallery_ids.len()
        )));
    }
    let mut slot: BTreeMap<u32, usize> = BTreeMap::new();
    for (j, &id) in gallery_ids.iter().enumerate() {
        if id != DISTRACTOR_ID && slot.insert(id, j).is_some() {
            return Err(Error::Protocol(format!("identity {id} appears twice in a single-shot gallery")));
        }
    }
    probe_ids
        .iter()
        .enumerate()
        .map(|(p, id)| {
            let m = *slot
                .get(id)
                .ok_or_else(|| Error::Protocol(format!("probe identity {id} has no gallery entry")))?;
            let row = scores.row(p);
            let target = row[m];
            let better = |s: f64| if higher_is_better { s > target } else { s < target };
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| better(s) || (s == target && j < m))
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    /// `rates[r - 1]` is the fraction of probes matched within the top `r`.
    pub rates: Vec<f64>,
    pub trials: usize,
    pub protocol: String,
    pub gallery_size: usize,
    pub probes: usize,
}

impl CmcCurve {
    pub fn from_ranks(ranks: &[usize], gallery_size: usize, protocol: impl Into<String>) -> Result<Self> {
        if ranks.is_empty() || gallery_size == 0 {
            return Err(Error::Argument("a CMC curve needs at least one probe and one gallery entry".into()));
        }
        let mut hits = vec![0usize; gallery_size];
        for &r in ranks {
            if r == 0 || r > gallery_size {
                return Err(Error::Argument(format!("rank {r} outside 1..={gallery_size}")));
            }
            hits[r - 1] += 1;
        }
        let mut acc = 0;
        let rates = hits
            .iter()
            .map(|h| {
                acc += h;
                acc as f64 / ranks.len() as f64
            })
            .collect();
        Ok(CmcCurve {
            rates,
            trials: 1,
            protocol: protocol.into(),
            gallery_size,
            probes: ranks.len(),
        })
    }

    /// Rate at rank `r`; ranks past the gallery size keep the final rate.
    pub fn rate(&self, r: usize) -> f64 {
        assert!(r >= 1, "ranks start at 1");
        self.rates[r.min(self.rates.len()) - 1]
    }

    pub fn rank1(&self) -> f64 {
        self.rate(1)
    }

    pub fn is_monotone(&self) -> bool {
        self.rates.windows(2).all(|w| w[0] <= w[1]) && self.rates.iter().all(|r| (0.0..=1.0).contains(r))
    }
}

/// Element-wise mean of per-trial curves.
pub fn average_curves(curves: &[CmcCurve]) -> Result<CmcCurve> {
    let first = curves.first().ok_or_else(|| Error::Argument("no curves to average".into()))?;
    if curves.iter().any(|c| c.rates.len() != first.rates.len()) {
        return Err(Error::Argument("curves of different gallery sizes cannot be averaged".into()));
    }
    let n = curves.len() as f64;
    let rates = (0..first.rates.len())
        .map(|r| curves.iter().map(|c| c.rates[r]).sum::<f64>() / n)
        .collect();
    Ok(CmcCurve {
        rates,
        trials: curves.iter().map(|c| c.trials).sum(),
        protocol: first.protocol.clone(),
        gallery_size: first.gallery_size,
        probes: first.probes,
    })
}

pub const REPORT_RANKS: [usize; 4] = [1, 10, 20, 30];

#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub ranks: Vec<usize>,
    pub rates: Vec<f64>,
}

impl RankTable {
    pub fn from_curve(curve: &CmcCurve, ranks: &[usize]) -> Self {
        RankTable {
            ranks: ranks.to_vec(),
            rates: ranks.iter().map(|&r| curve.rate(r)).collect(),
        }
    }

    pub fn standard(curve: &CmcCurve) -> Self {
        Self::from_curve(curve, &REPORT_RANKS)
    }
}

/// CMC of one trained model on one trial's test identities.
pub fn evaluate_trial<T: Scalar>(model: &mut Model<T>, dataset: &Dataset, split: &ProtocolSplit, metric: EvalMetric) -> Result<CmcCurve> {
    let pg = probe_gallery(&dataset.manifest, &split.test_ids, split.distractors_in_gallery)?;
    evaluate_probe_gallery(model, dataset, &pg, metric, &split.protocol.tag())
}

pub fn evaluate_probe_gallery<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    pg: &ProbeGallery,
    metric: EvalMetric,
    protocol: &str,
) -> Result<CmcCurve> {
    let probes = extract_features(model, dataset, &pg.probes)?;
    let gallery = extract_features(model, dataset, &pg.gallery)?;
    let scores = ScoreMatrix::compute(metric, model.head(), &probes, &gallery)?;
    let ranks = match_ranks(&scores, &pg.probe_ids, &pg.gallery_ids, metric.higher_is_better())?;
    CmcCurve::from_ranks(&ranks, pg.gallery.len(), protocol)
}

/// Mean CMC over trials, one trained model per trial.
pub fn evaluate_protocol<T: Scalar>(
    models: &mut [Model<T>],
    dataset: &Dataset,
    splits: &[ProtocolSplit],
    metric: EvalMetric,
) -> Result<(CmcCurve, RankTable)> {
    if models.len() != splits.len() {
        return Err(Error::Argument(format!(
            "{} models for {} trials",
            models.len(),
            splits.len()
        )));
    }
    let curves = models
        .iter_mut()
        .zip(splits)
        .map(|(m, s)| evaluate_trial(m, dataset, s, metric))
        .collect::<Result<Vec<_>>>()?;
    let curve = average_curves(&curves)?;
    let table = RankTable::standard(&curve);
    Ok((curve, table))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges from min to max.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDistribution {
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub histogram: Histogram,
}

impl ScoreDistribution {
    pub fn new(values: Vec<f64>, bins: usize) -> Result<Self> {
        if values.is_empty() || bins == 0 {
            return Err(Error::Argument("score distribution needs values and at least one bin".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let width = (max - min) / bins as f64;
        let edges = (0..=bins).map(|i| min + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in &values {
            let b = if width > 0.0 { ((v - min) / width) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
        Ok(ScoreDistribution {
            values,
            min,
            max,
            mean,
            histogram: Histogram { edges, counts },
        })
    }
}

/// Sub-score distributions over a pair population: the difference term
/// and the multiplication term of the hybrid score, per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SubScoreDistributions {
    pub diff: ScoreDistribution,
    pub mult: ScoreDistribution,
    pub hybrid: Vec<f64>,
}

pub fn score_distributions<T: Scalar>(
    head: &HybridWeights<T>,
    x1: &FeatureBatch<T>,
    x2: &FeatureBatch<T>,
    bins: usize,
) -> Result<SubScoreDistributions> {
    if x1.len() != x2.len() {
        return Err(Error::shape(format!("{} first members, {} second members", x1.len(), x2.len())));
    }
    let mut diff = Vec::with_capacity(x1.len());
    let mut mult = Vec::with_capacity(x1.len());
    let mut hybrid = Vec::with_capacity(x1.len());
    for (a, b) in x1.rows().zip(x2.rows()) {
        let (d, m) = similarity::sub_scores(head, a, b)?;
        diff.push(d.as_f64());
        mult.push(m.as_f64());
        hybrid.push(similarity::hybrid_score(head, a, b)?.as_f64());
    }
    Ok(SubScoreDistributions {
        diff: ScoreDistribution::new(diff, bins)?,
        mult: ScoreDistribution::new(mult, bins)?,
        hybrid,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Tsv,
    JsonLines,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(OutputFormat::Tsv),
            "jsonl" | "json-lines" => Ok(OutputFormat::JsonLines),
            other => Err(Error::Config(format!("unknown output format `{other}` (tsv|jsonl)"))),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputFormat::Tsv => "tsv",
            OutputFormat::JsonLines => "jsonl",
        })
    }
}

/// Everything one evaluation run writes.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metric: EvalMetric,
    pub curve: CmcCurve,
    pub table: RankTable,
    pub distributions: Option<SubScoreDistributions>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<metric>_cmc`, `<metric>_ranks` and (if present)
/// `<metric>_scores` files into `dir`. Floats use 4 decimal places.
pub fn emit_results(report: &EvalReport, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
    let c = &report.curve;
    let ext = match format {
        OutputFormat::Tsv => "tsv",
        OutputFormat::JsonLines => "jsonl",
    };
    let name = |kind: &str| dir.join(format!("{}_{kind}.{ext}", report.metric));
    let meta = format!(
        "metric={} protocol={} trials={} gallery_size={} probes={}",
        report.metric, c.protocol, c.trials, c.gallery_size, c.probes
    );
    let record = |fields: serde_json::Value| {
        let mut obj = serde_json::json!({
            "metric": report.metric.to_string(),
            "protocol": c.protocol,
            "trials": c.trials,
            "gallery_size": c.gallery_size,
            "probes": c.probes,
        });
        if let (Some(o), serde_json::Value::Object(extra)) = (obj.as_object_mut(), fields) {
            o.extend(extra);
        }
        obj.to_string()
    };
    let rows = |pairs: &mut dyn Iterator<Item = (usize, f64)>, header: &str| {
        let mut out = String::new();
        match format {
            OutputFormat::Tsv => {
                let _ = writeln!(out, "# {meta}\n{header}\trate");
                for (r, v) in pairs {
                    let _ = writeln!(out, "{r}\t{v:.4}");
                }
            }
            OutputFormat::JsonLines => {
                for (r, v) in pairs {
                    let _ = writeln!(out, "{}", record(serde_json::json!({ header: r, "rate": round4(v) })));
                }
            }
        }
        out
    };
    let mut written = Vec::new();
    let path = name("cmc");
    write_file(&path, &rows(&mut c.rates.iter().enumerate().map(|(i, &v)| (i + 1, v)), "rank"))?;
    written.push(path);
    let path = name("ranks");
    write_file(
        &path,
        &rows(&mut report.table.ranks.iter().copied().zip(report.table.rates.iter().copied()), "rank"),
    )?;
    written.push(path);

    if let Some(dist) = &report.distributions {
        let mut out = String::new();
        let parts = [("diff", &dist.diff), ("mult", &dist.mult)];
        match format {
            OutputFormat::Tsv => {
                let _ = writeln!(out, "# {meta}");
                for (term, d) in parts {
                    let _ = writeln!(out, "# {term} min={:.4} max={:.4} mean={:.4}", d.min, d.max, d.mean);
                }
                let _ = writeln!(out, "term\tbin_low\tbin_high\tcount");
                for (term, d) in parts {
                    for (i, count) in d.histogram.counts.iter().enumerate() {
                        let (lo, hi) = (d.histogram.edges[i], d.histogram.edges[i + 1]);
                        let _ = writeln!(out, "{term}\t{lo:.4}\t{hi:.4}\t{count}");
                    }
                }
            }
            OutputFormat::JsonLines => {
                for (term, d) in parts {
                    for (i, count) in d.histogram.counts.iter().enumerate() {
                        let (lo, hi) = (d.histogram.edges[i], d.histogram.edges[i + 1]);
                        let fields = serde_json::json!({
                            "term": term,
                            "bin_low": round4(lo),
                            "bin_high": round4(hi),
                            "count": count,
                        });
                        let _ = writeln!(out, "{}", record(fields));
                    }
                }
            }
        }
        let path = name("scores");
        write_file(&path, &out)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads `(rank, rate)` rows back from a TSV written by [`emit_results`].
pub fn read_rates_tsv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let bad = || Error::data(format!("{}: bad row `{l}`", path.display()));
            let (r, v) = l.split_once('\t').ok_or_else(bad)?;
            Ok((r.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?))
        })
        .collect()
}
