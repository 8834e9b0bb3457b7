use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;

use super::config::TrainConfig;
use crate::data::{augment, AugmentPolicy, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{Model, PairBatch};
use crate::scalar::Scalar;
use crate::similarity::PairLabel;
use crate::tensor::Tensor4;

/// Two manifest entry indices and the pair label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub first: usize,
    pub second: usize,
    pub label: PairLabel,
}

/// Draws pairs from a fixed identity set. Positives are two images of one
/// identity from different cameras, negatives are images of two different
/// identities; identities are chosen uniformly.
#[derive(Clone, Debug)]
pub struct PairSampler {
    /// Per identity: entry indices grouped by camera.
    by_identity: BTreeMap<u32, Vec<Vec<usize>>>,
    identities: Vec<u32>,
    /// Identities seen by at least two cameras.
    positive_ids: Vec<u32>,
    image_count: usize,
}

impl PairSampler {
    pub fn new(manifest: &DatasetManifest, identities: &[u32]) -> Result<Self> {
        let wanted: BTreeSet<u32> = identities.iter().copied().collect();
        let mut grouped: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        let mut image_count = 0;
        for (i, e) in manifest.entries.iter().enumerate() {
            if !e.is_distractor && wanted.contains(&e.identity) {
                grouped.entry(e.identity).or_default().entry(e.camera).or_default().push(i);
                image_count += 1;
            }
        }
        if let Some(missing) = wanted.iter().find(|id| !grouped.contains_key(id)) {
            return Err(Error::data(format!("identity {missing} has no images in the manifest")));
        }
        let by_identity: BTreeMap<u32, Vec<Vec<usize>>> =
            grouped.into_iter().map(|(id, cams)| (id, cams.into_values().collect())).collect();
        let identities: Vec<u32> = by_identity.keys().copied().collect();
        let positive_ids: Vec<u32> = by_identity.iter().filter(|(_, c)| c.len() >= 2).map(|(&id, _)| id).collect();
        Ok(PairSampler {
            by_identity,
            identities,
            positive_ids,
            image_count,
        })
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    fn check(&self, positives: usize, negatives: usize) -> Result<()> {
        if positives > 0 && self.positive_ids.is_empty() {
            return Err(Error::data("no identity has images from two cameras, cannot form positive pairs"));
        }
        if negatives > 0 && self.identities.len() < 2 {
            return Err(Error::data(format!(
                "negative pairs need two identities, training set has {}",
                self.identities.len()
            )));
        }
        Ok(())
    }

    pub fn positive<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PairIndex> {
        self.check(1, 0)?;
        let id = self.positive_ids.choose(rng).expect("non-empty");
        let cams = &self.by_identity[id];
        let a = rng.random_range(0..cams.len());
        let mut b = rng.random_range(0..cams.len() - 1);
        if b >= a {
            b += 1;
        }
        Ok(PairIndex {
            first: *cams[a].choose(rng).expect("camera has images"),
            second: *cams[b].choose(rng).expect("camera has images"),
            label: PairLabel::Same,
        })
    }

    pub fn negative<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PairIndex> {
        self.check(0, 1)?;
        let n = self.identities.len();
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut pick = |id: u32| {
            let cams = &self.by_identity[&id];
            let cam = &cams[rng.random_range(0..cams.len())];
            cam[rng.random_range(0..cam.len())]
        };
        let first = pick(self.identities[a]);
        let second = pick(self.identities[b]);
        Ok(PairIndex {
            first,
            second,
            label: PairLabel::Different,
        })
    }

    /// `pos_per_batch` positives followed by `batch_size - pos_per_batch`
    /// negatives. Negatives come from `negatives` when given (mined pairs),
    /// drawn uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        config: &TrainConfig,
        negatives: Option<&[PairIndex]>,
        rng: &mut R,
    ) -> Result<Vec<PairIndex>> {
        let n_neg = config.batch_size - config.pos_per_batch;
        self.check(config.pos_per_batch, n_neg)?;
        let mut out = Vec::with_capacity(config.batch_size);
        for _ in 0..config.pos_per_batch {
            out.push(self.positive(rng)?);
        }
        for _ in 0..n_neg {
            out.push(match negatives {
                Some(pool) if !pool.is_empty() => *pool.choose(rng).expect("non-empty"),
                _ => self.negative(rng)?,
            });
        }
        Ok(out)
    }
}

/// Materializes pairs as image tensors, augmenting each image independently.
pub fn build_batch<T: Scalar, R: Rng + ?Sized>(
    dataset: &Dataset,
    pairs: &[PairIndex],
    policy: AugmentPolicy,
    rng: &mut R,
) -> Result<PairBatch<T>> {
    let mut first = Vec::with_capacity(pairs.len());
    let mut second = Vec::with_capacity(pairs.len());
    for p in pairs {
        first.push(augment(&dataset.images[p.first], policy, rng));
        second.push(augment(&dataset.images[p.second], policy, rng));
    }
    let cast = |t: Tensor4<f32>| t.cast::<T>();
    PairBatch::new(
        cast(Dataset::stack(&first)?),
        cast(Dataset::stack(&second)?),
        pairs.iter().map(|p| p.label).collect(),
    )
}

/// Orders by score descending, then by position ascending.
fn rank_order<T: Scalar>(scores: &[T], a: usize, b: usize) -> Ordering {
    scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Positions of the `k` highest scores, best first; ties keep the lower
/// position.
pub fn top_k_by_score<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    idx
}

/// Scores `pool_size` random negative pairs with the current model and
/// keeps the `keep` most similar ones.
pub fn mine_hard_negatives<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    dataset: &Dataset,
    sampler: &PairSampler,
    pool_size: usize,
    keep: usize,
    rng: &mut R,
) -> Result<Vec<PairIndex>> {
    if pool_size == 0 {
        return Err(Error::data("hard-negative mining needs a non-empty pool"));
    }
    if keep > pool_size {
        return Err(Error::Argument(format!("cannot keep {keep} of a pool of {pool_size}")));
    }
    let pool: Vec<PairIndex> = (0..pool_size).map(|_| sampler.negative(rng)).collect::<Result<_>>()?;
    let images: Vec<usize> = pool
        .iter()
        .flat_map(|p| [p.first, p.second])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let features = crate::evaluation::extract_features(model, dataset, &images)?;
    let slot: BTreeMap<usize, usize> = images.iter().enumerate().map(|(s, &i)| (i, s)).collect();
    let scores: Vec<T> = pool
        .iter()
        .map(|p| model.score(features.row(slot[&p.first]), features.row(slot[&p.second])))
        .collect::<Result<_>>()?;
    Ok(top_k_by_score(&scores, keep).into_iter().map(|i| pool[i]).collect())
}
