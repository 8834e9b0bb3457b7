use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Evaluation protocol: how identities are divided into train and test sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// 125 train / 125 test identities, distractors join the gallery, 10 trials.
    GridLike,
    /// Half of the identities for training, the rest for testing, 10 trials.
    ViperLike,
    /// 1160 train / 100 test identities, 20 trials.
    Cuhk03Like,
    Custom { train: usize, test: usize, trials: usize },
}

impl Protocol {
    pub fn trials(&self) -> usize {
        match self {
            Protocol::GridLike | Protocol::ViperLike => 10,
            Protocol::Cuhk03Like => 20,
            Protocol::Custom { trials, .. } => *trials,
        }
    }

    pub fn uses_distractors(&self) -> bool {
        matches!(self, Protocol::GridLike)
    }

    /// Train and test identity counts for a manifest with `available` identities.
    pub fn sizes(&self, available: usize) -> (usize, usize) {
        match *self {
            Protocol::GridLike => (125, 125),
            Protocol::ViperLike => (available / 2, available - available / 2),
            Protocol::Cuhk03Like => (1160, 100),
            Protocol::Custom { train, test, .. } => (train, test),
        }
    }

    pub fn tag(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::GridLike => f.write_str("grid"),
            Protocol::ViperLike => f.write_str("viper"),
            Protocol::Cuhk03Like => f.write_str("cuhk03"),
            Protocol::Custom { train, test, trials } => write!(f, "custom:{train}:{test}:{trials}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// `grid`, `viper`, `cuhk03` or `custom:<train>:<test>:<trials>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Protocol::GridLike),
            "viper" => Ok(Protocol::ViperLike),
            "cuhk03" => Ok(Protocol::Cuhk03Like),
            other => {
                let bad = || Error::Config(format!("unknown protocol `{other}` (grid|viper|cuhk03|custom:T:E:N)"));
                let rest = other.strip_prefix("custom:").ok_or_else(bad)?;
                let nums: Vec<usize> = rest
                    .split(':')
                    .map(|v| v.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                match nums[..] {
                    [train, test, trials] if train > 0 && test > 0 && trials > 0 => {
                        Ok(Protocol::Custom { train, test, trials })
                    }
                    _ => Err(bad()),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolSplit {
    pub trial: usize,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    /// Seed for everything trial-specific (initialization, sampling).
    pub seed: u64,
    pub distractors_in_gallery: bool,
    pub protocol: Protocol,
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random identity-disjoint train/test splits, one per trial, reproducible
/// from `master_seed`.
pub fn make_split(manifest: &DatasetManifest, protocol: Protocol, master_seed: u64) -> Result<Vec<ProtocolSplit>> {
    let ids = manifest.identities();
    let (train_n, test_n) = protocol.sizes(ids.len());
    if train_n == 0 || test_n == 0 || train_n + test_n > ids.len() {
        return Err(Error::data(format!(
            "protocol {protocol} needs {} identities ({train_n} train + {test_n} test), manifest has {}",
            train_n + test_n,
            ids.len()
        )));
    }
    (0..protocol.trials())
        .map(|trial| {
            let seed = mix_seed(master_seed, trial as u64 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut rng);
            let mut train_ids = shuffled[..train_n].to_vec();
            let mut test_ids = shuffled[train_n..train_n + test_n].to_vec();
            train_ids.sort_unstable();
            test_ids.sort_unstable();
            Ok(ProtocolSplit {
                trial,
                train_ids,
                test_ids,
                seed,
                distractors_in_gallery: protocol.uses_distractors(),
                protocol,
            })
        })
        .collect()
}
