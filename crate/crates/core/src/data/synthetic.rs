use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::ImageRecord;
use super::manifest::{DatasetManifest, ManifestEntry, DISTRACTOR_ID};
use super::split::mix_seed;
use super::Dataset;
use crate::error::{Error, Result};

/// Nuisance strength in `[0, 1]`. At 0 every image of an identity is the
/// same picture; at 1 camera tint, brightness, translation and pixel noise
/// are at full strength.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Difficulty(f64);

impl Difficulty {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!("difficulty must lie in [0, 1], got {value}")));
        }
        Ok(Difficulty(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub identities: usize,
    /// Images per identity per camera.
    pub images_per_identity: usize,
    pub cameras: usize,
    pub distractors: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(identities: usize, images_per_identity: usize, cameras: usize, difficulty: f64, seed: u64) -> Result<Self> {
        Ok(SyntheticSpec {
            identities,
            images_per_identity,
            cameras,
            distractors: 0,
            difficulty: Difficulty::new(difficulty)?,
            seed,
        })
    }

    pub fn with_distractors(mut self, distractors: usize) -> Self {
        self.distractors = distractors;
        self
    }
}

/// Minimum distance between the clean mean colors of two identities.
pub const MEAN_COLOR_SEPARATION: f64 = 0.08;
const SEPARATION_ATTEMPTS: usize = 200;

// Nuisance amplitudes at difficulty 1.
const TINT: f64 = 0.25;
const BRIGHTNESS: f64 = 0.15;
const CAMERA_SHIFT_X: f64 = 4.0;
const CAMERA_SHIFT_Y: f64 = 10.0;
const IMAGE_JITTER: f64 = 2.0;
const PIXEL_NOISE: f64 = 0.1;

const NEUTRAL_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Debug)]
struct Appearance {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    stripe_period: f64,
    stripe_depth: f64,
    torso_end: f64,
    width: f64,
}

#[derive(Clone, Debug)]
struct CameraNuisance {
    tint: [f64; 3],
    brightness: f64,
    shift: (f64, f64),
    background: [f64; 3],
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

impl Appearance {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        Appearance {
            head: [rng.random_range(0.45..0.95), rng.random_range(0.3..0.8), rng.random_range(0.2..0.7)],
            torso: color(rng),
            legs: color(rng),
            stripe_period: rng.random_range(4.0..14.0),
            stripe_depth: rng.random_range(0.0..0.3),
            torso_end: rng.random_range(0.5..0.62),
            width: rng.random_range(0.45..0.7),
        }
    }

    /// Color at normalized body coordinates, or `None` outside the figure.
    fn sample_at(&self, v: f64, u: f64) -> Option<[f64; 3]> {
        let half = self.width / 2.0;
        if !(0.04..0.97).contains(&v) {
            return None;
        }
        if v < 0.17 {
            return ((u - 0.5).abs() < half * 0.45).then_some(self.head);
        }
        if (u - 0.5).abs() >= half {
            return None;
        }
        if v < self.torso_end {
            let phase = (v * 128.0 / self.stripe_period * std::f64::consts::TAU).sin();
            let k = 1.0 - self.stripe_depth * (0.5 + 0.5 * phase);
            return Some(self.torso.map(|c| c * k));
        }
        // a gap between the legs
        if (u - 0.5).abs() < half * 0.12 {
            return None;
        }
        Some(self.legs)
    }
}

impl CameraNuisance {
    fn sample<R: Rng>(rng: &mut R, d: f64) -> Self {
        let mut sym = |amp: f64| rng.random_range(-1.0..=1.0) * amp * d;
        let tint = [sym(TINT), sym(TINT), sym(TINT)].map(|t| 1.0 + t);
        let brightness = sym(BRIGHTNESS);
        let shift = (sym(CAMERA_SHIFT_Y), sym(CAMERA_SHIFT_X));
        let scene = [sym(1.0), sym(1.0), sym(1.0)];
        let background = [0, 1, 2].map(|c| (NEUTRAL_BACKGROUND[c] + 0.4 * scene[c]).clamp(0.0, 1.0));
        CameraNuisance { tint, brightness, shift, background }
    }
}

fn render<R: Rng>(look: &Appearance, cam: &CameraNuisance, d: f64, rng: &mut R) -> ImageRecord {
    let (h, w) = (ImageRecord::HEIGHT as f64, ImageRecord::WIDTH as f64);
    let jy = rng.random_range(-1.0..=1.0) * IMAGE_JITTER * d;
    let jx = rng.random_range(-1.0..=1.0) * IMAGE_JITTER * d;
    let (oy, ox) = (cam.shift.0 + jy, cam.shift.1 + jx);
    let noise = PIXEL_NOISE * d;
    let mut data = Vec::with_capacity(ImageRecord::LEN);
    for y in 0..ImageRecord::HEIGHT {
        for x in 0..ImageRecord::WIDTH {
            let v = (y as f64 + 0.5 - oy) / h;
            let u = (x as f64 + 0.5 - ox) / w;
            let base = look.sample_at(v, u).unwrap_or(cam.background);
            for c in 0..3 {
                let mut value = base[c] * cam.tint[c] + cam.brightness;
                if noise > 0.0 {
                    value += rng.random_range(-noise..=noise);
                }
                // quantize so a PNG round trip is lossless
                data.push((value.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
            }
        }
    }
    ImageRecord::from_vec(data).expect("rendered at record size")
}

fn clean_mean(look: &Appearance) -> [f64; 3] {
    let cam = CameraNuisance {
        tint: [1.0; 3],
        brightness: 0.0,
        shift: (0.0, 0.0),
        background: NEUTRAL_BACKGROUND,
    };
    render(look, &cam, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).mean_color()
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Draws identity appearances, rejecting candidates whose clean mean color
/// lies within `MEAN_COLOR_SEPARATION` of an earlier one. After
/// `SEPARATION_ATTEMPTS` rejections the best-separated candidate is kept so
/// very large sets still terminate.
fn sample_identities<R: Rng>(n: usize, rng: &mut R) -> Vec<Appearance> {
    let mut looks: Vec<Appearance> = Vec::with_capacity(n);
    let mut means: Vec<[f64; 3]> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(f64, Appearance, [f64; 3])> = None;
        for _ in 0..SEPARATION_ATTEMPTS {
            let look = Appearance::sample(rng);
            let mean = clean_mean(&look);
            let gap = means.iter().map(|m| distance(m, &mean)).fold(f64::INFINITY, f64::min);
            let better = best.as_ref().is_none_or(|(g, _, _)| gap > *g);
            if better {
                best = Some((gap, look, mean));
            }
            if gap >= MEAN_COLOR_SEPARATION {
                break;
            }
        }
        let (_, look, mean) = best.expect("at least one attempt");
        looks.push(look);
        means.push(mean);
    }
    looks
}

/// Renders a procedural person dataset. Identity `i` is seen by cameras
/// `c1..c{cameras}` with `images_per_identity` images each, file names
/// follow `<identity>_c<camera>_<index>.png` and distractors `bg_c<camera>_<index>.png`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.identities < 2 {
        return Err(Error::data(format!(
            "synthetic data needs at least 2 identities to form negative pairs, got {}",
            spec.identities
        )));
    }
    if spec.cameras == 0 || spec.images_per_identity == 0 {
        return Err(Error::data("synthetic data needs at least one camera and one image per identity"));
    }
    let d = spec.difficulty.value();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let looks = sample_identities(spec.identities + spec.distractors, &mut rng);
    let cams: Vec<CameraNuisance> = (0..spec.cameras).map(|_| CameraNuisance::sample(&mut rng, d)).collect();

    let mut items: Vec<(ManifestEntry, ImageRecord)> = Vec::new();
    for (id, look) in looks[..spec.identities].iter().enumerate() {
        for (ci, cam) in cams.iter().enumerate() {
            for idx in 0..spec.images_per_identity {
                let key = ((id as u64) << 32) | ((ci as u64) << 16) | idx as u64;
                let mut img_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, key));
                let entry = ManifestEntry {
                    path: format!("{id:04}_c{}_{idx:02}.png", ci + 1).into(),
                    identity: id as u32,
                    camera: ci as u32 + 1,
                    is_distractor: false,
                };
                items.push((entry, render(look, cam, d, &mut img_rng)));
            }
        }
    }
    for (k, look) in looks[spec.identities..].iter().enumerate() {
        let ci = k % spec.cameras;
        let mut img_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX - k as u64));
        let entry = ManifestEntry {
            path: format!("bg_c{}_{k:04}.png", ci + 1).into(),
            identity: DISTRACTOR_ID,
            camera: ci as u32 + 1,
            is_distractor: true,
        };
        items.push((entry, render(look, &cams[ci], d, &mut img_rng)));
    }
    items.sort_by(|a, b| a.0.path.cmp(&b.0.path));
    let (entries, images): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    Dataset::new(DatasetManifest::new("synthetic", entries)?, images)
}
