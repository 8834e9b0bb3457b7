use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// A decoded 128x48 RGB image, channels in `[0, 1]`, stored `(y, x, c)`
/// with the channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    data: Vec<f32>,
}

impl ImageRecord {
    pub const HEIGHT: usize = 128;
    pub const WIDTH: usize = 48;
    pub const CHANNELS: usize = 3;
    pub const LEN: usize = Self::HEIGHT * Self::WIDTH * Self::CHANNELS;

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::shape(format!(
                "image record needs {} values, got {}",
                Self::LEN,
                data.len()
            )));
        }
        Ok(ImageRecord { data })
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(Self::LEN);
        for y in 0..Self::HEIGHT {
            for x in 0..Self::WIDTH {
                for c in 0..Self::CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageRecord { data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * Self::WIDTH + x) * Self::CHANNELS + c]
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut sum = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        let n = (Self::HEIGHT * Self::WIDTH) as f64;
        sum.map(|s| s / n)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(Self::WIDTH as u32, Self::HEIGHT as u32, bytes).expect("buffer sized for 128x48")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::data(format!("{}: {other}", path.display())),
            })
    }
}

/// Bilinear resampling with half-pixel centers; out-of-range taps clamp to
/// the border. `src` is `(y, x, c)` interleaved.
pub fn resize_bilinear(src: &[f32], in_h: usize, in_w: usize, channels: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let at = |y: usize, x: usize, c: usize| src[(y * in_w + x) * channels + c];
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
                let bottom = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Decodes PNG or binary PPM bytes and resizes to 128x48.
pub fn decode_resize(bytes: &[u8]) -> Result<ImageRecord> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::data(format!("cannot decode image: {e}")))?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = if (h, w) == (ImageRecord::HEIGHT, ImageRecord::WIDTH) {
        rgb.into_raw()
    } else {
        resize_bilinear(rgb.as_raw(), h, w, 3, ImageRecord::HEIGHT, ImageRecord::WIDTH)
    };
    ImageRecord::from_vec(data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AugmentPolicy {
    None,
    Mirror,
    #[default]
    MirrorRotate,
}

impl std::str::FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentPolicy::None),
            "mirror" => Ok(AugmentPolicy::Mirror),
            "mirror+rotate" => Ok(AugmentPolicy::MirrorRotate),
            other => Err(Error::Config(format!("unknown augmentation policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for AugmentPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AugmentPolicy::None => "none",
            AugmentPolicy::Mirror => "mirror",
            AugmentPolicy::MirrorRotate => "mirror+rotate",
        })
    }
}

pub const MAX_ROTATION_DEGREES: f64 = 3.0;

/// Horizontal flip.
pub fn mirror(record: &ImageRecord) -> ImageRecord {
    let w = ImageRecord::WIDTH;
    ImageRecord::from_fn(|y, x, c| record.get(y, w - 1 - x, c))
}

/// Rotation about the image center with bilinear sampling and edge
/// replication outside the frame.
pub fn rotate(record: &ImageRecord, degrees: f64) -> ImageRecord {
    let (h, w) = (ImageRecord::HEIGHT, ImageRecord::WIDTH);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let clamp_y = |v: f64| v.clamp(0.0, (h - 1) as f64);
    let clamp_x = |v: f64| v.clamp(0.0, (w - 1) as f64);
    let mut data = Vec::with_capacity(ImageRecord::LEN);
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel -> source position
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = clamp_y(cy + cos * dy - sin * dx);
            let sx = clamp_x(cx + sin * dy + cos * dx);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for c in 0..ImageRecord::CHANNELS {
                let top = record.get(y0, x0, c) * (1.0 - fx) + record.get(y0, x1, c) * fx;
                let bottom = record.get(y1, x0, c) * (1.0 - fx) + record.get(y1, x1, c) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    ImageRecord { data }
}

/// Random training-time augmentation: a fair-coin mirror, then (for
/// `MirrorRotate`) a rotation drawn uniformly from [-3, +3] degrees.
pub fn augment<R: Rng + ?Sized>(record: &ImageRecord, policy: AugmentPolicy, rng: &mut R) -> ImageRecord {
    if policy == AugmentPolicy::None {
        return record.clone();
    }
    let flipped = if rng.random_bool(0.5) { mirror(record) } else { record.clone() };
    match policy {
        AugmentPolicy::MirrorRotate => {
            let angle = rng.random_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES);
            rotate(&flipped, angle)
        }
        _ => flipped,
    }
}
