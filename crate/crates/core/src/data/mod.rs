//! Dataset indexing, image decoding and augmentation, protocol splits and
//! the synthetic identity generator.

mod image;
mod manifest;
mod split;
mod synthetic;

pub use self::image::{augment, decode_resize, mirror, resize_bilinear, rotate, AugmentPolicy, ImageRecord};
pub use manifest::{load_manifest, parse_file_name, read_manifest_jsonl, read_manifest_tsv, write_manifest_tsv, DatasetManifest, ManifestEntry, DISTRACTOR_ID};
pub use split::{make_split, mix_seed, Protocol, ProtocolSplit};
pub use synthetic::{generate_synthetic, Difficulty, SyntheticSpec};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Manifest plus decoded images, index-aligned with the manifest entries.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<ImageRecord>) -> Result<Self> {
        if manifest.entries.len() != images.len() {
            return Err(Error::data(format!(
                "manifest lists {} images but {} were provided",
                manifest.entries.len(),
                images.len()
            )));
        }
        Ok(Dataset { manifest, images })
    }

    /// Opens a dataset directory, preferring `manifest.tsv`, then
    /// `manifest.jsonl`, then labels parsed from file names.
    pub fn open(dir: &Path) -> Result<Self> {
        let tsv = dir.join("manifest.tsv");
        let jsonl = dir.join("manifest.jsonl");
        let manifest = if tsv.is_file() {
            read_manifest_tsv(&tsv)?
        } else if jsonl.is_file() {
            read_manifest_jsonl(&jsonl)?
        } else {
            load_manifest(dir)?
        };
        Self::load_with_manifest(dir, manifest)
    }

    /// Indexes `dir` by file name and decodes every image.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        Self::load_with_manifest(dir, manifest)
    }

    /// Decodes the images listed in `manifest`, relative to `root`.
    pub fn load_with_manifest(root: &Path, manifest: DatasetManifest) -> Result<Self> {
        let images = manifest
            .entries
            .iter()
            .map(|e| {
                let path = root.join(&e.path);
                let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
                decode_resize(&bytes).map_err(|err| Error::data(format!("{}: {err}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(manifest, images)
    }

    /// Writes every image as PNG plus a `manifest.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, img) in self.manifest.entries.iter().zip(&self.images) {
            let path = dir.join(&entry.path);
            img.save_png(&path)?;
        }
        write_manifest_tsv(&self.manifest, &dir.join("manifest.tsv"))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the given images into an `n x 128 x 48 x 3` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor4<f32>> {
        Self::stack(indices.iter().map(|&i| &self.images[i]))
    }

    pub fn stack<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> Result<Tensor4<f32>> {
        let mut data = Vec::new();
        let mut n = 0;
        for r in records {
            data.extend_from_slice(r.data());
            n += 1;
        }
        Tensor4::from_vec(Dims::new(n, ImageRecord::HEIGHT, ImageRecord::WIDTH, ImageRecord::CHANNELS), data)
    }
}
