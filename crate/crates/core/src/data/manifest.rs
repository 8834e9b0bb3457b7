use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Identity id carried by background (distractor) images.
pub const DISTRACTOR_ID: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub identity: u32,
    pub camera: u32,
    pub is_distractor: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        for e in &entries {
            if e.is_distractor != (e.identity == DISTRACTOR_ID) {
                return Err(Error::data(format!(
                    "{}: distractor flag and reserved identity disagree",
                    e.path.display()
                )));
            }
        }
        Ok(DatasetManifest {
            name: name.into(),
            entries,
        })
    }

    /// Sorted non-distractor identities.
    pub fn identities(&self) -> Vec<u32> {
        self.entries
            .iter()
            .filter(|e| !e.is_distractor)
            .map(|e| e.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn cameras(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.camera).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Entry indices of one identity, in manifest order.
    pub fn images_of(&self, identity: u32) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_distractor && e.identity == identity)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn distractors(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_distractor)
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether `identity` has images from at least two cameras.
    pub fn has_cross_camera(&self, identity: u32) -> bool {
        let cams: BTreeSet<u32> = self.images_of(identity).iter().map(|&i| self.entries[i].camera).collect();
        cams.len() >= 2
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// Parses `<identity>_<camera>_<index>.<ext>`; identity `bg` marks a
/// distractor, the camera token may carry a `c` prefix (`0007_c2_03.png`).
pub fn parse_file_name(name: &str) -> Result<(u32, u32, bool)> {
    let bad = || Error::data(format!("cannot parse `{name}` as <identity>_<camera>_<index>.<ext>"));
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let mut parts = stem.split('_');
    let (Some(id), Some(cam), Some(index), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    index.parse::<u32>().map_err(|_| bad())?;
    let camera = cam.strip_prefix('c').unwrap_or(cam).parse::<u32>().map_err(|_| bad())?;
    if id == "bg" {
        return Ok((DISTRACTOR_ID, camera, true));
    }
    let identity = id.parse::<u32>().map_err(|_| bad())?;
    if identity == DISTRACTOR_ID {
        return Err(bad());
    }
    Ok((identity, camera, false))
}

/// Indexes a dataset directory by file name, in lexicographic order.
/// Files other than PNG/PPM images are ignored.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let dir = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut names = Vec::new();
    for entry in dir {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_file() && is_image(&path) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if names.is_empty() {
        return Err(Error::data(format!("no PNG/PPM images in {}", root.display())));
    }
    names.sort();
    let entries = names
        .into_iter()
        .map(|name| {
            let (identity, camera, is_distractor) = parse_file_name(&name)?;
            Ok(ManifestEntry {
                path: PathBuf::from(name),
                identity,
                camera,
                is_distractor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    DatasetManifest::new(name, entries)
}

/// One record per line: `path \t identity \t camera \t is_distractor`.
/// Distractor identities are written as `bg`.
pub fn write_manifest_tsv(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &manifest.entries {
        let id = if e.is_distractor { "bg".to_string() } else { e.identity.to_string() };
        out.push_str(&format!("{}\t{id}\t{}\t{}\n", e.path.display(), e.camera, e.is_distractor));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest_tsv(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::data(format!("{}:{}: {what}", path.display(), lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [file, id, cam, distractor] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let is_distractor: bool = distractor.parse().map_err(|_| bad("bad distractor flag"))?;
        let identity = if id == "bg" {
            DISTRACTOR_ID
        } else {
            id.parse().map_err(|_| bad("bad identity"))?
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(file),
            identity,
            camera: cam.parse().map_err(|_| bad("bad camera"))?,
            is_distractor,
        });
    }
    if entries.is_empty() {
        return Err(Error::data(format!("{} lists no images", path.display())));
    }
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    DatasetManifest::new(name, entries)
}

/// JSON-lines manifest: one object per line with `path`, `identity`
/// (integer or `"bg"`), `camera` and optional `is_distractor`.
pub fn read_manifest_jsonl(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::data(format!("{}:{}: {what}", path.display(), lineno + 1));
        let record: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
        let file = record["path"].as_str().ok_or_else(|| bad("missing string field `path`"))?;
        let identity = match &record["identity"] {
            serde_json::Value::String(s) if s == "bg" => DISTRACTOR_ID,
            v => v
                .as_u64()
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| bad("`identity` must be an integer or \"bg\""))?,
        };
        let camera = record["camera"]
            .as_u64()
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| bad("missing integer field `camera`"))?;
        let is_distractor = match &record["is_distractor"] {
            serde_json::Value::Null => identity == DISTRACTOR_ID,
            v => v.as_bool().ok_or_else(|| bad("`is_distractor` must be a boolean"))?,
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(file),
            identity,
            camera,
            is_distractor,
        });
    }
    if entries.is_empty() {
        return Err(Error::data(format!("{} lists no images", path.display())));
    }
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    DatasetManifest::new(name, entries)
}
