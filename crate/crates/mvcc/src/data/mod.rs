//! Video container types, the synthetic dataset, splits and augmentation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MvccError, Result};

pub mod augment;
pub mod clip_io;
pub mod synth;

pub use augment::{augment, AugmentationConfig};
pub use clip_io::{decode_clip_bytes, encode_clip_bytes, read_clip, write_clip, RawClip};
pub use synth::{generate_synthetic_dataset, GeneratorParams};

/// A (T, H, W, C) pixel tensor with a binary label; the unit of every
/// pipeline stage. Pixels are stored as `f32` in `[0, 1]`, frame-major,
/// matching the on-disk format bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    /// 0 = benign-like, 1 = malignant-like.
    pub label: u8,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<f32>,
}

impl VideoClip {
    pub fn new(
        clip_id: String,
        label: u8,
        t: usize,
        h: usize,
        w: usize,
        c: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(MvccError::Config(format!(
                "clip dims must be >= 1, got {t}x{h}x{w}x{c}"
            )));
        }
        if label > 1 {
            return Err(MvccError::Data(format!("label must be 0 or 1, got {label}")));
        }
        if pixels.len() != t * h * w * c {
            return Err(MvccError::Contract(format!(
                "pixel count {} does not match {t}x{h}x{w}x{c}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || !(0.0..=1.0).contains(*p)) {
            return Err(MvccError::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(VideoClip {
            clip_id,
            label,
            t,
            h,
            w,
            c,
            pixels,
        })
    }

    #[inline]
    pub fn pixel(&self, f: usize, y: usize, x: usize, ch: usize) -> f32 {
        self.pixels[((f * self.h + y) * self.w + x) * self.c + ch]
    }

    /// Uniform-stride temporal resampling to exactly `t` frames.
    pub fn resample_frames(&self, t: usize) -> Result<VideoClip> {
        if t == 0 {
            return Err(MvccError::Config("target frame count must be >= 1".into()));
        }
        if t == self.t {
            return Ok(self.clone());
        }
        if t > self.t {
            return Err(MvccError::Config(format!(
                "clip has {} frames, cannot resample up to {t}",
                self.t
            )));
        }
        let frame_len = self.h * self.w * self.c;
        let mut pixels = Vec::with_capacity(t * frame_len);
        for k in 0..t {
            let src = k * self.t / t;
            pixels.extend_from_slice(&self.pixels[src * frame_len..(src + 1) * frame_len]);
        }
        VideoClip::new(self.clip_id.clone(), self.label, t, self.h, self.w, self.c, pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Path relative to the manifest file's directory.
    pub path: String,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub generator_params: GeneratorParams,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(bytes)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.clip_id) {
                return Err(MvccError::Data(format!("duplicate clip_id {}", e.clip_id)));
            }
            if e.label > 1 {
                return Err(MvccError::Data(format!(
                    "entry {} has unknown label {}",
                    e.clip_id, e.label
                )));
            }
        }
        Ok(())
    }

    pub fn split_ids(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(path).map_err(|e| MvccError::io(path, e))?;
    DatasetManifest::from_json_bytes(&bytes)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_json()).map_err(|e| MvccError::io(path, e))
}

/// A manifest with every referenced clip loaded in entry order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<VideoClip>,
    pub root: PathBuf,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut clips = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let path = root.join(&e.path);
            if !path.exists() {
                return Err(MvccError::Data(format!(
                    "manifest references missing file {}",
                    path.display()
                )));
            }
            clips.push(read_clip(&path, &e.clip_id, e.label)?);
        }
        Ok(Dataset {
            manifest,
            clips,
            root,
        })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Integer apportionment of `n` items over `fractions` by largest remainder,
/// ties broken by lower index. Used for both overall and per-class split
/// sizing so that realized counts stay within one clip of the requested
/// ratio.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let ideals: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = ideals.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quantized_frac(ideals[a]);
        let fb = quantized_frac(ideals[b]);
        fb.cmp(&fa).then(a.cmp(&b))
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Fractional part scaled to integer nanounits, so near-ties produced by
/// floating-point noise break deterministically by index.
fn quantized_frac(x: f64) -> i64 {
    ((x - x.floor()) * 1e9).round() as i64
}

/// Stratified split assignment. Split totals are apportioned exactly over
/// the whole dataset, then per-class quotas are fitted to those totals so
/// both marginals hold within one clip.
pub fn stratified_split_quotas(class_counts: &[usize], fractions: &[f64]) -> Vec<Vec<usize>> {
    let n: usize = class_counts.iter().sum();
    let split_totals = apportion(n, fractions);
    let n_splits = fractions.len();

    let mut quotas: Vec<Vec<usize>> = class_counts
        .iter()
        .map(|&nc| {
            fractions
                .iter()
                .map(|f| (f * nc as f64).floor() as usize)
                .collect()
        })
        .collect();

    let mut split_fill: Vec<usize> = (0..n_splits)
        .map(|s| quotas.iter().map(|q| q[s]).sum())
        .collect();
    let mut class_fill: Vec<usize> = quotas.iter().map(|q| q.iter().sum()).collect();

    // Distribute the leftovers by largest fractional part, respecting both
    // remaining split capacity and remaining class need.
    let mut cells: Vec<(usize, usize, i64)> = Vec::new();
    for (c, &nc) in class_counts.iter().enumerate() {
        for (s, f) in fractions.iter().enumerate() {
            cells.push((c, s, quantized_frac(f * nc as f64)));
        }
    }
    cells.sort_by(|a, b| b.2.cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    loop {
        let mut progressed = false;
        for &(c, s, _) in &cells {
            if class_fill[c] < class_counts[c] && split_fill[s] < split_totals[s] {
                quotas[c][s] += 1;
                class_fill[c] += 1;
                split_fill[s] += 1;
                progressed = true;
            }
        }
        if class_fill.iter().zip(class_counts).all(|(a, b)| a == b) {
            break;
        }
        assert!(progressed, "split quota fitting stalled");
    }
    quotas
}
