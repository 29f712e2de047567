//! Synthetic two-class video generator.
//!
//! Class 0 renders a smooth-boundary ellipse that drifts slowly through the
//! frame; class 1 renders an irregular-boundary blob whose center jitters
//! frame to frame. Both are overlaid with multiplicative speckle. The
//! `difficulty` knob interpolates class-1 boundary irregularity and jitter
//! toward class 0, producing ambiguous negatives near `difficulty = 1`.
//!
//! Every clip derives its randomness from `(seed, clip_index)`, so parallel
//! and serial generation produce identical bytes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    save_manifest, stratified_split_quotas, write_clip, DatasetManifest, ManifestEntry, Split,
    VideoClip,
};
use crate::error::{MvccError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// benign : malignant, e.g. (3, 1).
    pub class_ratio: (u32, u32),
    /// 0 = well separated classes, 1 = class 1 collapses onto class 0.
    pub difficulty: f64,
    /// Multiplicative speckle noise level.
    pub speckle: f64,
    /// Train/val/test fractions, must sum to 1.
    pub split: [f64; 3],
    /// Patch size the downstream model will use; H and W must divide by it.
    pub patch_size: usize,
}

impl GeneratorParams {
    pub fn default_for(_n_clips: usize) -> Self {
        GeneratorParams {
            frames: 16,
            height: 64,
            width: 64,
            channels: 1,
            class_ratio: (3, 1),
            difficulty: 0.1,
            speckle: 0.15,
            split: [0.7, 0.1, 0.2],
            patch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(MvccError::Config("clip dims must be >= 1".into()));
        }
        if self.patch_size == 0
            || self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
        {
            return Err(MvccError::Config(format!(
                "H={} and W={} must be divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.class_ratio.0 == 0 || self.class_ratio.1 == 0 {
            return Err(MvccError::Config("class ratio parts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(MvccError::Config("difficulty must be in [0, 1]".into()));
        }
        if self.speckle < 0.0 {
            return Err(MvccError::Config("speckle must be >= 0".into()));
        }
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&f| f < 0.0) {
            return Err(MvccError::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Stream offset separating split-assignment draws from clip rendering.
const SPLIT_STREAM: u64 = 0x53504c49;

/// splitmix64; decorrelates per-clip RNG streams from (seed, index).
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn label_for_index(i: usize, ratio: (u32, u32)) -> u8 {
    let cycle = (ratio.0 + ratio.1) as usize;
    u8::from(i % cycle >= ratio.0 as usize)
}

/// Render one clip. Public within the crate so tests can probe single clips
/// without touching the filesystem.
pub fn synth_clip(params: &GeneratorParams, seed: u64, index: usize) -> VideoClip {
    let label = label_for_index(index, params.class_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let (t, h, w, c) = (params.frames, params.height, params.width, params.channels);
    let (hf, wf) = (h as f64, w as f64);

    // Clip-level draws, fixed order.
    let bg: f64 = 0.55 + rng.random_range(-0.08..0.08);
    let depth: f64 = 0.5 + rng.random_range(0.0..0.12);
    let mut cx: f64 = wf * rng.random_range(0.40..0.60);
    let mut cy: f64 = hf * rng.random_range(0.40..0.60);
    let r0: f64 = hf.min(wf) * rng.random_range(0.18..0.28);
    let ecc: f64 = rng.random_range(0.72..1.0);
    let rot: f64 = rng.random_range(0.0..PI);
    let drift_x: f64 = rng.random_range(-0.4..0.4);
    let drift_y: f64 = rng.random_range(-0.4..0.4);

    // Class-1 structure, interpolated toward class 0 by difficulty.
    let away = 1.0 - params.difficulty;
    let (irregularity, jitter_amp) = if label == 1 {
        let u1: f64 = rng.random_range(0.55..1.0);
        let u2: f64 = rng.random_range(0.55..1.0);
        (0.38 * away * u1, 1.6 * away * u2)
    } else {
        // Burn the same draws to keep downstream streams aligned.
        let _: f64 = rng.random_range(0.55..1.0);
        let _: f64 = rng.random_range(0.55..1.0);
        (0.0, 0.0)
    };
    let n_lobes = 4;
    let mut lobe_amp = [0.0f64; 4];
    let mut lobe_phase = [0.0f64; 4];
    for k in 0..n_lobes {
        lobe_amp[k] = rng.random_range(0.5..1.0) / (k + 3) as f64 * 3.0;
        lobe_phase[k] = rng.random_range(0.0..2.0 * PI);
    }

    let (sin_r, cos_r) = rot.sin_cos();
    let edge = 1.5;
    let mut pixels = Vec::with_capacity(t * h * w * c);
    for _frame in 0..t {
        // Per-frame draws: jitter step, phase wobble, then pixel noise.
        let jx: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let jy: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let wobble: f64 = rng.random_range(-0.25..0.25);
        cx += drift_x + jitter_amp * jx;
        cy += drift_y + jitter_amp * jy;
        cx = cx.clamp(wf * 0.2, wf * 0.8);
        cy = cy.clamp(hf * 0.2, hf * 0.8);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                // Rotate into the ellipse frame, squeeze the minor axis.
                let ex = dx * cos_r + dy * sin_r;
                let ey = (-dx * sin_r + dy * cos_r) / ecc;
                let rr = (ex * ex + ey * ey).sqrt();
                let theta = ey.atan2(ex);
                let mut boundary = r0;
                if irregularity > 0.0 {
                    let mut bump = 0.0;
                    for k in 0..n_lobes {
                        bump += lobe_amp[k]
                            * ((k + 3) as f64 * theta + lobe_phase[k] + wobble).sin();
                    }
                    boundary *= 1.0 + irregularity * bump / n_lobes as f64;
                }
                let inside = ((boundary - rr) / edge).clamp(0.0, 1.0);
                let base = bg * (1.0 - depth * inside);
                for _ in 0..c {
                    let g: f64 =
                        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                    let v = (base * (1.0 + params.speckle * g)).clamp(0.0, 1.0);
                    pixels.push(v as f32);
                }
            }
        }
    }
    VideoClip::new(format!("clip{index:05}"), label, t, h, w, c, pixels)
        .expect("generator produces valid clips")
}

fn assign_splits(n_clips: usize, params: &GeneratorParams, seed: u64) -> Vec<Split> {
    let labels: Vec<u8> = (0..n_clips)
        .map(|i| label_for_index(i, params.class_ratio))
        .collect();
    let counts = [
        labels.iter().filter(|&&l| l == 0).count(),
        labels.iter().filter(|&&l| l == 1).count(),
    ];
    let quotas = stratified_split_quotas(&counts, &params.split);

    let mut out = vec![Split::Train; n_clips];
    for class in 0..2 {
        let mut members: Vec<usize> = (0..n_clips)
            .filter(|&i| labels[i] as usize == class)
            .collect();
        // Fisher-Yates with a split-specific stream.
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SPLIT_STREAM + class as u64));
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        let mut at = 0;
        for (s, &q) in quotas[class].iter().enumerate() {
            let split = [Split::Train, Split::Val, Split::Test][s];
            for &m in &members[at..at + q] {
                out[m] = split;
            }
            at += q;
        }
    }
    out
}

/// Generate `n_clips` synthetic clips plus a manifest under `out_dir`.
/// Deterministic for a given `(params, seed)`; clips may be rendered in
/// parallel because each derives its RNG from `(seed, clip_index)`.
pub fn generate_synthetic_dataset(
    out_dir: &Path,
    n_clips: usize,
    params: &GeneratorParams,
    seed: u64,
) -> Result<DatasetManifest> {
    params.validate()?;
    if n_clips < 4 {
        return Err(MvccError::Config("n_clips must be >= 4".into()));
    }
    let clips_dir = out_dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| MvccError::io(&clips_dir, e))?;

    let clips: Vec<VideoClip> = (0..n_clips)
        .into_par_iter()
        .map(|i| synth_clip(params, seed, i))
        .collect();
    let splits = assign_splits(n_clips, params, seed);

    let mut entries = Vec::with_capacity(n_clips);
    for (clip, split) in clips.iter().zip(&splits) {
        let rel = format!("clips/{}.mvcc", clip.clip_id);
        write_clip(&out_dir.join(&rel), clip)?;
        entries.push(ManifestEntry {
            clip_id: clip.clip_id.clone(),
            path: rel,
            label: clip.label,
            split: *split,
        });
    }
    let manifest = DatasetManifest {
        entries,
        generator_params: params.clone(),
        seed,
    };
    save_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn small_params() -> GeneratorParams {
        GeneratorParams {
            frames: 4,
            height: 16,
            width: 16,
            channels: 1,
            patch_size: 4,
            ..GeneratorParams::default_for(8)
        }
    }

    #[test]
    fn eight_clips_at_three_to_one_gives_six_two() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_synthetic_dataset(dir.path(), 8, &small_params(), 7).unwrap();
        assert_eq!(manifest.entries.len(), 8);
        let benign = manifest.entries.iter().filter(|e| e.label == 0).count();
        let malignant = manifest.entries.iter().filter(|e| e.label == 1).count();
        assert_eq!((benign, malignant), (6, 2));
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let params = small_params();
        generate_synthetic_dataset(dir_a.path(), 8, &params, 7).unwrap();
        generate_synthetic_dataset(dir_b.path(), 8, &params, 7).unwrap();
        for i in 0..8 {
            let name = format!("clips/clip{i:05}.mvcc");
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "clip {i} differs between identical runs");
        }
        let ma = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn hundred_clips_split_seventy_ten_twenty() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_synthetic_dataset(dir.path(), 100, &small_params(), 1).unwrap();
        let count = |s: Split| manifest.entries.iter().filter(|e| e.split == s).count();
        assert_eq!(count(Split::Train), 70);
        assert_eq!(count(Split::Val), 10);
        assert_eq!(count(Split::Test), 20);
    }

    #[test]
    fn splits_are_stratified_by_label() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_synthetic_dataset(dir.path(), 40, &small_params(), 3).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let entries = manifest.split_ids(split);
            let pos = entries.iter().filter(|e| e.label == 1).count();
            // 3:1 ratio should carry into each split within one clip.
            let ideal = entries.len() as f64 * 0.25;
            assert!(
                (pos as f64 - ideal).abs() <= 1.0,
                "{split}: {pos} positives of {}",
                entries.len()
            );
        }
    }

    #[test]
    fn dataset_loads_back_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(dir.path(), 8, &small_params(), 5).unwrap();
        let ds = Dataset::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(ds.clips.len(), 8);
        for (clip, entry) in ds.clips.iter().zip(&ds.manifest.entries) {
            assert_eq!(clip.clip_id, entry.clip_id);
            assert_eq!(clip.label, entry.label);
        }
    }

    #[test]
    fn rejects_dims_not_divisible_by_patch_size() {
        let mut params = small_params();
        params.height = 17;
        let dir = tempfile::tempdir().unwrap();
        let err = generate_synthetic_dataset(dir.path(), 8, &params, 1).unwrap_err();
        assert!(matches!(err, MvccError::Config(_)));
    }

    #[test]
    fn classes_differ_visibly_at_easy_difficulty() {
        let params = small_params();
        // Boundary roughness proxy: mean absolute frame-to-frame change.
        let motion = |clip: &VideoClip| -> f64 {
            let mut acc = 0.0;
            let frame = clip.h * clip.w;
            for f in 1..clip.t {
                for i in 0..frame {
                    acc += (clip.pixels[f * frame + i] - clip.pixels[(f - 1) * frame + i]).abs()
                        as f64;
                }
            }
            acc / ((clip.t - 1) * frame) as f64
        };
        let benign: f64 = (0..6).map(|i| motion(&synth_clip(&params, 11, i * 4))).sum::<f64>() / 6.0;
        let malignant: f64 =
            (0..6).map(|i| motion(&synth_clip(&params, 11, i * 4 + 3))).sum::<f64>() / 6.0;
        assert!(
            malignant > benign,
            "jittering class should move more: {malignant} vs {benign}"
        );
    }
}
