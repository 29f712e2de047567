//! Dual-level masking: whole frames are dropped first, then patches are
//! dropped from the kept frames, so `a + (1-a)*b%` of all signals end up
//! masked (with `a` the frame ratio and `b` the patch percentage).
//!
//! Counts are exact: `round(alpha*T)` frames and `round(beta/100*P)`
//! patches per kept frame, round-half-up. Fully-masked frames contribute
//! all `P` patches to the masked set so the decoder reconstructs them.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::data::VideoClip;
use crate::error::{MvccError, Result};

/// Round half up; all masking counts derive through this.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    /// Frames.
    pub t: usize,
    /// Patches per frame.
    pub p: usize,
}

/// Deterministic record of which frames and which patches are masked for
/// one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPlan {
    pub alpha: f64,
    pub beta_pct: f64,
    pub grid: GridShape,
    /// Strictly increasing indices of frames that survive frame-level
    /// masking.
    pub kept_frames: Vec<usize>,
    /// Sorted masked patch indices for each kept frame.
    pub masked_patches_per_kept_frame: BTreeMap<usize, Vec<usize>>,
    /// Seed of the RNG stream that produced the draws.
    pub seed: u64,
}

impl MaskPlan {
    pub fn masked_frames(&self) -> Vec<usize> {
        let kept: std::collections::BTreeSet<usize> = self.kept_frames.iter().copied().collect();
        (0..self.grid.t).filter(|f| !kept.contains(f)).collect()
    }

    /// All masked (frame, patch) positions in ascending (frame, patch)
    /// order. Fully-masked frames contribute every patch.
    pub fn mask_positions(&self) -> Vec<(usize, usize)> {
        let kept: std::collections::BTreeSet<usize> = self.kept_frames.iter().copied().collect();
        let mut out = Vec::new();
        for f in 0..self.grid.t {
            if kept.contains(&f) {
                if let Some(patches) = self.masked_patches_per_kept_frame.get(&f) {
                    out.extend(patches.iter().map(|&j| (f, j)));
                }
            } else {
                out.extend((0..self.grid.p).map(|j| (f, j)));
            }
        }
        out
    }

    pub fn masked_signal_count(&self) -> usize {
        let masked_frames = self.grid.t - self.kept_frames.len();
        let patch_sum: usize = self
            .masked_patches_per_kept_frame
            .values()
            .map(Vec::len)
            .sum();
        masked_frames * self.grid.p + patch_sum
    }

    pub fn total_masked_fraction(&self) -> f64 {
        self.masked_signal_count() as f64 / (self.grid.t * self.grid.p) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let plan: MaskPlan = serde_json::from_slice(bytes)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let GridShape { t, p } = self.grid;
        if t == 0 || p == 0 {
            return Err(MvccError::Contract("grid dims must be >= 1".into()));
        }
        if !self.kept_frames.windows(2).all(|w| w[0] < w[1])
            || self.kept_frames.iter().any(|&f| f >= t)
        {
            return Err(MvccError::Contract(
                "kept frames must be strictly increasing within [0, T)".into(),
            ));
        }
        if self.kept_frames.is_empty() {
            return Err(MvccError::Contract("at least one frame must survive".into()));
        }
        for (f, patches) in &self.masked_patches_per_kept_frame {
            if !self.kept_frames.contains(f) {
                return Err(MvccError::Contract(format!(
                    "patch list for frame {f} which is not kept"
                )));
            }
            if !patches.windows(2).all(|w| w[0] < w[1]) || patches.iter().any(|&j| j >= p) {
                return Err(MvccError::Contract(format!(
                    "masked patches of frame {f} must be strictly increasing within [0, P)"
                )));
            }
        }
        Ok(())
    }
}

/// Uniform sample of `k` of `n` indices without replacement: a partial
/// Fisher-Yates over `0..n`, one `random_range(i..n)` draw per pick,
/// result sorted ascending. Tests replay this exact procedure.
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

/// Build a mask plan for a (T, P) grid. Draw order: masked frames first,
/// then masked patches for each kept frame in ascending frame order.
pub fn make_mask_plan(t: usize, p: usize, alpha: f64, beta_pct: f64, seed: u64) -> Result<MaskPlan> {
    if t == 0 || p == 0 {
        return Err(MvccError::Config("T and P must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(MvccError::Config(format!("alpha {alpha} must be in [0, 1)")));
    }
    if !(0.0..=100.0).contains(&beta_pct) {
        return Err(MvccError::Config(format!(
            "beta_pct {beta_pct} must be in [0, 100]"
        )));
    }
    let n_masked_frames = round_half_up(alpha * t as f64);
    if n_masked_frames >= t {
        return Err(MvccError::Config(
            "at least one frame must survive frame-level masking".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked_frames = sample_indices(&mut rng, t, n_masked_frames);
    let masked_set: std::collections::BTreeSet<usize> = masked_frames.iter().copied().collect();
    let kept_frames: Vec<usize> = (0..t).filter(|f| !masked_set.contains(f)).collect();

    let n_masked_patches = round_half_up(beta_pct / 100.0 * p as f64);
    let mut masked_patches = BTreeMap::new();
    for &f in &kept_frames {
        masked_patches.insert(f, sample_indices(&mut rng, p, n_masked_patches));
    }
    Ok(MaskPlan {
        alpha,
        beta_pct,
        grid: GridShape { t, p },
        kept_frames,
        masked_patches_per_kept_frame: masked_patches,
        seed,
    })
}

/// The full (unmasked) token grid of a clip: one row per patch, frame-major
/// then row-major within the frame; each row is the patch's pixels in
/// (y, x, channel) order.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub tokens: Mat,
    /// (frame, patch) per row.
    pub positions: Vec<(usize, usize)>,
    pub patch_size: usize,
    pub t: usize,
    /// Patches per frame.
    pub p: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub clip_id: String,
    pub label: u8,
}

impl PatchGrid {
    pub fn grid_shape(&self) -> GridShape {
        GridShape { t: self.t, p: self.p }
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.c
    }

    /// Original pixels at the plan's masked positions, in plan order.
    pub fn masked_targets(&self, plan: &MaskPlan) -> Mat {
        let positions = plan.mask_positions();
        let mut out = Mat::zeros((positions.len(), self.token_dim()));
        for (k, &(f, j)) in positions.iter().enumerate() {
            out.row_mut(k).assign(&self.tokens.row(f * self.p + j));
        }
        out
    }
}

pub fn patchify(clip: &VideoClip, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 || clip.h % patch_size != 0 || clip.w % patch_size != 0 {
        return Err(MvccError::Config(format!(
            "H={} and W={} must divide by patch size {patch_size}",
            clip.h, clip.w
        )));
    }
    let rows = clip.h / patch_size;
    let cols = clip.w / patch_size;
    let p = rows * cols;
    let dim = patch_size * patch_size * clip.c;
    let mut tokens = Mat::zeros((clip.t * p, dim));
    let mut positions = Vec::with_capacity(clip.t * p);
    for f in 0..clip.t {
        for pr in 0..rows {
            for pc in 0..cols {
                let j = pr * cols + pc;
                let row_idx = f * p + j;
                let mut d = 0;
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        for ch in 0..clip.c {
                            tokens[[row_idx, d]] =
                                clip.pixel(f, pr * patch_size + py, pc * patch_size + px, ch)
                                    as f64;
                            d += 1;
                        }
                    }
                }
                positions.push((f, j));
            }
        }
    }
    Ok(PatchGrid {
        tokens,
        positions,
        patch_size,
        t: clip.t,
        p,
        h: clip.h,
        w: clip.w,
        c: clip.c,
        clip_id: clip.clip_id.clone(),
        label: clip.label,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Result<VideoClip> {
    let ps = grid.patch_size;
    let cols = grid.w / ps;
    let mut pixels = vec![0.0f32; grid.t * grid.h * grid.w * grid.c];
    for (row_idx, &(f, j)) in grid.positions.iter().enumerate() {
        let (pr, pc) = (j / cols, j % cols);
        let mut d = 0;
        for py in 0..ps {
            for px in 0..ps {
                for ch in 0..grid.c {
                    let y = pr * ps + py;
                    let x = pc * ps + px;
                    pixels[((f * grid.h + y) * grid.w + x) * grid.c + ch] =
                        grid.tokens[[row_idx, d]] as f32;
                    d += 1;
                }
            }
        }
    }
    VideoClip::new(
        grid.clip_id.clone(),
        grid.label,
        grid.t,
        grid.h,
        grid.w,
        grid.c,
        pixels,
    )
}

/// Patch-embedded token view with the visible/masked partition applied.
/// Visible rows keep their original pixel content and relative order.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Mat,
    /// (frame, patch) of each visible row.
    pub token_positions: Vec<(usize, usize)>,
    /// (frame, patch) of each masked grid slot, ascending.
    pub mask_positions: Vec<(usize, usize)>,
    pub patch_size: usize,
    pub grid: GridShape,
}

impl TokenBatch {
    pub fn n_visible(&self) -> usize {
        self.token_positions.len()
    }
}

pub fn apply_mask(grid: &PatchGrid, plan: &MaskPlan) -> Result<TokenBatch> {
    if plan.grid != grid.grid_shape() {
        return Err(MvccError::Contract(format!(
            "plan grid {:?} does not match token grid {:?}",
            plan.grid,
            grid.grid_shape()
        )));
    }
    plan.validate()?;
    let total = grid.t * grid.p;
    let mut masked = vec![false; total];
    let mask_positions = plan.mask_positions();
    for &(f, j) in &mask_positions {
        masked[f * grid.p + j] = true;
    }
    let visible_idx: Vec<usize> = (0..total).filter(|&i| !masked[i]).collect();
    let mut tokens = Mat::zeros((visible_idx.len(), grid.token_dim()));
    let mut token_positions = Vec::with_capacity(visible_idx.len());
    for (k, &i) in visible_idx.iter().enumerate() {
        tokens.row_mut(k).assign(&grid.tokens.row(i));
        token_positions.push(grid.positions[i]);
    }
    Ok(TokenBatch {
        tokens,
        token_positions,
        mask_positions,
        patch_size: grid.patch_size,
        grid: grid.grid_shape(),
    })
}

/// Gather rows of the full grid at the plan's masked positions (used as
/// reconstruction targets).
pub fn masked_global_indices(plan: &MaskPlan) -> Rc<Vec<usize>> {
    Rc::new(
        plan.mask_positions()
            .iter()
            .map(|&(f, j)| f * plan.grid.p + j)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn paper_ratio_example_masks_seven_eighths() {
        let plan = make_mask_plan(16, 196, 0.5, 75.0, 3).unwrap();
        assert_eq!(plan.kept_frames.len(), 8);
        for patches in plan.masked_patches_per_kept_frame.values() {
            assert_eq!(patches.len(), 147);
        }
        assert_eq!(plan.masked_signal_count(), 8 * 196 + 8 * 147);
        let expect = 0.5 + 0.5 * 0.75;
        assert!((plan.total_masked_fraction() - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_zero_beta_masks_nothing() {
        let plan = make_mask_plan(4, 16, 0.0, 0.0, 1).unwrap();
        assert!(plan.mask_positions().is_empty());
        assert_eq!(plan.kept_frames, vec![0, 1, 2, 3]);
    }

    #[test]
    fn seeded_draw_replay_enumerates_positions() {
        // Oracle: replay the documented draw order (partial Fisher-Yates,
        // frames first, then patches per kept frame ascending).
        let (t, p, alpha, beta, seed) = (4usize, 16usize, 0.25f64, 50.0f64, 99u64);
        let plan = make_mask_plan(t, p, alpha, beta, seed).unwrap();
        assert_eq!(plan.kept_frames.len(), 3);
        for patches in plan.masked_patches_per_kept_frame.values() {
            assert_eq!(patches.len(), 8);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let replay_pick = |rng: &mut ChaCha8Rng, n: usize, k: usize| -> Vec<usize> {
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.random_range(i..n);
                pool.swap(i, j);
            }
            let mut out = pool[..k].to_vec();
            out.sort_unstable();
            out
        };
        let masked_frames = replay_pick(&mut rng, t, 1);
        assert_eq!(plan.masked_frames(), masked_frames);
        for &f in &plan.kept_frames {
            let expect = replay_pick(&mut rng, p, 8);
            assert_eq!(plan.masked_patches_per_kept_frame[&f], expect);
        }
    }

    #[test]
    fn alpha_rounding_to_all_frames_is_config_error() {
        assert!(make_mask_plan(2, 4, 0.8, 0.0, 0).is_err());
        // alpha just under the keep-one threshold still works
        assert!(make_mask_plan(2, 4, 0.7, 0.0, 0).is_ok());
    }

    #[test]
    fn plan_json_roundtrips() {
        let plan = make_mask_plan(6, 9, 0.4, 30.0, 17).unwrap();
        let json = plan.to_json();
        let back = MaskPlan::from_json_bytes(json.as_bytes()).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn degenerate_settings_reduce_to_single_level() {
        let patch_only = make_mask_plan(8, 16, 0.0, 50.0, 5).unwrap();
        assert!(patch_only.masked_frames().is_empty());
        let frame_only = make_mask_plan(8, 16, 0.5, 0.0, 5).unwrap();
        assert!(frame_only
            .masked_patches_per_kept_frame
            .values()
            .all(Vec::is_empty));
    }

    fn tiny_clip() -> VideoClip {
        let pixels: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        VideoClip::new("t".into(), 0, 1, 4, 4, 1, pixels).unwrap()
    }

    #[test]
    fn patchify_one_frame_two_by_two() {
        let grid = patchify(&tiny_clip(), 2).unwrap();
        assert_eq!(grid.p, 4);
        assert_eq!(grid.positions, vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
        // patch 0 covers pixels (0,0),(0,1),(1,0),(1,1) = 0,1,4,5 /16
        let row0: Vec<f64> = grid.tokens.row(0).to_vec();
        assert_eq!(row0, vec![0.0, 1.0 / 16.0, 4.0 / 16.0, 5.0 / 16.0]);
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pixels: Vec<f32> = (0..2 * 8 * 8 * 1).map(|_| rng.random_range(0.0..=1.0)).collect();
        let clip = VideoClip::new("rt".into(), 1, 2, 8, 8, 1, pixels).unwrap();
        let grid = patchify(&clip, 4).unwrap();
        assert_eq!(unpatchify(&grid).unwrap(), clip);
    }

    #[test]
    fn constant_clip_gives_constant_patches() {
        let clip = VideoClip::new("c".into(), 0, 2, 4, 4, 1, vec![0.25; 32]).unwrap();
        let grid = patchify(&clip, 2).unwrap();
        assert!(grid.tokens.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn apply_mask_empty_plan_keeps_everything() {
        let clip = tiny_clip();
        let grid = patchify(&clip, 2).unwrap();
        let plan = make_mask_plan(1, 4, 0.0, 0.0, 0).unwrap();
        let batch = apply_mask(&grid, &plan).unwrap();
        assert_eq!(batch.n_visible(), 4);
        assert!(batch.mask_positions.is_empty());
        assert_eq!(batch.tokens, grid.tokens);
    }

    #[test]
    fn apply_mask_single_survivor_keeps_source_pixels() {
        let clip = tiny_clip();
        let grid = patchify(&clip, 2).unwrap();
        // Hand-build a plan masking patches 0,1,2 of the only frame.
        let plan = MaskPlan {
            alpha: 0.0,
            beta_pct: 75.0,
            grid: GridShape { t: 1, p: 4 },
            kept_frames: vec![0],
            masked_patches_per_kept_frame: [(0usize, vec![0usize, 1, 2])].into_iter().collect(),
            seed: 0,
        };
        let batch = apply_mask(&grid, &plan).unwrap();
        assert_eq!(batch.n_visible(), 1);
        assert_eq!(batch.token_positions, vec![(0, 3)]);
        assert_eq!(batch.tokens.row(0), grid.tokens.row(3));
    }

    #[test]
    fn apply_mask_dimension_mismatch_is_contract_violation() {
        let clip = tiny_clip();
        let grid = patchify(&clip, 2).unwrap();
        let plan = make_mask_plan(2, 4, 0.0, 0.0, 0).unwrap();
        assert!(matches!(
            apply_mask(&grid, &plan).unwrap_err(),
            MvccError::Contract(_)
        ));
    }

    #[test]
    fn different_seeds_generally_differ() {
        let plans: Vec<MaskPlan> = (0..20)
            .map(|s| make_mask_plan(8, 32, 0.5, 50.0, s).unwrap())
            .collect();
        let distinct = plans
            .iter()
            .map(|p| format!("{:?}{:?}", p.kept_frames, p.masked_patches_per_kept_frame))
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        assert!(distinct > 15, "only {distinct} distinct plans across 20 seeds");
    }

    proptest! {
        #[test]
        fn counts_are_exact_everywhere(
            t in 1usize..=32,
            p in 1usize..=256,
            alpha in 0.0f64..0.9,
            beta in 0.0f64..=100.0,
            seed in 0u64..1000,
        ) {
            let plan = match make_mask_plan(t, p, alpha, beta, seed) {
                Ok(plan) => plan,
                // Only legitimate rejection: no frame would survive.
                Err(_) => {
                    prop_assert!(round_half_up(alpha * t as f64) >= t);
                    return Ok(());
                }
            };
            let masked_frames = round_half_up(alpha * t as f64);
            prop_assert_eq!(plan.kept_frames.len(), t - masked_frames);
            let per_frame = round_half_up(beta / 100.0 * p as f64);
            for patches in plan.masked_patches_per_kept_frame.values() {
                prop_assert_eq!(patches.len(), per_frame);
            }
            prop_assert_eq!(
                plan.masked_signal_count(),
                masked_frames * p + (t - masked_frames) * per_frame
            );
        }

        #[test]
        fn visible_and_masked_partition_the_grid(
            t in 1usize..=8,
            hp in 1usize..=3,
            wp in 1usize..=3,
            alpha in 0.0f64..0.8,
            beta in 0.0f64..=100.0,
            seed in 0u64..100,
        ) {
            let ps = 2usize;
            let (h, w) = (hp * ps, wp * ps);
            let pixels = vec![0.5f32; t * h * w];
            let clip = VideoClip::new("p".into(), 0, t, h, w, 1, pixels).unwrap();
            let grid = patchify(&clip, ps).unwrap();
            let plan = match make_mask_plan(t, grid.p, alpha, beta, seed) {
                Ok(plan) => plan,
                Err(_) => return Ok(()),
            };
            let batch = apply_mask(&grid, &plan).unwrap();
            let mut all: Vec<(usize, usize)> = batch
                .token_positions
                .iter()
                .chain(batch.mask_positions.iter())
                .copied()
                .collect();
            prop_assert_eq!(all.len(), t * grid.p);
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), t * grid.p, "positions overlap");
        }

        #[test]
        fn plans_are_deterministic(seed in 0u64..500) {
            let a = make_mask_plan(6, 12, 0.3, 40.0, seed).unwrap();
            let b = make_mask_plan(6, 12, 0.3, 40.0, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
