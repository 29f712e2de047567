//! Clip augmentation: scale, horizontal flip, crop.
//!
//! One transform is sampled per clip and applied to every frame, so the
//! spatial relationship between frames is preserved. The caller owns the
//! RNG; there is no hidden global state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{MvccError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Output (height, width).
    pub crop_size: (usize, usize),
}

impl AugmentationConfig {
    /// Identity configuration for a given clip geometry.
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentationConfig {
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            crop_size: (h, w),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || lo > hi {
            return Err(MvccError::Config(format!(
                "scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(MvccError::Config("flip_prob must be in [0, 1]".into()));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(MvccError::Config("crop_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Bilinear resize of one frame; identity short-circuits so a scale of 1
/// is bit-exact.
fn resize_frame(src: &[f32], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<f32> {
    if nh == h && nw == w {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; nh * nw * c];
    for y in 0..nh {
        let sy = ((y as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..nw {
            let sx = ((x as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * nw + x) * c + ch] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

/// Apply one sampled scale/flip/crop to every frame of the clip.
/// Draw order: scale factor, flip coin, crop y offset, crop x offset.
pub fn augment(clip: &VideoClip, cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Result<VideoClip> {
    cfg.validate()?;
    let (lo, hi) = cfg.scale_range;
    let scale: f64 = rng.random_range(lo..=hi);
    let flip = rng.random_range(0.0..1.0) < cfg.flip_prob;
    let nh = ((clip.h as f64 * scale).round() as usize).max(1);
    let nw = ((clip.w as f64 * scale).round() as usize).max(1);
    let (ch, cw) = cfg.crop_size;
    if ch > nh || cw > nw {
        return Err(MvccError::Config(format!(
            "crop {ch}x{cw} larger than scaled frame {nh}x{nw}"
        )));
    }
    let oy = rng.random_range(0..=nh - ch);
    let ox = rng.random_range(0..=nw - cw);

    let frame_len = clip.h * clip.w * clip.c;
    let mut pixels = Vec::with_capacity(clip.t * ch * cw * clip.c);
    for f in 0..clip.t {
        let frame = &clip.pixels[f * frame_len..(f + 1) * frame_len];
        let mut scaled = resize_frame(frame, clip.h, clip.w, clip.c, nh, nw);
        if flip {
            for y in 0..nh {
                for x in 0..nw / 2 {
                    for chn in 0..clip.c {
                        scaled.swap((y * nw + x) * clip.c + chn, (y * nw + (nw - 1 - x)) * clip.c + chn);
                    }
                }
            }
        }
        for y in 0..ch {
            for x in 0..cw {
                for chn in 0..clip.c {
                    pixels.push(scaled[((oy + y) * nw + (ox + x)) * clip.c + chn]);
                }
            }
        }
    }
    VideoClip::new(
        clip.clip_id.clone(),
        clip.label,
        clip.t,
        ch,
        cw,
        clip.c,
        pixels,
    )
}
