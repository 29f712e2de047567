//! On-disk clip format.
//!
//! Layout: magic `"MVCC"`, format version `u8`, header of four
//! little-endian `u32` (T, H, W, C), then `T*H*W*C` little-endian `f32`
//! pixels in `[0, 1]`, frame-major order.
//!
//! The decoder treats input as untrusted: every length is validated
//! before any allocation and errors carry the offending byte offset.

use std::fs;
use std::path::Path;

use crate::data::VideoClip;
use crate::error::{MvccError, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"MVCC";
pub const CLIP_FORMAT_VERSION: u8 = 1;

const HEADER_LEN: usize = 4 + 1 + 4 * 4;

/// Pixel payload plus dimensions, before manifest metadata is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<f32>,
}

fn format_err(offset: usize, msg: impl Into<String>) -> MvccError {
    MvccError::Format {
        offset,
        msg: msg.into(),
    }
}

/// Decode a clip from raw bytes.
pub fn decode_clip_bytes(bytes: &[u8]) -> Result<RawClip> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(format_err(0, "bad magic, expected \"MVCC\""));
    }
    if bytes.len() < 5 {
        return Err(format_err(4, "truncated version byte"));
    }
    if bytes[4] != CLIP_FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported format version {}", bytes[4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated dimension header"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 5 + 4 * i;
        let raw = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if raw == 0 {
            return Err(format_err(at, "dimension must be >= 1"));
        }
        *d = raw as usize;
    }
    let [t, h, w, c] = dims;
    let n_elems = (t as u64)
        .checked_mul(h as u64)
        .and_then(|v| v.checked_mul(w as u64))
        .and_then(|v| v.checked_mul(c as u64))
        .ok_or_else(|| format_err(5, "dimension product overflows"))?;
    let expected = HEADER_LEN as u64 + 4 * n_elems;
    if (bytes.len() as u64) < expected {
        return Err(format_err(
            bytes.len(),
            format!(
                "payload short: header declares {} pixels ({} bytes), got {}",
                n_elems,
                expected,
                bytes.len()
            ),
        ));
    }
    if (bytes.len() as u64) > expected {
        return Err(format_err(
            expected as usize,
            "trailing bytes after declared payload",
        ));
    }

    let mut pixels = Vec::with_capacity(n_elems as usize);
    for i in 0..n_elems as usize {
        let at = HEADER_LEN + 4 * i;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(format_err(at, format!("pixel value {v} outside [0, 1]")));
        }
        pixels.push(v);
    }
    Ok(RawClip { t, h, w, c, pixels })
}

pub fn encode_clip_bytes(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * clip.pixels.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.push(CLIP_FORMAT_VERSION);
    for d in [clip.t, clip.h, clip.w, clip.c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &p in &clip.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    fs::write(path, encode_clip_bytes(clip)).map_err(|e| MvccError::io(path, e))
}

/// Load a clip; identity and label come from the manifest entry because
/// the pixel file intentionally carries neither.
pub fn read_clip(path: &Path, clip_id: &str, label: u8) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| MvccError::io(path, e))?;
    let raw = decode_clip_bytes(&bytes)?;
    VideoClip::new(clip_id.to_string(), label, raw.t, raw.h, raw.w, raw.c, raw.pixels)
}
