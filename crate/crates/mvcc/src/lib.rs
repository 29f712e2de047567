//! Masked video modeling with correlation-aware contrastive learning.
//!
//! A desk-scale training and evaluation framework for binary video
//! classification: a divided space-time attention encoder is pretrained by
//! reconstructing dual-level-masked videos (whole frames plus patches on the
//! kept frames), then fine-tuned with cross-entropy plus a correlation-aware
//! contrastive loss. Ships with a synthetic two-class video generator, a
//! reproducible training/evaluation harness, and a CLI (`mvcc`).

pub mod autograd;
pub mod data;
pub mod error;
pub mod losses;
pub mod masking;
pub mod model;

pub use error::{MvccError, Result};
