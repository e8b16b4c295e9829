//! Diverse completion of tokenized low-resolution images.
//!
//! `batfill` models a low-resolution image as a sequence of color-palette
//! tokens and fills missing regions with a decoder-only transformer that
//! combines bidirectional context over the visible pixels with autoregressive
//! generation of the missing ones. The pipeline:
//!
//! 1. [`palette`] — learn a k-means RGB palette and tokenize images.
//! 2. [`maskgen`] — irregular brush-stroke hole masks in ratio buckets.
//! 3. [`sequence`] — permute tokens into the hybrid-attention layout
//!    (visible tokens up front, masked placeholders, then a causal
//!    predicted part) and build the matching attention mask.
//! 4. [`numerics`] — a small reverse-mode tape over dense `f64` tensors.
//! 5. [`model`] — the pre-norm transformer with checkpoint I/O.
//! 6. [`objectives`] — AR / MLM / BAT losses, AdamW, and the training loop.
//! 7. [`sampler`] — raster-scan top-K sampling and the MLM Gibbs baseline.
//! 8. [`eval`] — desk-scale metrics and the three-way ablation harness.
//!
//! The `examples/` directory holds one runnable program per capability; the
//! `batfill` binary wraps the same entry points as batch subcommands.

pub mod commands;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod io;
pub mod manifest;
pub mod maskgen;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod palette;
pub mod sampler;
pub mod sequence;

pub use error::{Error, Result};
pub use maskgen::MaskGrid;
pub use palette::{Palette, RgbGrid, TokenGrid};
