//! Random irregular hole masks in configurable missing-ratio buckets.
//!
//! Masks are unions of brush strokes (random walks with random thickness).
//! The generator paints strokes cell by cell and stops exactly at a missing
//! count drawn inside the requested bucket, so every draw lands in bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major boolean grid; `true` marks a missing (to-be-predicted) cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    missing: Vec<bool>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, missing: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("mask dimensions must be positive".into()));
        }
        if missing.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} flags for {height}x{width} mask",
                missing.len()
            )));
        }
        Ok(MaskGrid { height, width, missing })
    }

    /// Explicit all-masked constructor. The random generator never produces
    /// this; tests and fully-ambiguous sampling demos need it.
    pub fn all_masked(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn none_masked(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.width + col]
    }

    /// Raster indices of missing cells, ascending.
    pub fn missing_positions(&self) -> Vec<usize> {
        self.missing
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

/// Fraction of missing cells.
pub fn mask_ratio(mask: &MaskGrid) -> f64 {
    mask.missing_count() as f64 / (mask.height() * mask.width()) as f64
}

/// Draws an irregular mask whose missing fraction lies in `[ratio_lo, ratio_hi]`.
///
/// Deterministic per seed. The random generator never returns an all-masked
/// grid; use [`MaskGrid::all_masked`] for that.
pub fn random_irregular_mask(
    height: usize,
    width: usize,
    ratio_lo: f64,
    ratio_hi: f64,
    seed: u64,
) -> Result<MaskGrid> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("mask dimensions must be positive".into()));
    }
    if !(0.0..=1.0).contains(&ratio_lo) || !(0.0..=1.0).contains(&ratio_hi) || ratio_lo >= ratio_hi
    {
        return Err(Error::InvalidArgument(format!(
            "mask ratio bucket must satisfy 0 <= lo < hi <= 1, got [{ratio_lo}, {ratio_hi}]"
        )));
    }
    let total = height * width;
    // Feasible integer missing-counts inside the bucket, excluding all-masked.
    let lo_count = (ratio_lo * total as f64).ceil() as usize;
    let hi_count = ((ratio_hi * total as f64).floor() as usize).min(total - 1);
    if lo_count > hi_count {
        return Err(Error::InvalidArgument(format!(
            "no achievable missing count in [{ratio_lo}, {ratio_hi}] for a {height}x{width} grid"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(lo_count..=hi_count);
    let mut missing = vec![false; total];
    let mut count = 0usize;

    let max_thickness = (height.min(width) / 4).max(1);
    'outer: while count < target {
        // One brush stroke: a random walk with a square brush.
        let len = rng.gen_range(1..=(total / 4).max(1));
        let thickness = rng.gen_range(1..=max_thickness);
        let mut r = rng.gen_range(0..height) as i64;
        let mut c = rng.gen_range(0..width) as i64;
        let mut dr = rng.gen_range(-1..=1i64);
        let mut dc = rng.gen_range(-1..=1i64);
        for _ in 0..len {
            let t = thickness as i64;
            for br in (r - t / 2)..=(r + t / 2) {
                for bc in (c - t / 2)..=(c + t / 2) {
                    if br < 0 || bc < 0 || br >= height as i64 || bc >= width as i64 {
                        continue;
                    }
                    let idx = br as usize * width + bc as usize;
                    if !missing[idx] {
                        missing[idx] = true;
                        count += 1;
                        if count == target {
                            continue 'outer;
                        }
                    }
                }
            }
            // Mostly straight, occasionally turning.
            if rng.gen_bool(0.3) {
                dr = rng.gen_range(-1..=1);
                dc = rng.gen_range(-1..=1);
            }
            r = (r + dr).clamp(0, height as i64 - 1);
            c = (c + dc).clamp(0, width as i64 - 1);
        }
    }

    MaskGrid::new(height, width, missing)
}
