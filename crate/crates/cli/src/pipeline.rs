//! Per-step training data: batch selection and pair augmentation.

use rand::Rng;

use mimicforge_core::augment::{apply_color_jitter, apply_full_augmentation, AugmentConfig};
use mimicforge_core::{seed, ImageBuf, Result};

/// Source receives color jitter only, so it stays aligned with its mask and
/// depth; the reference gets the full geometric and photometric chain.
pub fn augment_pair(
    source: &ImageBuf,
    reference: &ImageBuf,
    aug: &AugmentConfig,
    rng_seed: u64,
) -> Result<(ImageBuf, ImageBuf)> {
    let s = apply_color_jitter(source, aug, seed::derive(rng_seed, 1))?;
    let r = apply_full_augmentation(reference, aug, seed::derive(rng_seed, 2))?;
    Ok((s, r))
}

/// Pair indices for `step`, uniform with replacement; a pure function of
/// `(seed, step)` so resumed runs see the same data as uninterrupted ones.
pub fn batch_indices(pool: usize, batch: usize, rng_seed: u64, step: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed::derive(seed::derive(rng_seed, seed::tag("batch")), step));
    (0..batch).map(|_| rng.random_range(0..pool)).collect()
}

/// Seed for item `i` of `step`.
pub fn item_seed(rng_seed: u64, step: u64, i: usize) -> u64 {
    seed::derive(seed::derive(seed::derive(rng_seed, seed::tag("item")), step), i as u64)
}
