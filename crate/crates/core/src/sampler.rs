//! Training-pair construction: SSIM-banded frame pairs from videos and
//! augmentation-built pseudo pairs from segmented stills.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_full_augmentation, AugmentConfig};
use crate::error::{Error, Result};
use crate::imgcore::{self as io, ImageBuf};
use crate::metrics::selection_ssim;
use crate::seed;

const ATTEMPTS_PER_PAIR: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionBand {
    pub t_low: f64,
    pub t_high: f64,
}

impl Default for SelectionBand {
    fn default() -> Self {
        Self {
            t_low: 0.3,
            t_high: 0.9,
        }
    }
}

impl SelectionBand {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_low && self.t_low < self.t_high && self.t_high <= 1.0) {
            return Err(Error::invalid(format!(
                "selection band ({}, {}) must satisfy 0 <= low < high <= 1",
                self.t_low, self.t_high
            )));
        }
        Ok(())
    }

    pub fn contains(&self, s: f64) -> bool {
        self.t_low <= s && s <= self.t_high
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum Origin {
    Video {
        video_id: String,
        idx_a: usize,
        idx_b: usize,
    },
    Pseudo {
        image_id: String,
    },
}

impl Origin {
    pub fn is_video(&self) -> bool {
        matches!(self, Origin::Video { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub source: ImageBuf,
    pub reference: ImageBuf,
    pub ssim_score: f64,
    pub origin: Origin,
    /// Object mask for pseudo pairs; video pairs are grid-masked downstream.
    pub object_mask: Option<ImageBuf>,
}

/// Maps a linear index over the strict upper triangle of an `n × n` matrix
/// back to `(i, j)` with `i < j`.
fn triangle_pair(n: usize, mut k: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// Samples candidate frame pairs without replacement, keeping those whose
/// selection SSIM lies inside `band`. Stops at `max_pairs` accepted or after
/// `20 × max_pairs` candidates. Which frame acts as source is seeded per pair.
pub fn select_pairs(
    frames: &[ImageBuf],
    video_id: &str,
    band: &SelectionBand,
    max_pairs: usize,
    rng_seed: u64,
) -> Result<Vec<FramePair>> {
    band.validate()?;
    let n = frames.len();
    if n < 2 || max_pairs == 0 {
        return Ok(Vec::new());
    }
    let total = n * (n - 1) / 2;
    let budget = total.min(ATTEMPTS_PER_PAIR * max_pairs);
    let mut rng = seed::rng(rng_seed);
    let order: Vec<(usize, bool)> = index::sample(&mut rng, total, budget)
        .into_iter()
        .map(|k| (k, rng.random::<bool>()))
        .collect();

    // Score in parallel chunks, accept strictly in candidate order.
    let chunk = max_pairs.max(rayon::current_num_threads()).max(4);
    let mut out = Vec::new();
    for batch in order.chunks(chunk) {
        let scored: Vec<Result<f64>> = batch
            .par_iter()
            .map(|&(k, _)| {
                let (i, j) = triangle_pair(n, k);
                selection_ssim(&frames[i], &frames[j])
            })
            .collect();
        for (&(k, swap), score) in batch.iter().zip(scored) {
            let score = score?;
            if !band.contains(score) {
                continue;
            }
            let (i, j) = triangle_pair(n, k);
            let (a, b) = if swap { (j, i) } else { (i, j) };
            out.push(FramePair {
                source: frames[a].clone(),
                reference: frames[b].clone(),
                ssim_score: score,
                origin: Origin::Video {
                    video_id: video_id.to_string(),
                    idx_a: a,
                    idx_b: b,
                },
                object_mask: None,
            });
            if out.len() == max_pairs {
                return Ok(out);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedStill {
    pub id: String,
    pub image: ImageBuf,
    pub object_masks: Vec<ImageBuf>,
}

impl SegmentedStill {
    pub fn validate(&self) -> Result<()> {
        if self.object_masks.is_empty() {
            return Err(Error::invalid(format!("still {} has no object masks", self.id)));
        }
        for (k, m) in self.object_masks.iter().enumerate() {
            if !m.is_binary_mask() || (m.height(), m.width()) != (self.image.height(), self.image.width())
            {
                return Err(Error::invalid(format!(
                    "still {} mask {k} is not a binary mask matching the image",
                    self.id
                )));
            }
            if m.count_positive() == 0 {
                return Err(Error::invalid(format!("still {} mask {k} is empty", self.id)));
            }
        }
        Ok(())
    }
}

/// Source is the still itself, reference an augmented copy; one object mask
/// is chosen uniformly and attached.
pub fn make_pseudo_pair(still: &SegmentedStill, cfg: &AugmentConfig, rng_seed: u64) -> Result<FramePair> {
    still.validate()?;
    let mut rng = seed::rng(rng_seed);
    let pick = rng.random_range(0..still.object_masks.len());
    let image = still.image.to_rgb();
    let reference = apply_full_augmentation(&image, cfg, rng.random())?;
    let ssim_score = selection_ssim(&image, &reference)?;
    Ok(FramePair {
        source: image,
        reference,
        ssim_score,
        origin: Origin::Pseudo {
            image_id: still.id.clone(),
        },
        object_mask: Some(still.object_masks[pick].clone()),
    })
}

/// Interleaves two pair streams, taking from the first with probability
/// `video_fraction`. When one runs dry the other is used (logged once).
pub struct MixSources<V, P> {
    video: V,
    pseudo: P,
    fraction: f64,
    rng: ChaCha8Rng,
    warned: bool,
}

pub fn mix_sources<T, V, P>(video: V, pseudo: P, video_fraction: f64, rng_seed: u64) -> Result<MixSources<V, P>>
where
    V: Iterator<Item = T>,
    P: Iterator<Item = T>,
{
    if !(0.0..=1.0).contains(&video_fraction) {
        return Err(Error::invalid(format!("video fraction {video_fraction} outside [0, 1]")));
    }
    Ok(MixSources {
        video,
        pseudo,
        fraction: video_fraction,
        rng: seed::rng(rng_seed),
        warned: false,
    })
}

impl<T, V, P> Iterator for MixSources<V, P>
where
    V: Iterator<Item = T>,
    P: Iterator<Item = T>,
{
    type Item = T;

    fn next(&mut self) -> Option<T> {
        let want_video = self.rng.random::<f64>() < self.fraction;
        let first = if want_video { self.video.next() } else { self.pseudo.next() };
        first.or_else(|| {
            let alt = if want_video { self.pseudo.next() } else { self.video.next() };
            if alt.is_some() && !self.warned {
                warn!(
                    "{} stream exhausted; drawing from the other",
                    if want_video { "video" } else { "still" }
                );
                self.warned = true;
            }
            alt
        })
    }
}

/// One video directory: frames in numeric order, optional per-frame depth.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub depth: Vec<Option<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StillEntry {
    pub id: String,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub videos: Vec<VideoEntry>,
    pub stills: Vec<StillEntry>,
}

impl DatasetIndex {
    pub fn is_empty(&self) -> bool {
        self.videos.is_empty() && self.stills.is_empty()
    }
}

fn sorted_dirs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !path.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        if entry.path().is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn numeric_stem(name: &str, suffix: &str) -> Option<u64> {
    let stem = name.strip_suffix(suffix)?;
    (!stem.is_empty() && stem.bytes().all(|b| b.is_ascii_digit())).then(|| stem.parse().ok())?
}

/// Scans `<root>/videos/<id>/NNNNN.png` (with optional `NNNNN_depth.png`)
/// and `<root>/stills/<id>/image.png` + `mask_K.png`. Ordering is by name.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let mut index = DatasetIndex::default();
    for (id, dir) in sorted_dirs(&root.join("videos"))? {
        let mut frames = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let name = entry.map_err(|e| Error::io(&dir, e))?.file_name();
            if let Some(n) = numeric_stem(&name.to_string_lossy(), ".png") {
                frames.push((n, dir.join(&name)));
            }
        }
        frames.sort();
        if frames.len() < 2 {
            warn!("video {id} has fewer than 2 frames; skipped");
            continue;
        }
        let depth = frames
            .iter()
            .map(|(_, p)| {
                let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
                let d = dir.join(format!("{stem}_depth.png"));
                d.is_file().then_some(d)
            })
            .collect();
        index.videos.push(VideoEntry {
            id,
            frames: frames.into_iter().map(|(_, p)| p).collect(),
            depth,
        });
    }
    for (id, dir) in sorted_dirs(&root.join("stills"))? {
        let image = dir.join("image.png");
        if !image.is_file() {
            warn!("still {id} has no image.png; skipped");
            continue;
        }
        let mut masks = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let name = entry.map_err(|e| Error::io(&dir, e))?.file_name();
            let name = name.to_string_lossy();
            if let Some(k) = name.strip_prefix("mask_").and_then(|r| numeric_stem(r, ".png")) {
                masks.push((k, dir.join(name.as_ref())));
            }
        }
        masks.sort();
        if masks.is_empty() {
            warn!("still {id} has no masks; skipped");
            continue;
        }
        index.stills.push(StillEntry {
            id,
            image,
            masks: masks.into_iter().map(|(_, p)| p).collect(),
        });
    }
    Ok(index)
}

/// Loads a mask PNG, thresholding at 0.5 into a single-channel binary buffer.
pub fn load_mask(path: impl AsRef<Path>) -> Result<ImageBuf> {
    let m = io::read_png(path)?.to_gray();
    Ok(m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

pub fn load_still(entry: &StillEntry) -> Result<SegmentedStill> {
    let still = SegmentedStill {
        id: entry.id.clone(),
        image: io::read_png(&entry.image)?.to_rgb(),
        object_masks: entry.masks.iter().map(load_mask).collect::<Result<_>>()?,
    };
    still.validate()?;
    Ok(still)
}

pub fn load_frames(entry: &VideoEntry) -> Result<Vec<ImageBuf>> {
    entry.frames.iter().map(|p| Ok(io::read_png(p)?.to_rgb())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{natural_image, segmented_still};

    fn noisy(img: &ImageBuf, amp: f32, s: u64) -> ImageBuf {
        let mut rng = seed::rng(s);
        ImageBuf::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
            img.get(y, x, c) + amp * (rng.random::<f32>() * 2.0 - 1.0)
        })
    }

    /// Bisection on noise amplitude for a target selection SSIM; SSIM falls
    /// monotonically with amplitude for a fixed noise draw.
    fn amplitude_for(img: &ImageBuf, target: f64) -> f32 {
        let (mut lo, mut hi) = (0.0f32, 1.0f32);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            let s = selection_ssim(img, &noisy(img, mid, 99)).unwrap();
            if s > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn triangle_enumeration_is_bijective() {
        for n in 2..9 {
            let mut seen = Vec::new();
            for k in 0..n * (n - 1) / 2 {
                let (i, j) = triangle_pair(n, k);
                assert!(i < j && j < n);
                seen.push((i, j));
            }
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), n * (n - 1) / 2);
        }
    }

    #[test]
    fn identical_frames_rejected() {
        let img = natural_image(48, 48, 1);
        let pairs = select_pairs(&[img.clone(), img], "v", &SelectionBand::default(), 5, 0).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn band_hits_follow_bisection_oracle() {
        let img = natural_image(64, 64, 2);
        let amp = amplitude_for(&img, 0.7);
        let near = noisy(&img, amp, 99);
        let s = selection_ssim(&img, &near).unwrap();
        assert!((s - 0.7).abs() < 0.01, "oracle missed: {s}");
        let pairs = select_pairs(&[img.clone(), near], "v", &SelectionBand::default(), 5, 3).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!((pairs[0].ssim_score - s).abs() < 1e-12);

        let far_amp = amplitude_for(&img, 0.1);
        let far = noisy(&img, far_amp, 99);
        assert!(selection_ssim(&img, &far).unwrap() < 0.3);
        assert!(select_pairs(&[img, far], "v", &SelectionBand::default(), 5, 3).unwrap().is_empty());
    }

    #[test]
    fn selection_is_seeded_and_banded() {
        let frames: Vec<ImageBuf> = (0..8)
            .map(|k| noisy(&natural_image(40, 40, 7), 0.05 * k as f32, k as u64))
            .collect();
        let band = SelectionBand::default();
        let a = select_pairs(&frames, "v", &band, 6, 11).unwrap();
        let b = select_pairs(&frames, "v", &band, 6, 11).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 6);
        for p in &a {
            assert!(band.contains(p.ssim_score));
        }
    }

    #[test]
    fn band_validation() {
        assert!(SelectionBand { t_low: 0.5, t_high: 0.5 }.validate().is_err());
        assert!(SelectionBand { t_low: -0.1, t_high: 0.5 }.validate().is_err());
        assert!(SelectionBand { t_low: 0.0, t_high: 1.0 }.validate().is_ok());
    }

    fn still_sized(size: usize, seed_value: u64) -> SegmentedStill {
        let (image, object_masks) = segmented_still(size, seed_value);
        SegmentedStill {
            id: format!("s{seed_value}"),
            image,
            object_masks,
        }
    }

    fn still(seed_value: u64) -> SegmentedStill {
        still_sized(48, seed_value)
    }

    #[test]
    fn identity_augmentation_copies_source() {
        let s = still(1);
        let p = make_pseudo_pair(&s, &AugmentConfig::identity(), 4).unwrap();
        assert_eq!(p.source, p.reference);
        assert!(p.object_mask.is_some());
        assert!(!p.origin.is_video());
    }

    #[test]
    fn strong_augmentation_changes_but_resembles() {
        let cfg = AugmentConfig::strong();
        for s in 0..100 {
            let st = still_sized(96, s % 10);
            let p = make_pseudo_pair(&st, &cfg, s).unwrap();
            let mad: f64 = p
                .source
                .data()
                .iter()
                .zip(p.reference.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / p.source.data().len() as f64;
            assert!(mad > 0.01, "seed {s}: mad {mad}");
            let sim = crate::metrics::ssim(&p.source.to_gray(), &p.reference.to_gray(), &Default::default())
                .unwrap();
            assert!(sim > 0.2, "seed {s}: ssim {sim}");
        }
    }

    #[test]
    fn empty_still_rejected() {
        let mut s = still(2);
        s.object_masks.clear();
        assert!(make_pseudo_pair(&s, &AugmentConfig::identity(), 0).is_err());
    }

    #[test]
    fn mix_extremes_and_fallback() {
        let only_v: Vec<u8> = mix_sources(std::iter::repeat(1u8), std::iter::repeat(0u8), 1.0, 5)
            .unwrap()
            .take(500)
            .collect();
        assert!(only_v.iter().all(|&v| v == 1));
        let only_p: Vec<u8> = mix_sources(std::iter::repeat(1u8), std::iter::repeat(0u8), 0.0, 5)
            .unwrap()
            .take(500)
            .collect();
        assert!(only_p.iter().all(|&v| v == 0));
        let drained: Vec<u8> = mix_sources(std::iter::repeat_n(1u8, 3), std::iter::repeat_n(0u8, 4), 0.7, 9)
            .unwrap()
            .collect();
        assert_eq!(drained.len(), 7);
        assert!(mix_sources(std::iter::empty::<u8>(), std::iter::empty(), 1.5, 0).is_err());
    }

    #[test]
    fn dataset_scan_layout() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("videos/clip_b");
        fs::create_dir_all(&v).unwrap();
        for k in [2, 10, 1] {
            io::write_png(&natural_image(16, 16, k), v.join(format!("{k:05}.png"))).unwrap();
        }
        io::write_png(&ImageBuf::filled(16, 16, 1, 0.5), v.join("00002_depth.png")).unwrap();
        fs::write(v.join("notes.txt"), "x").unwrap();
        let s = dir.path().join("stills/img0");
        fs::create_dir_all(&s).unwrap();
        let (image, masks) = segmented_still(16, 3);
        io::write_png(&image, s.join("image.png")).unwrap();
        io::write_mask_png(&masks[0], s.join("mask_0.png")).unwrap();

        let idx = scan_dataset(dir.path()).unwrap();
        assert_eq!(idx.videos.len(), 1);
        let names: Vec<String> = idx.videos[0]
            .frames
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["00001.png", "00002.png", "00010.png"]);
        assert_eq!(idx.videos[0].depth.iter().filter(|d| d.is_some()).count(), 1);
        let st = load_still(&idx.stills[0]).unwrap();
        assert_eq!(st.object_masks[0], masks[0]);
        assert!(scan_dataset(dir.path().join("missing")).unwrap().is_empty());
    }
}
