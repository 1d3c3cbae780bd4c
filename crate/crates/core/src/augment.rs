//! Strong photometric and geometric augmentation used to widen the gap
//! between source and reference images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{warp_perspective, BorderMode, Homography, ImageBuf};
use crate::seed;

const PROJECTIVE_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Additive brightness offset range.
    pub brightness_delta: [f32; 2],
    /// Contrast factor range, applied about the image mean.
    pub contrast_range: [f32; 2],
    /// Saturation factor range, blending each pixel with its gray value.
    pub saturation_range: [f32; 2],
    pub hflip_prob: f32,
    pub vflip_prob: f32,
    /// Maximum absolute rotation in degrees.
    pub rotation_max: f32,
    pub scale_range: [f32; 2],
    /// Maximum corner displacement as a fraction of the image side.
    pub projective_jitter: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::strong()
    }
}

impl AugmentConfig {
    pub fn strong() -> Self {
        Self {
            brightness_delta: [-0.3, 0.3],
            contrast_range: [0.6, 1.4],
            saturation_range: [0.6, 1.4],
            hflip_prob: 0.5,
            vflip_prob: 0.1,
            rotation_max: 30.0,
            scale_range: [0.7, 1.3],
            projective_jitter: 0.15,
        }
    }

    pub fn identity() -> Self {
        Self {
            brightness_delta: [0.0, 0.0],
            contrast_range: [1.0, 1.0],
            saturation_range: [1.0, 1.0],
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_max: 0.0,
            scale_range: [1.0, 1.0],
            projective_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, r) in [
            ("brightness_delta", self.brightness_delta),
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
            ("scale_range", self.scale_range),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::invalid(format!("{name} {r:?} is not an ordered range")));
            }
        }
        if self.contrast_range[0] < 0.0 || self.saturation_range[0] < 0.0 || self.scale_range[0] <= 0.0 {
            return Err(Error::invalid("contrast/saturation must be >= 0 and scale > 0"));
        }
        if !(0.0..0.5).contains(&self.projective_jitter) {
            return Err(Error::invalid(format!(
                "projective_jitter {} outside [0, 0.5)",
                self.projective_jitter
            )));
        }
        if !(self.rotation_max >= 0.0) {
            return Err(Error::invalid("rotation_max must be >= 0"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: [f32; 2]) -> f32 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Random homography that moves each image corner independently by up to
/// `jitter × side` along each axis.
pub fn sample_projective(jitter: f32, h: usize, w: usize, rng_seed: u64) -> Result<Homography> {
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::invalid(format!("jitter {jitter} outside [0, 0.5)")));
    }
    if jitter == 0.0 {
        return Ok(Homography::identity());
    }
    let (fw, fh) = ((w.max(2) - 1) as f64, (h.max(2) - 1) as f64);
    let corners = [(0.0, 0.0), (fw, 0.0), (fw, fh), (0.0, fh)];
    let mut rng = seed::rng(rng_seed);
    let (dx, dy) = (jitter as f64 * w as f64, jitter as f64 * h as f64);
    for _ in 0..PROJECTIVE_ATTEMPTS {
        let moved: [(f64, f64); 4] = std::array::from_fn(|i| {
            (
                corners[i].0 + rng.random_range(-dx..=dx),
                corners[i].1 + rng.random_range(-dy..=dy),
            )
        });
        if !is_convex(&moved) {
            continue;
        }
        if let Ok(hm) = Homography::from_four_points(corners, moved) {
            return Ok(hm);
        }
    }
    log::warn!("projective sampling degenerate after {PROJECTIVE_ATTEMPTS} attempts; using identity");
    Ok(Homography::identity())
}

/// Order-independent mean, so pixel permutations (flips) leave it bit-identical.
fn exact_mean(values: impl Iterator<Item = f32>) -> f32 {
    const SCALE: f64 = (1u64 << 40) as f64;
    let mut n = 0u64;
    let mut acc = 0u128;
    for v in values {
        acc += (v as f64 * SCALE).round() as u128;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    (acc as f64 / SCALE / n as f64) as f32
}

fn pixel_gray(px: &[f32]) -> f32 {
    (px[0] + px[1] + px[2]) / 3.0
}

/// Brightness (additive), contrast (scale about the gray mean) and saturation
/// (blend with per-pixel gray), in that order, clamping after each.
pub fn apply_color_jitter(img: &ImageBuf, cfg: &AugmentConfig, rng_seed: u64) -> Result<ImageBuf> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "color jitter needs 3 channels, got {}",
            img.channels()
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let brightness = uniform(&mut rng, cfg.brightness_delta);
    let contrast = uniform(&mut rng, cfg.contrast_range);
    let saturation = uniform(&mut rng, cfg.saturation_range);

    let mut out = if brightness != 0.0 {
        img.map(|v| v + brightness)
    } else {
        img.clone()
    };
    if contrast != 1.0 {
        let mean = exact_mean(out.data().chunks_exact(3).map(pixel_gray));
        out = out.map(|v| mean + contrast * (v - mean));
    }
    if saturation != 1.0 {
        let (h, w, _) = out.dims();
        let src = out.clone();
        out = ImageBuf::from_fn(h, w, 3, |y, x, c| {
            let px = src.pixel(y, x);
            let g = pixel_gray(px);
            g + saturation * (px[c] - g)
        });
    }
    Ok(out)
}

/// The geometric part of an augmentation, mapping input to output pixels.
pub fn sample_geometry(cfg: &AugmentConfig, h: usize, w: usize, rng_seed: u64) -> Result<Homography> {
    let mut rng = seed::rng(rng_seed);
    let angle = if cfg.rotation_max > 0.0 {
        rng.random_range(-cfg.rotation_max..=cfg.rotation_max).to_radians() as f64
    } else {
        0.0
    };
    let scale = uniform(&mut rng, cfg.scale_range) as f64;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let sim = Homography::similarity_about(cx, cy, angle, scale);
    let proj = sample_projective(cfg.projective_jitter, h, w, seed::derive(rng_seed, 1))?;
    proj.compose(&sim)
}

/// Color jitter → flips → rotation/scale → projective warp, all seeded.
/// Rotation, scale and projective parts are composed into a single warp.
pub fn apply_full_augmentation(img: &ImageBuf, cfg: &AugmentConfig, rng_seed: u64) -> Result<ImageBuf> {
    cfg.validate()?;
    let jittered = apply_color_jitter(img, cfg, seed::derive(rng_seed, seed::tag("color")))?;
    let mut rng = seed::rng(seed::derive(rng_seed, seed::tag("flip")));
    let hflip = rng.random::<f32>() < cfg.hflip_prob;
    let vflip = rng.random::<f32>() < cfg.vflip_prob;
    let mut out = jittered;
    if hflip {
        out = out.flip_horizontal();
    }
    if vflip {
        out = out.flip_vertical();
    }
    let (h, w, _) = out.dims();
    let geom = sample_geometry(cfg, h, w, seed::derive(rng_seed, seed::tag("geometry")))?;
    if geom != Homography::identity() {
        out = warp_perspective(&out, &geom, h, w, BorderMode::Zero)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ssim, SsimParams};
    use crate::synthetic;
    use proptest::prelude::*;

    #[test]
    fn zero_jitter_is_identity() {
        assert_eq!(sample_projective(0.0, 32, 32, 5).unwrap(), Homography::identity());
    }

    #[test]
    fn jitter_out_of_range_rejected() {
        assert!(sample_projective(0.5, 32, 32, 5).is_err());
    }

    #[test]
    fn known_offsets_recovered_by_dlt() {
        let corners = [(0.0, 0.0), (63.0, 0.0), (63.0, 47.0), (0.0, 47.0)];
        let offsets = [(3.0, -2.0), (-4.5, 1.0), (2.0, 5.5), (-1.0, -3.0)];
        let target: [(f64, f64); 4] =
            std::array::from_fn(|i| (corners[i].0 + offsets[i].0, corners[i].1 + offsets[i].1));
        let h = Homography::from_four_points(corners, target).unwrap();
        for (c, t) in corners.iter().zip(target.iter()) {
            let (u, v) = h.apply(c.0, c.1).unwrap();
            assert!((u - t.0).abs() < 1e-6 && (v - t.1).abs() < 1e-6);
        }
    }

    #[test]
    fn sampled_homographies_invertible() {
        for s in 0..1000 {
            let h = sample_projective(0.2, 64, 64, s).unwrap();
            assert!(h.determinant().abs() > 1e-9, "seed {s}");
            assert!(h.invert().is_ok());
        }
    }

    #[test]
    fn identity_jitter_is_noop() {
        let img = synthetic::natural_image(24, 24, 3);
        assert_eq!(apply_color_jitter(&img, &AugmentConfig::identity(), 1).unwrap(), img);
    }

    #[test]
    fn brightness_example() {
        let img = ImageBuf::filled(4, 4, 3, 0.5);
        let cfg = AugmentConfig {
            brightness_delta: [0.1, 0.1],
            ..AugmentConfig::identity()
        };
        let out = apply_color_jitter(&img, &cfg, 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn contrast_example() {
        let img = ImageBuf::from_fn(2, 2, 3, |y, _, _| if y == 0 { 0.4 } else { 0.6 });
        let cfg = AugmentConfig {
            contrast_range: [2.0, 2.0],
            ..AugmentConfig::identity()
        };
        let out = apply_color_jitter(&img, &cfg, 0).unwrap();
        for x in 0..2 {
            assert!((out.get(0, x, 0) - 0.3).abs() < 1e-6);
            assert!((out.get(1, x, 0) - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn jitter_needs_rgb() {
        let img = ImageBuf::filled(4, 4, 1, 0.5);
        assert!(apply_color_jitter(&img, &AugmentConfig::strong(), 0).is_err());
    }

    #[test]
    fn identity_full_augmentation() {
        let img = synthetic::natural_image(32, 32, 9);
        assert_eq!(apply_full_augmentation(&img, &AugmentConfig::identity(), 4).unwrap(), img);
    }

    #[test]
    fn hflip_only_is_mirror() {
        let img = synthetic::natural_image(20, 28, 2);
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        assert_eq!(apply_full_augmentation(&img, &cfg, 11).unwrap(), img.flip_horizontal());
    }

    #[test]
    fn strong_preset_is_nontrivial() {
        let img = synthetic::natural_image(64, 64, 5);
        for s in 0..5 {
            let out = apply_full_augmentation(&img, &AugmentConfig::strong(), s).unwrap();
            assert!(ssim(&img, &out, &SsimParams::default()).unwrap() < 0.95);
        }
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = AugmentConfig {
            hflip_prob: 1.5,
            ..AugmentConfig::identity()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            scale_range: [1.2, 0.8],
            ..AugmentConfig::identity()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn seeded_and_shape_preserving(s in any::<u64>(), h in 8usize..24, w in 8usize..24) {
            let img = synthetic::natural_image(h, w, 1);
            let a = apply_full_augmentation(&img, &AugmentConfig::strong(), s).unwrap();
            let b = apply_full_augmentation(&img, &AugmentConfig::strong(), s).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.dims(), img.dims());
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn jitter_commutes_with_hflip(s in any::<u64>()) {
            let img = synthetic::natural_image(16, 20, 7);
            let cfg = AugmentConfig::strong();
            let a = apply_color_jitter(&img.flip_horizontal(), &cfg, s).unwrap();
            let b = apply_color_jitter(&img, &cfg, s).unwrap().flip_horizontal();
            prop_assert_eq!(a, b);
        }
    }
}
