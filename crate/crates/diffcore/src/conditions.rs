//! Host-side condition stacks: noised latent, latent-grid mask, background
//! latent of the masked source, and pooled depth.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use mimicforge_core::imgcore::resize_nearest;
use mimicforge_core::masker::apply_mask;
use mimicforge_core::{seed, ImageBuf};

use crate::codec::{encode, Latent, LATENT_CHANNELS, PATCH};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Channels seen by the imitative U-Net: noisy | mask | background | depth.
pub const INPUT_CHANNELS: usize = LATENT_CHANNELS + 1 + LATENT_CHANNELS + LATENT_CHANNELS;
pub const DEPTH_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub ref_dropout_prob: f64,
    pub depth_dropout_prob: f64,
    pub guidance_scale: f64,
    pub steps: u64,
    pub seed: u64,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 4,
            ref_dropout_prob: 0.1,
            depth_dropout_prob: 0.5,
            guidance_scale: 5.0,
            steps: 1000,
            seed: 0,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("ref_dropout_prob", self.ref_dropout_prob), ("depth_dropout_prob", self.depth_dropout_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr = {} must be positive", self.lr)));
        }
        if self.batch == 0 || self.log_interval == 0 {
            return Err(Error::invalid("batch and log_interval must be positive"));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::invalid("guidance_scale must be non-negative"));
        }
        Ok(())
    }
}

/// One training example: masked source, its reference frame, optional depth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub source: ImageBuf,
    pub mask: ImageBuf,
    pub reference: ImageBuf,
    pub depth: Option<ImageBuf>,
}

/// Static (timestep-independent) conditions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub h: usize,
    pub w: usize,
    /// Latent-grid binary mask, `h × w`.
    pub mask: Vec<f32>,
    pub background: Latent,
    /// Depth averaged over 8×8 tiles, `3 × h × w`; `None` once dropped.
    pub depth: Option<Vec<f32>>,
}

impl Conditioning {
    pub fn depth_dropped(&self) -> bool {
        self.depth.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStack {
    pub noisy: Latent,
    pub cond: Conditioning,
    pub t: usize,
}

/// Averages each 8×8 tile; 1-channel depth is replicated to 3.
///
/// The trainable projector is a per-pixel affine map, which commutes with
/// tile averaging, so projecting pooled depth equals pooling projected depth.
pub fn pool_depth(depth: &ImageBuf) -> Result<Vec<f32>> {
    let (h, w, _) = depth.dims();
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::invalid(format!("depth {h}x{w} is not a multiple of {PATCH}")));
    }
    let d = depth.to_rgb();
    let (lh, lw) = (h / PATCH, w / PATCH);
    let mut out = vec![0.0f32; DEPTH_CHANNELS * lh * lw];
    for c in 0..DEPTH_CHANNELS {
        for ly in 0..lh {
            for lx in 0..lw {
                let mut acc = 0.0f64;
                for py in 0..PATCH {
                    for px in 0..PATCH {
                        acc += d.get(ly * PATCH + py, lx * PATCH + px, c) as f64;
                    }
                }
                out[(c * lh + ly) * lw + lx] = (acc / (PATCH * PATCH) as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Deterministic conditions; `depth = None` means the depth slot is zeroed.
pub fn condition(source: &ImageBuf, mask: &ImageBuf, depth: Option<&ImageBuf>) -> Result<Conditioning> {
    let (h, w) = (source.height(), source.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match source {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if let Some(d) = depth {
        if (d.height(), d.width()) != (h, w) {
            return Err(Error::invalid(format!(
                "depth {}x{} does not match source {h}x{w}",
                d.height(),
                d.width()
            )));
        }
    }
    let source = source.to_rgb();
    let background = encode(&apply_mask(&source, mask)?)?;
    let (lh, lw) = (background.height(), background.width());
    let mask_grid = resize_nearest(mask, lh, lw)?.into_data();
    Ok(Conditioning {
        h: lh,
        w: lw,
        mask: mask_grid,
        background,
        depth: depth.map(pool_depth).transpose()?,
    })
}

pub fn gaussian_latent(h: usize, w: usize, rng_seed: u64) -> Latent {
    let mut rng = seed::rng(rng_seed);
    let data = (0..LATENT_CHANNELS * h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Latent::new(h, w, data).expect("finite gaussian draws")
}

/// Builds the training stack at step `t` and returns it with its noise target.
/// Depth is dropped with `depth_dropout_prob` (always, if absent).
pub fn assemble_conditions(
    sample: &TrainingSample,
    t: usize,
    rng_seed: u64,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(ConditionStack, Latent)> {
    if t >= schedule.len() {
        return Err(Error::invalid(format!("timestep {t} outside schedule of {}", schedule.len())));
    }
    let mut rng = seed::rng(rng_seed);
    let drop_depth = rng.random::<f64>() < cfg.depth_dropout_prob;
    let depth = if drop_depth { None } else { sample.depth.as_ref() };
    let cond = condition(&sample.source, &sample.mask, depth)?;
    let clean = encode(&sample.source.to_rgb())?;
    let noise = gaussian_latent(cond.h, cond.w, rng.random());
    let noisy = Latent::new(cond.h, cond.w, schedule.add_noise(clean.data(), noise.data(), t))?;
    Ok((ConditionStack { noisy, cond, t }, noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use mimicforge_core::synthetic::natural_image;

    fn sample(h: usize, w: usize, with_depth: bool) -> TrainingSample {
        TrainingSample {
            source: natural_image(h, w, 1),
            mask: ImageBuf::from_fn(h, w, 1, |y, _, _| (y < h / 2) as u8 as f32),
            reference: natural_image(h, w, 2),
            depth: with_depth.then(|| ImageBuf::from_fn(h, w, 1, |y, x, _| ((y + x) % 5) as f32 / 4.0)),
        }
    }

    #[test]
    fn absent_depth_is_dropped() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let cfg = TrainConfig {
            depth_dropout_prob: 0.0,
            ..TrainConfig::default()
        };
        let (stack, _) = assemble_conditions(&sample(16, 24, false), 5, 0, &cfg, &s).unwrap();
        assert!(stack.cond.depth_dropped());
        let (stack, _) = assemble_conditions(&sample(16, 24, true), 5, 0, &cfg, &s).unwrap();
        assert!(!stack.cond.depth_dropped());
    }

    #[test]
    fn zero_mask_low_noise_matches_clean() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let mut smp = sample(16, 16, false);
        smp.mask = ImageBuf::filled(16, 16, 1, 0.0);
        let (stack, noise) = assemble_conditions(&smp, 0, 3, &TrainConfig::default(), &s).unwrap();
        let clean = encode(&smp.source).unwrap();
        assert_eq!(stack.cond.background, clean);
        for ((a, b), e) in stack.noisy.data().iter().zip(clean.data()).zip(noise.data()) {
            assert!((a - b).abs() <= 0.0101 * e.abs() + 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn pooled_depth_tile_mean() {
        let d = ImageBuf::from_fn(8, 16, 1, |y, x, _| if x < 8 { (y * 8 + x) as f32 / 63.0 } else { 0.25 });
        let p = pool_depth(&d).unwrap();
        assert_eq!(p.len(), 3 * 2);
        let tile0 = (0..64).sum::<usize>() as f32 / 63.0 / 64.0;
        assert!((p[0] - tile0).abs() < 1e-6);
        assert_eq!(p[1], 0.25);
        assert_eq!(p[2], p[0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut smp = sample(16, 16, true);
        smp.mask = ImageBuf::filled(8, 16, 1, 0.0);
        assert!(condition(&smp.source, &smp.mask, None).is_err());
        let smp = sample(16, 16, true);
        let depth = ImageBuf::filled(16, 8, 1, 0.0);
        assert!(condition(&smp.source, &smp.mask, Some(&depth)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { ref_dropout_prob: 1.5, ..TrainConfig::default() }.validate().is_err());
    }
}
