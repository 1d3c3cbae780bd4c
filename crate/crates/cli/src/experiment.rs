//! Learning-signal experiment: train the toy model on synthetic moving-shape
//! clips, then compare masked-region reconstruction with and without the
//! reference on held-out pairs.
//!
//! Errors are measured in codec space: the target is the source passed
//! through the patch codec, which is the best the latent model can produce.

use std::time::Instant;

use anyhow::{ensure, Context, Result};
use candle_core::DType;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mimicforge_core::augment::AugmentConfig;
use mimicforge_core::masker::{grid_mask, MaskPolicy};
use mimicforge_core::matcher::{match_images, KeypointMatchSet, SiftParams};
use mimicforge_core::sampler::{select_pairs, Origin, SelectionBand};
use mimicforge_core::synthetic::{moving_shapes_video, VideoSpec};
use mimicforge_core::{seed, ImageBuf};
use mimicforge_diffcore::codec::{decode, encode, PATCH};
use mimicforge_diffcore::conditions::{TrainConfig, TrainingSample};
use mimicforge_diffcore::sample::{cfg_sample, EditRequest, SampleConfig};
use mimicforge_diffcore::schedule::{NoiseSchedule, ScheduleConfig};
use mimicforge_diffcore::train::Trainer;
use mimicforge_diffcore::unet::{Model, ModelConfig};

use crate::pipeline::{augment_pair, batch_indices, item_seed};

pub const RATIO_TEST: f32 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    pub train_videos: usize,
    pub held_out_pairs: usize,
    pub size: usize,
    pub frames: usize,
    pub pairs_per_video: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub sample_steps: usize,
    /// Sampling seeds averaged per held-out pair.
    pub eval_seeds: usize,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            train_videos: 200,
            held_out_pairs: 50,
            size: 32,
            frames: 12,
            pairs_per_video: 6,
            steps: 5000,
            batch: 16,
            lr: 1e-3,
            sample_steps: 20,
            eval_seeds: 2,
            model: signal_model(),
            augment: mild_augment(),
            seed: 0,
        }
    }
}

/// Half the default widths: a 32 px clip is a 4×4 latent, and the smaller
/// trunk keeps 5000 steps inside half an hour on one core.
pub fn signal_model() -> ModelConfig {
    ModelConfig {
        widths: [16, 32, 64],
        time_dim: 16,
    }
}

/// Small perturbations: enough to stop pixel-exact copying shortcuts
/// without drowning a 32 px clip.
pub fn mild_augment() -> AugmentConfig {
    AugmentConfig {
        brightness_delta: [-0.05, 0.05],
        contrast_range: [0.9, 1.1],
        saturation_range: [0.9, 1.1],
        hflip_prob: 0.0,
        vflip_prob: 0.0,
        rotation_max: 4.0,
        scale_range: [0.96, 1.04],
        projective_jitter: 0.02,
    }
}

#[derive(Debug, Clone)]
pub struct ClipPair {
    pub source: ImageBuf,
    pub reference: ImageBuf,
    pub depth: ImageBuf,
    pub matches: KeypointMatchSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalReport {
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    /// Nearest-patch copy from the reference (solvability check).
    pub oracle_copy_mse: f64,
    /// Context-mean fill without the reference.
    pub oracle_context_mse: f64,
    pub mse_with_reference: f64,
    pub mse_reference_dropped: f64,
    /// Same comparison against raw source pixels.
    pub raw_mse_with_reference: f64,
    pub raw_mse_reference_dropped: f64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

impl SignalReport {
    /// Fractional MSE reduction from providing the reference.
    pub fn reduction(&self) -> f64 {
        1.0 - self.mse_with_reference / self.mse_reference_dropped
    }

    pub fn oracle_reduction(&self) -> f64 {
        1.0 - self.oracle_copy_mse / self.oracle_context_mse
    }
}

fn band() -> SelectionBand {
    SelectionBand::default()
}

/// Pairs from `videos` clips whose seeds come from `stream`.
pub fn clip_pairs(cfg: &SignalConfig, stream: &str, videos: usize, per_video: usize) -> Result<Vec<ClipPair>> {
    let spec = VideoSpec {
        size: cfg.size,
        frames: cfg.frames,
        ..VideoSpec::default()
    };
    let base = seed::derive(cfg.seed, seed::tag(stream));
    let per: Vec<Vec<ClipPair>> = (0..videos)
        .into_par_iter()
        .map(|v| -> Result<Vec<ClipPair>> {
            let clip = moving_shapes_video(&spec, seed::derive(base, v as u64));
            let id = format!("{stream}{v:04}");
            let pairs = select_pairs(&clip.frames, &id, &band(), per_video, seed::derive(base, !(v as u64)))?;
            pairs
                .into_iter()
                .map(|p| {
                    let Origin::Video { idx_a, .. } = p.origin else {
                        unreachable!("select_pairs yields video pairs")
                    };
                    let matches = match_images(&p.source, &p.reference, &SiftParams::default(), RATIO_TEST)?;
                    Ok(ClipPair {
                        depth: clip.depth[idx_a].clone(),
                        source: p.source,
                        reference: p.reference,
                        matches,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn masked_mse(a: &ImageBuf, b: &ImageBuf, mask: &ImageBuf) -> f64 {
    let (h, w, c) = a.dims();
    let (mut acc, mut n) = (0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x, 0) >= 0.5 {
                for ch in 0..c {
                    acc += (a.get(y, x, ch) as f64 - b.get(y, x, ch) as f64).powi(2);
                }
                n += c;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

pub fn codec_round_trip(img: &ImageBuf) -> Result<ImageBuf> {
    Ok(decode(&encode(&img.to_rgb())?))
}

/// Fills every masked `PATCH × PATCH` block by brute-force search over the
/// reference for the window whose pixels best match the block's unmasked
/// surroundings. Returns `(copy_fill, context_mean_fill)`.
pub fn nearest_patch_oracle(source: &ImageBuf, reference: &ImageBuf, mask: &ImageBuf) -> (ImageBuf, ImageBuf) {
    const CONTEXT: isize = 4;
    const SEARCH: isize = 10;
    let (h, w, c) = source.dims();
    let (hi, wi) = (h as isize, w as isize);
    let known = |y: isize, x: isize| mask.get(y as usize, x as usize, 0) < 0.5;
    let mut copy = source.clone();
    let mut context = source.clone();
    for by in (0..h).step_by(PATCH) {
        for bx in (0..w).step_by(PATCH) {
            let block: Vec<(isize, isize)> = (by..(by + PATCH).min(h))
                .flat_map(|y| (bx..(bx + PATCH).min(w)).map(move |x| (y as isize, x as isize)))
                .filter(|&(y, x)| !known(y, x))
                .collect();
            if block.is_empty() {
                continue;
            }
            let (y0, x0) = ((by as isize - CONTEXT).max(0), (bx as isize - CONTEXT).max(0));
            let (y1, x1) = (
                (by as isize + PATCH as isize + CONTEXT).min(hi),
                (bx as isize + PATCH as isize + CONTEXT).min(wi),
            );
            let ring: Vec<(isize, isize)> = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                .filter(|&(y, x)| known(y, x))
                .collect();
            // No visible context: fall back to all visible pixels.
            let ring = if ring.is_empty() {
                (0..hi)
                    .flat_map(|y| (0..wi).map(move |x| (y, x)))
                    .filter(|&(y, x)| known(y, x))
                    .collect()
            } else {
                ring
            };
            let mean: Vec<f32> = (0..c)
                .map(|ch| {
                    let s: f64 = ring.iter().map(|&(y, x)| source.get(y as usize, x as usize, ch) as f64).sum();
                    (s / ring.len().max(1) as f64) as f32
                })
                .collect();
            let mut best = (f64::INFINITY, 0isize, 0isize);
            for dy in -SEARCH..=SEARCH {
                for dx in -SEARCH..=SEARCH {
                    let inside = |y: isize, x: isize| (0..hi).contains(&(y + dy)) && (0..wi).contains(&(x + dx));
                    if !block.iter().all(|&(y, x)| inside(y, x)) {
                        continue;
                    }
                    let (mut cost, mut n) = (0.0f64, 0usize);
                    for &(y, x) in &ring {
                        if !inside(y, x) {
                            continue;
                        }
                        for ch in 0..c {
                            let d = source.get(y as usize, x as usize, ch) - reference.get((y + dy) as usize, (x + dx) as usize, ch);
                            cost += (d as f64).powi(2);
                        }
                        n += 1;
                    }
                    if n * 2 < ring.len() {
                        continue;
                    }
                    let cost = cost / n as f64;
                    if cost < best.0 {
                        best = (cost, dy, dx);
                    }
                }
            }
            for &(y, x) in &block {
                for ch in 0..c {
                    let (u, v) = (y as usize, x as usize);
                    context.set(u, v, ch, mean[ch]);
                    let fill = if best.0.is_finite() {
                        reference.get((y + best.1) as usize, (x + best.2) as usize, ch)
                    } else {
                        mean[ch]
                    };
                    copy.set(u, v, ch, fill);
                }
            }
        }
    }
    (copy, context)
}

pub struct HeldOut {
    pub pair: ClipPair,
    pub mask: ImageBuf,
}

pub fn held_out(cfg: &SignalConfig) -> Result<Vec<HeldOut>> {
    let policy = MaskPolicy::default();
    // Over-provision clips; some yield no in-band pair.
    let mut pairs = clip_pairs(cfg, "held-out", cfg.held_out_pairs * 2, 1)?;
    ensure!(
        pairs.len() >= cfg.held_out_pairs,
        "only {} held-out pairs available, need {}",
        pairs.len(),
        cfg.held_out_pairs
    );
    pairs.truncate(cfg.held_out_pairs);
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, pair)| {
            let g = grid_mask(cfg.size, cfg.size, &pair.matches, &policy, seed::derive(cfg.seed ^ 0x5eed, i as u64))?;
            Ok(HeldOut { pair, mask: g.rendered })
        })
        .collect()
}

/// Trains the toy model on `train`; returns it with the per-step losses.
/// `progress` receives `(step, mean loss)` every 100 steps.
pub fn train_signal_model(cfg: &SignalConfig, train: &[ClipPair], mut progress: impl FnMut(u64, f64)) -> Result<(Model, Vec<f64>)> {
    ensure!(cfg.steps > 0, "steps must be positive");
    ensure!(!train.is_empty(), "no training pairs in band");
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default())?;
    let model = Model::new(cfg.model, DType::F32, seed::derive(cfg.seed, seed::tag("model")))?;
    let tcfg = TrainConfig {
        lr: cfg.lr,
        batch: cfg.batch,
        steps: cfg.steps,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, tcfg, schedule)?;
    let policy = MaskPolicy::default();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch, cfg.seed, step);
        let samples: Vec<TrainingSample> = idx
            .par_iter()
            .enumerate()
            .map(|(i, &k)| -> Result<TrainingSample> {
                let p = &train[k];
                let s = item_seed(cfg.seed, step, i);
                let mask = grid_mask(cfg.size, cfg.size, &p.matches, &policy, seed::derive(s, 0))?.rendered;
                let (source, reference) = augment_pair(&p.source, &p.reference, &cfg.augment, s)?;
                Ok(TrainingSample {
                    source,
                    mask,
                    reference,
                    depth: Some(p.depth.clone()),
                })
            })
            .collect::<Result<_>>()?;
        let report = trainer.train_step(&samples).with_context(|| format!("training step {step}"))?;
        losses.push(report.loss);
        if (step + 1) % 100 == 0 {
            let tail = &losses[losses.len().saturating_sub(100)..];
            progress(step + 1, tail.iter().sum::<f64>() / tail.len() as f64);
        }
    }
    Ok((trainer.model, losses))
}

/// Mean masked MSE over `eval` as `[with_ref, dropped, raw_with_ref, raw_dropped]`:
/// guidance 1 keeps only the reference branch, guidance 0 only the dropped one.
pub fn evaluate_signal(cfg: &SignalConfig, model: &Model, eval: &[HeldOut]) -> Result<[f64; 4]> {
    ensure!(cfg.eval_seeds > 0 && !eval.is_empty(), "nothing to evaluate");
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default())?;
    let results: Vec<[f64; 4]> = eval
        .par_iter()
        .enumerate()
        .map(|(i, h)| -> Result<[f64; 4]> {
            let target = codec_round_trip(&h.pair.source)?;
            let req = EditRequest {
                source: h.pair.source.clone(),
                mask: h.mask.clone(),
                reference: h.pair.reference.clone(),
                depth: Some(h.pair.depth.clone()),
            };
            let mut acc = [0.0; 4];
            for k in 0..cfg.eval_seeds {
                let s = seed::derive(seed::derive(cfg.seed, seed::tag("eval")), (i * 131 + k) as u64);
                for (slot, scale) in [(0, 1.0), (1, 0.0)] {
                    let sc = SampleConfig {
                        steps: cfg.sample_steps,
                        guidance_scale: scale,
                        seed: s,
                        ..SampleConfig::default()
                    };
                    let out = cfg_sample(model, &schedule, &req, &sc)?;
                    acc[slot] += masked_mse(&out.image, &target, &h.mask);
                    acc[slot + 2] += masked_mse(&out.image, &h.pair.source, &h.mask);
                }
            }
            Ok(acc.map(|v| v / cfg.eval_seeds as f64))
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    Ok(std::array::from_fn(|k| results.iter().map(|r| r[k]).sum::<f64>() / n))
}

/// Oracle masked MSE over `eval` as `(nearest_patch_copy, context_mean)`.
pub fn oracle_signal(eval: &[HeldOut]) -> Result<(f64, f64)> {
    let (mut copy_mse, mut context_mse) = (0.0, 0.0);
    for h in eval {
        let target = codec_round_trip(&h.pair.source)?;
        let (copy, ctx) = nearest_patch_oracle(&h.pair.source, &h.pair.reference, &h.mask);
        copy_mse += masked_mse(&codec_round_trip(&copy)?, &target, &h.mask);
        context_mse += masked_mse(&codec_round_trip(&ctx)?, &target, &h.mask);
    }
    let n = eval.len().max(1) as f64;
    Ok((copy_mse / n, context_mse / n))
}

/// Runs training plus evaluation. `progress` receives `(step, loss)` every 100 steps.
pub fn run_signal(cfg: &SignalConfig, progress: impl FnMut(u64, f64)) -> Result<SignalReport> {
    let started = Instant::now();
    let train = clip_pairs(cfg, "train", cfg.train_videos, cfg.pairs_per_video)?;
    let eval = held_out(cfg)?;
    let (oracle_copy_mse, oracle_context_mse) = oracle_signal(&eval)?;
    let (model, losses) = train_signal_model(cfg, &train, progress)?;
    let m = evaluate_signal(cfg, &model, &eval)?;
    let window = losses.len().min(100);
    Ok(SignalReport {
        train_pairs: train.len(),
        held_out_pairs: eval.len(),
        oracle_copy_mse,
        oracle_context_mse,
        mse_with_reference: m[0],
        mse_reference_dropped: m[1],
        raw_mse_with_reference: m[2],
        raw_mse_reference_dropped: m[3],
        first_loss: losses[..window].iter().sum::<f64>() / window as f64,
        final_loss: losses[losses.len() - window..].iter().sum::<f64>() / window as f64,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mimicforge_core::synthetic::natural_image;

    #[test]
    fn oracle_recovers_a_pure_shift() {
        let big = natural_image(40, 40, 5);
        let source = big.crop(4, 7, 32, 32).unwrap();
        let reference = big.crop(1, 4, 32, 32).unwrap();
        let mask = ImageBuf::from_fn(32, 32, 1, |y, x, _| (8..16).contains(&y) as u8 as f32 * (16..24).contains(&x) as u8 as f32);
        let (copy, context) = nearest_patch_oracle(&source, &reference, &mask);
        assert_eq!(masked_mse(&copy, &source, &mask), 0.0);
        assert!(masked_mse(&context, &source, &mask) > 0.0);
        // unmasked pixels untouched
        assert_eq!(masked_mse(&copy, &source, &ImageBuf::filled(32, 32, 1, 1.0)), 0.0);
    }
}
