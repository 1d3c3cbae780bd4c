//! Classifier-free-guided DDIM sampling.

use serde::{Deserialize, Serialize};

use mimicforge_core::ImageBuf;

use crate::codec::{decode, encode, project_valid, Latent};
use crate::conditions::{condition, gaussian_latent, ConditionStack};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::unet::{latent_batch, Batch, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Project each clean estimate onto displayable images before the DDIM
    /// move; keeps early, noise-dominated estimates from running away.
    pub clip_x0: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 5.0,
            seed: 0,
            clip_x0: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub source: ImageBuf,
    pub mask: ImageBuf,
    pub reference: ImageBuf,
    pub depth: Option<ImageBuf>,
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    /// Decoded sample with unmasked pixels copied from the source.
    pub image: ImageBuf,
    /// Final latent before decoding.
    pub latent: Latent,
}

/// `ε_drop + s (ε_ref − ε_drop)`; `s = 0` and `s = 1` return an input unchanged.
pub fn guide(eps_drop: &[f32], eps_ref: &[f32], scale: f64) -> Vec<f32> {
    if scale == 0.0 {
        return eps_drop.to_vec();
    }
    if scale == 1.0 {
        return eps_ref.to_vec();
    }
    eps_drop
        .iter()
        .zip(eps_ref)
        .map(|(&d, &r)| (d as f64 + scale * (r as f64 - d as f64)) as f32)
        .collect()
}

/// Copies every pixel whose mask is below 0.5 from `source`.
pub fn restore_unmasked(generated: &ImageBuf, source: &ImageBuf, mask: &ImageBuf) -> Result<ImageBuf> {
    let (h, w, c) = generated.dims();
    if source.dims() != (h, w, c) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::invalid("restore: generated, source and mask differ in size"));
    }
    Ok(ImageBuf::from_fn(h, w, c, |y, x, ch| {
        if mask.get(y, x, 0) >= 0.5 {
            generated.get(y, x, ch)
        } else {
            source.get(y, x, ch)
        }
    }))
}

pub fn cfg_sample(model: &Model, schedule: &NoiseSchedule, req: &EditRequest, cfg: &SampleConfig) -> Result<EditOutput> {
    if model.trained_steps == 0 {
        return Err(Error::InvalidState(
            "model has not been trained; refusing to sample from random weights".into(),
        ));
    }
    if !(cfg.guidance_scale >= 0.0 && cfg.guidance_scale.is_finite()) {
        return Err(Error::invalid(format!("guidance scale {} must be finite and non-negative", cfg.guidance_scale)));
    }
    let source = req.source.to_rgb();
    let reference = req.reference.to_rgb();
    if (reference.height(), reference.width()) != (source.height(), source.width()) {
        return Err(Error::invalid("reference and source differ in size"));
    }
    let timesteps = schedule.ddim_timesteps(cfg.steps)?;
    let cond = condition(&source, &req.mask, req.depth.as_ref())?;
    let (h, w) = (cond.h, cond.w);
    let (dtype, dev) = (model.dtype(), model.device());

    let need_ref = cfg.guidance_scale != 0.0;
    let need_drop = cfg.guidance_scale != 1.0;
    let refs = if need_ref {
        let r = latent_batch(&[&encode(&reference)?], dtype, dev)?;
        Some(model.reference_features(&r)?)
    } else {
        None
    };

    let mut x = gaussian_latent(h, w, cfg.seed);
    let base = Batch::from_stacks(
        &[ConditionStack {
            noisy: x.clone(),
            cond,
            t: timesteps[0],
        }],
        dtype,
        dev,
    )?;
    for (i, &t) in timesteps.iter().enumerate() {
        let batch = base.with_noisy(x.to_tensor(dtype, dev)?, t);
        let predict = |r| -> Result<Vec<f32>> {
            let eps = model.forward_with(&batch, r)?;
            Ok(Latent::from_tensor(&eps, 0)?.data().to_vec())
        };
        let eps_ref = if need_ref { predict(refs.as_ref())? } else { Vec::new() };
        let eps_drop = if need_drop { predict(None)? } else { Vec::new() };
        let eps = match (need_ref, need_drop) {
            (true, true) => guide(&eps_drop, &eps_ref, cfg.guidance_scale),
            (true, false) => eps_ref,
            _ => eps_drop,
        };
        let mut x0 = Latent::new(h, w, schedule.predict_x0(x.data(), &eps, t))?;
        if cfg.clip_x0 {
            x0 = project_valid(&x0)?;
        }
        let next = schedule.ddim_from_x0(x.data(), x0.data(), t, timesteps.get(i + 1).copied());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("sampling diverged at timestep {t}")));
        }
        x = Latent::new(h, w, next)?;
    }
    let image = restore_unmasked(&decode(&x), &source, &req.mask)?;
    Ok(EditOutput { image, latent: x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use crate::unet::ModelConfig;
    use candle_core::DType;
    use mimicforge_core::synthetic::natural_image;
    use proptest::prelude::*;

    fn request() -> EditRequest {
        EditRequest {
            source: natural_image(16, 16, 1),
            mask: ImageBuf::from_fn(16, 16, 1, |y, x, _| (y >= 4 && y < 12 && x >= 8) as u8 as f32),
            reference: natural_image(16, 16, 2),
            depth: None,
        }
    }

    fn model(trained: u64) -> Model {
        let mut m = Model::new(
            ModelConfig {
                widths: [8, 16, 16],
                time_dim: 8,
            },
            DType::F32,
            9,
        )
        .unwrap();
        m.trained_steps = trained;
        m
    }

    proptest! {
        #[test]
        fn guidance_endpoints_exact(a in prop::collection::vec(-5.0f32..5.0, 1..20), seed in 0u64..1000) {
            let b: Vec<f32> = a.iter().enumerate().map(|(i, v)| v * 0.7 + (i as u64 ^ seed) as f32 * 1e-3).collect();
            prop_assert_eq!(guide(&a, &b, 0.0), a.clone());
            prop_assert_eq!(guide(&a, &b, 1.0), b.clone());
            let g = guide(&a, &b, 2.5);
            for ((d, r), v) in a.iter().zip(&b).zip(&g) {
                prop_assert!((v - (d + 2.5 * (r - d))).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn untrained_model_refuses() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let err = cfg_sample(&model(0), &s, &request(), &SampleConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn unmasked_pixels_are_source_bits() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let req = request();
        let cfg = SampleConfig {
            steps: 4,
            ..SampleConfig::default()
        };
        let out = cfg_sample(&model(1), &s, &req, &cfg).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if req.mask.get(y, x, 0) < 0.5 {
                    for c in 0..3 {
                        assert_eq!(out.image.get(y, x, c).to_bits(), req.source.get(y, x, c).to_bits());
                    }
                }
            }
        }
        let again = cfg_sample(&model(1), &s, &req, &cfg).unwrap();
        assert_eq!(out.image, again.image);
    }

    #[test]
    fn scale_one_ignores_unconditional_branch() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let m = model(1);
        let req = request();
        let one = SampleConfig {
            steps: 3,
            guidance_scale: 1.0,
            seed: 4,
            ..SampleConfig::default()
        };
        let zero = SampleConfig {
            guidance_scale: 0.0,
            ..one
        };
        let a = cfg_sample(&m, &s, &req, &one).unwrap();
        let b = cfg_sample(&m, &s, &req, &zero).unwrap();
        assert_ne!(a.latent, b.latent);
    }
}
