//! Imitative and reference U-Nets.
//!
//! Three resolutions (widths `w0, w1, w2`). The reference U-Net sees the clean
//! reference latent at t = 0 and exposes the features entering its bottleneck
//! and decoder attention stages. The imitative U-Net consumes them there as
//! extra keys/values, and a pooled bottleneck vector joins its time embedding.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{Latent, LATENT_CHANNELS};
use crate::conditions::{ConditionStack, DEPTH_CHANNELS, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{timestep_features, AttnBlock, Conv2d, GroupNorm, Linear, ParamStore, ResBlock, GROUPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub widths: [usize; 3],
    /// Sinusoidal timestep feature size.
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128],
            time_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn temb_dim(&self) -> usize {
        4 * self.widths[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|w| *w == 0 || w % GROUPS != 0) {
            return Err(Error::invalid(format!("widths {:?} must be positive multiples of {GROUPS}", self.widths)));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time_dim must be even and at least 2"));
        }
        Ok(())
    }
}

/// Per-pixel identity map on the three depth channels; the fourth output is 0.
const DEPTH_IDENTITY: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

#[derive(Debug, Clone)]
struct TimeMlp {
    l1: Linear,
    l2: Linear,
    dim: usize,
}

impl TimeMlp {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(ps, &format!("{name}.l1"), cfg.time_dim, cfg.temb_dim())?,
            l2: Linear::new(ps, &format!("{name}.l2"), cfg.temb_dim(), cfg.temb_dim())?,
            dim: cfg.time_dim,
        })
    }

    fn forward(&self, ts: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        let f = timestep_features(ts, self.dim, dtype, device)?;
        self.l2.forward(&self.l1.forward(&f)?.silu()?)
    }
}

/// Reference features at the three injection stages.
#[derive(Debug, Clone)]
pub struct RefFeatures {
    pub mid: Tensor,
    pub up1: Tensor,
    pub up0: Tensor,
}

impl RefFeatures {
    /// Spatial mean of the bottleneck features, `(B, w2)`.
    fn pooled(&self) -> Result<Tensor> {
        Ok(self.mid.mean((2, 3))?)
    }
}

#[derive(Debug, Clone)]
struct Trunk {
    time: TimeMlp,
    conv_in: Conv2d,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    up1: ResBlock,
    up1_attn: AttnBlock,
    up0: ResBlock,
    /// Imitative only: last attention stage and output head.
    head: Option<(AttnBlock, GroupNorm, Conv2d)>,
}

fn upsample_to(x: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = like.dims4()?;
    let (_, _, xh, xw) = x.dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    Ok(x.upsample_nearest2d(h, w)?)
}

impl Trunk {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, in_ch: usize, imitative: bool) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths;
        let td = cfg.temb_dim();
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            time: TimeMlp::new(ps, &n("time"), cfg)?,
            conv_in: Conv2d::new(ps, &n("conv_in"), in_ch, w0, 3, 1)?,
            enc0: ResBlock::new(ps, &n("enc0"), w0, w0, td)?,
            down0: Conv2d::new(ps, &n("down0"), w0, w1, 3, 2)?,
            enc1: ResBlock::new(ps, &n("enc1"), w1, w1, td)?,
            down1: Conv2d::new(ps, &n("down1"), w1, w2, 3, 2)?,
            mid1: ResBlock::new(ps, &n("mid1"), w2, w2, td)?,
            mid_attn: AttnBlock::new(ps, &n("mid_attn"), w2, imitative)?,
            mid2: ResBlock::new(ps, &n("mid2"), w2, w2, td)?,
            up1: ResBlock::new(ps, &n("up1"), w2 + w1, w1, td)?,
            up1_attn: AttnBlock::new(ps, &n("up1_attn"), w1, imitative)?,
            up0: ResBlock::new(ps, &n("up0"), w1 + w0, w0, td)?,
            head: if imitative {
                Some((
                    AttnBlock::new(ps, &n("up0_attn"), w0, true)?,
                    GroupNorm::new(ps, &n("out_norm"), w0)?,
                    Conv2d::new(ps, &n("out"), w0, LATENT_CHANNELS, 3, 1)?,
                ))
            } else {
                None
            },
        })
    }

    /// Runs the shared body. `taps` receives the features entering each
    /// injection stage; `refs` supplies reference features to inject.
    fn run(&self, x: &Tensor, temb: &Tensor, refs: Option<&RefFeatures>, taps: &mut Vec<Tensor>) -> Result<Tensor> {
        let h0 = self.enc0.forward(&self.conv_in.forward(x)?, temb)?;
        let h1 = self.enc1.forward(&self.down0.forward(&h0)?, temb)?;
        let m = self.mid1.forward(&self.down1.forward(&h1)?, temb)?;
        taps.push(m.clone());
        let m = self.mid_attn.forward(&m, refs.map(|r| &r.mid))?;
        let m = self.mid2.forward(&m, temb)?;
        let u1 = Tensor::cat(&[&upsample_to(&m, &h1)?, &h1], 1)?;
        let u1 = self.up1.forward(&u1, temb)?;
        taps.push(u1.clone());
        let u1 = self.up1_attn.forward(&u1, refs.map(|r| &r.up1))?;
        let u0 = Tensor::cat(&[&upsample_to(&u1, &h0)?, &h0], 1)?;
        let u0 = self.up0.forward(&u0, temb)?;
        taps.push(u0.clone());
        Ok(u0)
    }
}

/// Batched condition tensors, all on the latent grid.
#[derive(Debug, Clone)]
pub struct Batch {
    pub noisy: Tensor,
    pub mask: Tensor,
    pub background: Tensor,
    pub depth: Tensor,
    /// `(B, 1, 1, 1)`: 1 where depth is used, 0 where dropped.
    pub depth_keep: Tensor,
    pub t: Vec<usize>,
}

impl Batch {
    pub fn from_stacks(stacks: &[ConditionStack], dtype: DType, device: &Device) -> Result<Self> {
        let first = stacks.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (h, w) = (first.cond.h, first.cond.w);
        let b = stacks.len();
        let mut noisy = Vec::with_capacity(b * 4 * h * w);
        let mut mask = Vec::with_capacity(b * h * w);
        let mut background = Vec::with_capacity(b * 4 * h * w);
        let mut depth = Vec::with_capacity(b * DEPTH_CHANNELS * h * w);
        let mut keep = Vec::with_capacity(b);
        for s in stacks {
            if (s.cond.h, s.cond.w) != (h, w) || (s.noisy.height(), s.noisy.width()) != (h, w) {
                return Err(Error::invalid("batch entries differ in latent size"));
            }
            noisy.extend_from_slice(s.noisy.data());
            mask.extend_from_slice(&s.cond.mask);
            background.extend_from_slice(s.cond.background.data());
            match &s.cond.depth {
                Some(d) => {
                    depth.extend_from_slice(d);
                    keep.push(1.0f32);
                }
                None => {
                    depth.extend(std::iter::repeat_n(0.0f32, DEPTH_CHANNELS * h * w));
                    keep.push(0.0);
                }
            }
        }
        let t = |v: Vec<f32>, c: usize, hh: usize, ww: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, c, hh, ww), device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            noisy: t(noisy, LATENT_CHANNELS, h, w)?,
            mask: t(mask, 1, h, w)?,
            background: t(background, LATENT_CHANNELS, h, w)?,
            depth: t(depth, DEPTH_CHANNELS, h, w)?,
            depth_keep: t(keep, 1, 1, 1)?,
            t: stacks.iter().map(|s| s.t).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Same conditions with a new noisy latent and timestep (used while sampling).
    pub fn with_noisy(&self, noisy: Tensor, t: usize) -> Self {
        Self {
            noisy,
            t: vec![t; self.len()],
            ..self.clone()
        }
    }
}

/// Stacks latents into a `(B, 4, h, w)` tensor.
pub fn latent_batch(latents: &[&Latent], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = latents.first().ok_or_else(|| Error::invalid("empty latent batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(latents.len() * 4 * h * w);
    for l in latents {
        if (l.height(), l.width()) != (h, w) {
            return Err(Error::invalid("latent batch entries differ in size"));
        }
        data.extend_from_slice(l.data());
    }
    Ok(Tensor::from_vec(data, (latents.len(), LATENT_CHANNELS, h, w), device)?.to_dtype(dtype)?)
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    imitative: Trunk,
    reference: Trunk,
    depth_proj: Conv2d,
    pooled: Linear,
    /// Optimizer steps applied so far; sampling requires at least one.
    pub trained_steps: u64,
}

impl Model {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let imitative = Trunk::new(&mut ps, "imitative", &config, INPUT_CHANNELS, true)?;
        let reference = Trunk::new(&mut ps, "reference", &config, LATENT_CHANNELS, false)?;
        let depth_proj = Conv2d::with_init(&mut ps, "depth_proj", DEPTH_CHANNELS, LATENT_CHANNELS, &DEPTH_IDENTITY)?;
        let pooled = Linear::new(&mut ps, "pooled", config.widths[2], config.temb_dim())?;
        Ok(Self {
            config,
            store: ps,
            imitative,
            reference,
            depth_proj,
            pooled,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Trainable depth projection of pooled depth, `(B, 3, h, w)` → `(B, 4, h, w)`.
    pub fn depth_project(&self, pooled_depth: &Tensor) -> Result<Tensor> {
        self.depth_proj.forward(pooled_depth)
    }

    /// `[noisy(4) | mask(1) | background(4) | depth(4)]`; dropped depth is exactly zero.
    pub fn assemble_input(&self, batch: &Batch) -> Result<Tensor> {
        let depth = self.depth_project(&batch.depth)?.broadcast_mul(&batch.depth_keep)?;
        Ok(Tensor::cat(&[&batch.noisy, &batch.mask, &batch.background, &depth], 1)?)
    }

    pub fn reference_features(&self, reference: &Tensor) -> Result<RefFeatures> {
        let b = reference.dim(0)?;
        let temb = self.reference.time.forward(&vec![0.0; b], self.dtype(), self.device())?;
        let mut taps = Vec::with_capacity(3);
        self.reference.run(reference, &temb, None, &mut taps)?;
        let up0 = taps.pop().expect("three taps");
        let up1 = taps.pop().expect("three taps");
        let mid = taps.pop().expect("three taps");
        Ok(RefFeatures { mid, up1, up0 })
    }

    /// Predicted noise for `batch`; `refs = None` is the reference-dropped path.
    pub fn forward_with(&self, batch: &Batch, refs: Option<&RefFeatures>) -> Result<Tensor> {
        let x = self.assemble_input(batch)?;
        let ts: Vec<f64> = batch.t.iter().map(|&t| t as f64).collect();
        let mut temb = self.imitative.time.forward(&ts, self.dtype(), self.device())?;
        if let Some(r) = refs {
            temb = (temb + self.pooled.forward(&r.pooled()?)?)?;
        }
        let mut taps = Vec::new();
        let u0 = self.imitative.run(&x, &temb, refs, &mut taps)?;
        let (attn, norm, out) = self.imitative.head.as_ref().expect("imitative trunk has a head");
        let u0 = attn.forward(&u0, refs.map(|r| &r.up0))?;
        out.forward(&norm.forward(&u0)?.silu()?)
    }

    pub fn forward(&self, batch: &Batch, reference: Option<&Tensor>) -> Result<Tensor> {
        let refs = reference.map(|r| self.reference_features(r)).transpose()?;
        self.forward_with(batch, refs.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{assemble_conditions, TrainConfig, TrainingSample};
    use crate::schedule::{NoiseSchedule, ScheduleConfig};
    use mimicforge_core::synthetic::natural_image;
    use mimicforge_core::ImageBuf;

    fn stacks(n: usize, side: usize, with_depth: bool) -> Vec<ConditionStack> {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let cfg = TrainConfig {
            depth_dropout_prob: 0.0,
            ..TrainConfig::default()
        };
        (0..n)
            .map(|i| {
                let smp = TrainingSample {
                    source: natural_image(side, side, i as u64),
                    mask: ImageBuf::from_fn(side, side, 1, |_, x, _| (x >= side / 2) as u8 as f32),
                    reference: natural_image(side, side, 50 + i as u64),
                    depth: with_depth.then(|| natural_image(side, side, 99).to_gray()),
                };
                assemble_conditions(&smp, 100 * i + 7, i as u64, &cfg, &s).unwrap().0
            })
            .collect()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            widths: [8, 16, 16],
            time_dim: 8,
        }
    }

    #[test]
    fn assembled_input_is_exact_thirteen_channels() {
        let model = Model::new(small(), DType::F32, 1).unwrap();
        let st = stacks(2, 16, true);
        let batch = Batch::from_stacks(&st, DType::F32, &Device::Cpu).unwrap();
        let x = model.assemble_input(&batch).unwrap();
        assert_eq!(x.dims(), &[2, 13, 2, 2]);
        let slice = |a: usize, n: usize| x.narrow(1, a, n).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(slice(0, 4), flat(&batch.noisy));
        assert_eq!(slice(4, 1), flat(&batch.mask));
        assert_eq!(slice(5, 4), flat(&batch.background));
        // identity-initialized projector: channels 0..3 = pooled depth, channel 3 = 0
        let depth = slice(9, 4);
        let pooled = flat(&batch.depth);
        for b in 0..2 {
            assert_eq!(&depth[b * 16..b * 16 + 12], &pooled[b * 12..b * 12 + 12]);
            assert!(depth[b * 16 + 12..b * 16 + 16].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dropped_depth_is_zero() {
        let model = Model::new(small(), DType::F32, 1).unwrap();
        let st = stacks(1, 16, false);
        let batch = Batch::from_stacks(&st, DType::F32, &Device::Cpu).unwrap();
        let x = model.assemble_input(&batch).unwrap();
        let depth = x.narrow(1, 9, 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(depth.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_matches_noisy_shape_and_none_is_dropped_path() {
        let model = Model::new(small(), DType::F32, 2).unwrap();
        for side in [16, 24, 32, 40] {
            let st = stacks(2, side, true);
            let batch = Batch::from_stacks(&st, DType::F32, &Device::Cpu).unwrap();
            let r = latent_batch(&[&st[0].cond.background, &st[1].cond.background], DType::F32, &Device::Cpu).unwrap();
            let with_ref = model.forward(&batch, Some(&r)).unwrap();
            assert_eq!(with_ref.dims(), batch.noisy.dims());
            let a = model.forward(&batch, None).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = model.forward_with(&batch, None).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b);
            let c = with_ref.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_ne!(a, c);
        }
    }
}
