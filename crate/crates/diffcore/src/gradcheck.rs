//! Finite-difference gradient checks in f64.
//!
//! Error is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over a few
//! sampled coordinates of every variable, using central differences.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use mimicforge_core::synthetic::natural_image;
use mimicforge_core::{seed, ImageBuf};

use crate::codec::encode;
use crate::conditions::{assemble_conditions, TrainConfig, TrainingSample};
use crate::error::{Error, Result};
use crate::nn::{timestep_features, AttnBlock, Conv2d, GroupNorm, Linear, ParamStore, ResBlock};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::train::noise_mse;
use crate::unet::{latent_batch, Batch, Model, ModelConfig};

const H: f64 = 1e-5;
const COORDS_PER_VAR: usize = 4;

fn randn(shape: &[usize], s: u64) -> Result<Tensor> {
    let mut rng = seed::rng(s);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn var(shape: &[usize], s: u64) -> Result<Var> {
    Ok(Var::from_tensor(&randn(shape, s)?)?)
}

fn nudge(v: &Var, i: usize, delta: f64) -> Result<()> {
    let dims = v.dims().to_vec();
    let mut data = v.flatten_all()?.to_vec1::<f64>()?;
    data[i] += delta;
    v.set(&Tensor::from_vec(data, dims, &Device::Cpu)?)?;
    Ok(())
}

/// Relative error of the analytic gradient of `loss` w.r.t. `vars`.
pub fn relative_error(vars: &[(String, Var)], loss: impl Fn() -> Result<Tensor>, s: u64) -> Result<f64> {
    let grads = loss()?.backward()?;
    let mut rng = seed::rng(s);
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (name, v) in vars {
        let g = grads
            .get(v.as_tensor())
            .ok_or_else(|| Error::InvalidState(format!("no gradient reached {name}")))?
            .flatten_all()?
            .to_vec1::<f64>()?;
        for _ in 0..COORDS_PER_VAR.min(g.len()) {
            let i = rng.random_range(0..g.len());
            nudge(v, i, H)?;
            let up = loss()?.to_scalar::<f64>()?;
            nudge(v, i, -2.0 * H)?;
            let down = loss()?.to_scalar::<f64>()?;
            nudge(v, i, H)?;
            let numeric = (up - down) / (2.0 * H);
            diff += (g[i] - numeric).powi(2);
            na += g[i].powi(2);
            nn += numeric.powi(2);
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        return Err(Error::InvalidState("all sampled gradients vanished".into()));
    }
    Ok(diff.sqrt() / denom)
}

fn with_params(ps: &ParamStore, extra: &[(&str, &Var)]) -> Vec<(String, Var)> {
    let mut v: Vec<(String, Var)> = ps.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    v.extend(extra.iter().map(|(k, x)| (k.to_string(), (*x).clone())));
    v
}

/// Weighted sum so every output element carries a distinct gradient.
fn probe(out: &Tensor, s: u64) -> Result<Tensor> {
    Ok((out * randn(out.dims(), s)?)?.sum_all()?)
}

pub fn group_norm() -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, 1);
    let gn = GroupNorm::new(&mut ps, "gn", 16)?;
    // Move the affine params away from their ones/zeros init.
    for (_, v) in ps.iter() {
        v.set(&(v.as_tensor() + randn(v.dims(), 2)?.affine(0.3, 0.0)?)?)?;
    }
    let x = var(&[2, 16, 4, 4], 3)?;
    relative_error(&with_params(&ps, &[("x", &x)]), || probe(&gn.forward(x.as_tensor())?, 4), 5)
}

pub fn res_block() -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, 2);
    let block = ResBlock::new(&mut ps, "rb", 8, 16, 12)?;
    let x = var(&[2, 8, 4, 4], 6)?;
    let temb = var(&[2, 12], 7)?;
    let vars = with_params(&ps, &[("x", &x), ("temb", &temb)]);
    relative_error(&vars, || probe(&block.forward(x.as_tensor(), temb.as_tensor())?, 8), 9)
}

pub fn attention_with_reference() -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, 3);
    let block = AttnBlock::new(&mut ps, "attn", 8, true)?;
    let x = var(&[2, 8, 3, 3], 10)?;
    let r = var(&[2, 8, 3, 3], 11)?;
    let vars = with_params(&ps, &[("x", &x), ("ref", &r)]);
    relative_error(&vars, || probe(&block.forward(x.as_tensor(), Some(r.as_tensor()))?, 12), 13)
}

pub fn depth_projector() -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, 4);
    let proj = Conv2d::with_init(
        &mut ps,
        "depth_proj",
        3,
        4,
        &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    )?;
    let d = var(&[2, 3, 2, 2], 14)?;
    relative_error(&with_params(&ps, &[("depth", &d)]), || probe(&proj.forward(d.as_tensor())?, 15), 16)
}

pub fn time_mlp() -> Result<f64> {
    let mut ps = ParamStore::new(DType::F64, 5);
    let l1 = Linear::new(&mut ps, "time.l1", 8, 32)?;
    let l2 = Linear::new(&mut ps, "time.l2", 32, 32)?;
    let f = timestep_features(&[3.0, 517.0], 8, DType::F64, &Device::Cpu)?;
    relative_error(&with_params(&ps, &[]), || probe(&l2.forward(&l1.forward(&f)?.silu()?)?, 17), 18)
}

/// Named per-block checks.
pub fn blocks() -> Result<Vec<(&'static str, f64)>> {
    Ok(vec![
        ("group_norm", group_norm()?),
        ("res_block", res_block()?),
        ("attention_with_reference", attention_with_reference()?),
        ("depth_projector", depth_projector()?),
        ("time_mlp", time_mlp()?),
    ])
}

/// Noise-prediction loss of a small model on a 16×16 image, all parameters.
pub fn end_to_end() -> Result<f64> {
    let model = Model::new(
        ModelConfig {
            widths: [8, 16, 16],
            time_dim: 8,
        },
        DType::F64,
        21,
    )?;
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default())?;
    let sample = TrainingSample {
        source: natural_image(16, 16, 1),
        mask: ImageBuf::from_fn(16, 16, 1, |y, _, _| (y >= 8) as u8 as f32),
        reference: natural_image(16, 16, 2),
        depth: Some(natural_image(16, 16, 3).to_gray()),
    };
    let cfg = TrainConfig {
        depth_dropout_prob: 0.0,
        ..TrainConfig::default()
    };
    let (stack, noise) = assemble_conditions(&sample, 400, 7, &cfg, &schedule)?;
    let dev = Device::Cpu;
    let batch = Batch::from_stacks(&[stack], DType::F64, &dev)?;
    let reference = latent_batch(&[&encode(&sample.reference)?], DType::F64, &dev)?;
    let target = latent_batch(&[&noise], DType::F64, &dev)?;
    let vars = with_params(model.params(), &[]);
    relative_error(&vars, || noise_mse(&model.forward(&batch, Some(&reference))?, &target), 22)
}
