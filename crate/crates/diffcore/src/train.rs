//! Noise-prediction training with reference/depth dropout and Adam.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::Rng;

use mimicforge_core::seed;

use crate::codec::{encode, Latent};
use crate::conditions::{assemble_conditions, ConditionStack, TrainConfig, TrainingSample};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::unet::{latent_batch, Batch, Model};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let (b1, b2) = ADAM_BETAS;
        self.t += 1;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(name) {
                Some(m) => (m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?,
                None => g.affine(1.0 - b1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - b2, 0.0)?,
            };
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, ADAM_EPS)?;
            let update = m.affine(self.lr / bc1, 0.0)?.div(&denom)?;
            var.set(&(var.as_tensor() - update)?.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Moment tensors as `adam.m.<param>` / `adam.v.<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, params: &ParamStore) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (name, t) in tensors {
            let (slot, key) = if let Some(k) = name.strip_prefix("adam.m.") {
                (&mut self.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                (&mut self.v, k)
            } else {
                continue;
            };
            let var = params
                .get(key)
                .ok_or_else(|| Error::invalid(format!("optimizer state for unknown parameter {key}")))?;
            if var.dims() != t.dims() {
                return Err(Error::invalid(format!("optimizer state shape mismatch for {key}")));
            }
            slot.insert(key.to_string(), t.to_dtype(params.dtype())?);
        }
        Ok(())
    }
}

/// Random choices for one optimizer step, derived from (seed, step) alone.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub ref_dropped: bool,
    /// Per sample: timestep and condition seed.
    pub samples: Vec<(usize, u64)>,
}

pub fn plan_step(cfg: &TrainConfig, schedule_len: usize, step: u64, batch: usize) -> StepPlan {
    let mut rng = seed::rng(seed::derive(cfg.seed, step));
    let ref_dropped = rng.random::<f64>() < cfg.ref_dropout_prob;
    let samples = (0..batch).map(|_| (rng.random_range(0..schedule_len), rng.random())).collect();
    StepPlan { ref_dropped, samples }
}

/// Everything a step needs except the forward/backward pass.
#[derive(Debug, Clone)]
pub struct PreparedStep {
    pub step: u64,
    pub plan: StepPlan,
    pub stacks: Vec<ConditionStack>,
    pub noise: Vec<Latent>,
    pub references: Vec<Latent>,
}

impl PreparedStep {
    pub fn depth_dropped(&self) -> usize {
        self.stacks.iter().filter(|s| s.cond.depth_dropped()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub ref_dropped: bool,
    pub depth_dropped: usize,
}

/// Mean squared error between predicted and true noise.
pub fn noise_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.mean_all()?)
}

#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub schedule: NoiseSchedule,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: Adam::new(cfg.lr),
            model,
            cfg,
            schedule,
        })
    }

    pub fn step(&self) -> u64 {
        self.model.trained_steps
    }

    pub fn prepare_step(&self, step: u64, samples: &[TrainingSample]) -> Result<PreparedStep> {
        if samples.is_empty() {
            return Err(Error::invalid("training step needs at least one sample"));
        }
        let plan = plan_step(&self.cfg, self.schedule.len(), step, samples.len());
        let mut stacks = Vec::with_capacity(samples.len());
        let mut noise = Vec::with_capacity(samples.len());
        let mut references = Vec::new();
        for (s, &(t, cond_seed)) in samples.iter().zip(&plan.samples) {
            let (stack, eps) = assemble_conditions(s, t, cond_seed, &self.cfg, &self.schedule)?;
            stacks.push(stack);
            noise.push(eps);
            if !plan.ref_dropped {
                references.push(encode(&s.reference.to_rgb())?);
            }
        }
        Ok(PreparedStep {
            step,
            plan,
            stacks,
            noise,
            references,
        })
    }

    pub fn loss(&self, prep: &PreparedStep) -> Result<Tensor> {
        let (dtype, dev) = (self.model.dtype(), self.model.device());
        let batch = Batch::from_stacks(&prep.stacks, dtype, dev)?;
        let reference = if prep.plan.ref_dropped {
            None
        } else {
            Some(latent_batch(&prep.references.iter().collect::<Vec<_>>(), dtype, dev)?)
        };
        let pred = self.model.forward(&batch, reference.as_ref())?;
        let target = latent_batch(&prep.noise.iter().collect::<Vec<_>>(), dtype, dev)?;
        noise_mse(&pred, &target)
    }

    /// One optimizer step. A non-finite loss aborts before any update.
    pub fn train_step(&mut self, samples: &[TrainingSample]) -> Result<StepReport> {
        let step = self.step();
        let prep = self.prepare_step(step, samples)?;
        let loss_t = self.loss(&prep)?;
        let loss = loss_t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let grads = loss_t.backward()?;
        self.adam.step(self.model.params(), &grads)?;
        self.model.trained_steps += 1;
        Ok(StepReport {
            step,
            loss,
            ref_dropped: prep.plan.ref_dropped,
            depth_dropped: prep.depth_dropped(),
        })
    }
}
