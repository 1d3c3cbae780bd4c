//! Parameter store and the small set of layers the U-Nets are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;

use mimicforge_core::seed;

use crate::error::{Error, Result};

pub const GROUPS: usize = 8;
const NORM_EPS: f64 = 1e-5;

/// Named trainable tensors. Initial values depend only on (seed, name), so
/// construction order never changes a model.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform with variance `1 / fan_in`.
    LeCun { fan_in: usize },
    Values(&'static [f64]),
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidState(format!("parameter {name} defined twice")));
        }
        let n: usize = shape.iter().product();
        let mut rng = seed::rng(seed::derive(self.seed, seed::tag(name)));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::LeCun { fan_in } => {
                let bound = (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::invalid(format!("{name}: {} init values for {n} entries", v.len())));
                }
                v.to_vec()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Sorted by name.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::invalid(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            w: ps.add(&format!("{name}.w"), &[out, inp], Init::LeCun { fan_in: inp })?,
            b: ps.add(&format!("{name}.b"), &[out], Init::Zeros)?,
        })
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w.as_tensor().t()?)?.broadcast_add(self.b.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, inp: usize, out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            w: ps.add(&format!("{name}.w"), &[out, inp, k, k], Init::LeCun { fan_in: inp * k * k })?,
            b: ps.add(&format!("{name}.b"), &[out], Init::Zeros)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, inp: usize, out: usize, w: &'static [f64]) -> Result<Self> {
        Ok(Self {
            w: ps.add(&format!("{name}.w"), &[out, inp, 1, 1], Init::Values(w))?,
            b: ps.add(&format!("{name}.b"), &[out], Init::Zeros)?,
            stride: 1,
            pad: 0,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.b.dim(0)?;
        let y = x.conv2d(self.w.as_tensor(), self.pad, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.b.as_tensor().reshape((1, out, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Var,
    beta: Var,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        if channels % GROUPS != 0 {
            return Err(Error::invalid(format!("{channels} channels not divisible into {GROUPS} groups")));
        }
        Ok(Self {
            gamma: ps.add(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: ps.add(&format!("{name}.beta"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, GROUPS, c / GROUPS * h * w))?;
        let centered = g.broadcast_sub(&g.mean_keepdim(2)?)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&var.affine(1.0, NORM_EPS)?.sqrt()?)?.reshape((b, c, h, w))?;
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Softmax over the last axis, stabilized by the (constant) row maximum.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Attention over the concatenation of imitative and reference tokens:
/// `softmax(Q · cat(K_i, K_r)ᵀ / √d_k) · cat(V_i, V_r)`.
///
/// Shapes are `(B, N, d)`. An absent or empty reference skips the
/// concatenation, so the result is plain self-attention bit for bit.
/// Returns the output and the attention weights.
pub fn reference_attention(
    q: &Tensor,
    k_i: &Tensor,
    v_i: &Tensor,
    reference: Option<(&Tensor, &Tensor)>,
) -> Result<(Tensor, Tensor)> {
    let d_k = q.dim(D::Minus1)?;
    if k_i.dim(D::Minus1)? != d_k {
        return Err(Error::invalid(format!("key dim {} != query dim {d_k}", k_i.dim(D::Minus1)?)));
    }
    let (k, v) = match reference {
        Some((k_r, v_r)) if k_r.dim(1)? > 0 => {
            if k_r.dim(D::Minus1)? != d_k {
                return Err(Error::invalid(format!(
                    "reference key dim {} != query dim {d_k}",
                    k_r.dim(D::Minus1)?
                )));
            }
            if k_r.dim(1)? != v_r.dim(1)? {
                return Err(Error::invalid("reference keys and values differ in token count"));
            }
            (Tensor::cat(&[k_i, k_r], 1)?, Tensor::cat(&[v_i, v_r], 1)?)
        }
        _ => (k_i.clone(), v_i.clone()),
    };
    let logits = q.matmul(&k.t()?)?.affine(1.0 / (d_k as f64).sqrt(), 0.0)?;
    let weights = softmax_last(&logits)?;
    Ok((weights.matmul(&v)?, weights))
}

/// `(B, C, H, W)` → `(B, H·W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.reshape((b, c, h, w))?)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, inp: usize, out: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), inp)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), inp, out, 3, 1)?,
            temb: Linear::new(ps, &format!("{name}.temb"), temb_dim, out)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), out)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), out, out, 3, 1)?,
            skip: if inp != out {
                Some(Conv2d::new(ps, &format!("{name}.skip"), inp, out, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let (b, c, _, _) = h.dims4()?;
        let t = self.temb.forward(&temb.silu()?)?.reshape((b, c, 1, 1))?;
        let h = self.conv2.forward(&self.norm2.forward(&h.broadcast_add(&t)?)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head attention block. With `inject`, it owns K_r/V_r projections
/// for reference features of the same width.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    reference: Option<(GroupNorm, Linear, Linear)>,
}

impl AttnBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, inject: bool) -> Result<Self> {
        let reference = if inject {
            Some((
                GroupNorm::new(ps, &format!("{name}.ref_norm"), c)?,
                Linear::new(ps, &format!("{name}.k_r"), c, c)?,
                Linear::new(ps, &format!("{name}.v_r"), c, c)?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c)?,
            q: Linear::new(ps, &format!("{name}.q"), c, c)?,
            k: Linear::new(ps, &format!("{name}.k"), c, c)?,
            v: Linear::new(ps, &format!("{name}.v"), c, c)?,
            out: Linear::new(ps, &format!("{name}.out"), c, c)?,
            reference,
        })
    }

    /// `ref_feat` is the reference U-Net's feature map entering the matching
    /// stage; `None` leaves the reference token set empty.
    pub fn forward(&self, x: &Tensor, ref_feat: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let tokens = to_tokens(&self.norm.forward(x)?)?;
        let (q, k, v) = (self.q.forward(&tokens)?, self.k.forward(&tokens)?, self.v.forward(&tokens)?);
        let kv_r = match (ref_feat, &self.reference) {
            (Some(r), Some((norm, k_r, v_r))) => {
                let rt = to_tokens(&norm.forward(r)?)?;
                Some((k_r.forward(&rt)?, v_r.forward(&rt)?))
            }
            (Some(_), None) => {
                return Err(Error::InvalidState("reference features passed to a non-injecting block".into()))
            }
            (None, _) => None,
        };
        let (attn, _) = reference_attention(&q, &k, &v, kv_r.as_ref().map(|(a, b)| (a, b)))?;
        Ok((x + from_tokens(&self.out.forward(&attn)?, h, w)?)?)
    }
}

/// Sinusoidal timestep features, `(B, dim)`.
pub fn timestep_features(ts: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), 2 * half), device)?.to_dtype(dtype)?)
}
