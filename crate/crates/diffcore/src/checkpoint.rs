//! `MFCK` checkpoints: header (magic, version, 32-byte config hash, step)
//! followed by a named tensor table of little-endian f32 values.
//!
//! Model widths are not stored; they are recovered from tensor shapes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::train::{Adam, Trainer};
use crate::conditions::TrainConfig;
use crate::unet::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = BufWriter::new(f);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(&tmp, e));
        put(MAGIC)?;
        put(&VERSION.to_le_bytes())?;
        put(&ck.config_hash)?;
        put(&ck.step.to_le_bytes())?;
        put(&(ck.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &ck.tensors {
            put(&(name.len() as u32).to_le_bytes())?;
            put(name.as_bytes())?;
            put(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.dims() {
                put(&(d as u32).to_le_bytes())?;
            }
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let mut buf = Vec::with_capacity(values.len() * 4);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            put(&buf)?;
        }
        w.flush().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        r.read_exact(&mut b).map_err(|_| ck_err(path, "truncated file"))?;
        Ok(b)
    };
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
    if take(4)? != MAGIC {
        return Err(ck_err(path, "bad magic"));
    }
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let config_hash: [u8; 32] = take(32)?.try_into().unwrap();
    let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let count = u32_at(take(4)?);
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?).map_err(|_| ck_err(path, "tensor name is not UTF-8"))?;
        let rank = u32_at(take(4)?) as usize;
        if rank > 8 {
            return Err(ck_err(path, format!("tensor {name}: implausible rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| take(4).map(|b| u32_at(b) as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let raw = take(n * 4)?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ck_err(path, format!("tensor {name} holds non-finite values")));
        }
        tensors.insert(name, Tensor::from_vec(values, dims, &Device::Cpu)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| io_err(path, e))?;
    if !rest.is_empty() {
        return Err(ck_err(path, "trailing bytes"));
    }
    Ok(Checkpoint {
        config_hash,
        step,
        tensors,
    })
}

/// Recovers widths and timestep feature size from parameter shapes.
pub fn infer_model_config(tensors: &BTreeMap<String, Tensor>) -> Result<ModelConfig> {
    let dim = |name: &str, axis: usize| -> Result<usize> {
        tensors
            .get(name)
            .and_then(|t| t.dims().get(axis).copied())
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks {name}")))
    };
    let cfg = ModelConfig {
        widths: [
            dim("imitative.conv_in.w", 0)?,
            dim("imitative.down0.w", 0)?,
            dim("imitative.down1.w", 0)?,
        ],
        time_dim: dim("imitative.time.l1.w", 1)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl Trainer {
    pub fn checkpoint(&self, config_hash: [u8; 32]) -> Checkpoint {
        let mut tensors: BTreeMap<String, Tensor> = self
            .model
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        tensors.extend(self.adam.state());
        Checkpoint {
            config_hash,
            step: self.model.trained_steps,
            tensors,
        }
    }

    /// Restores model, optimizer moments, and the step counter.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig, schedule: NoiseSchedule, dtype: DType) -> Result<Self> {
        let model = model_from_checkpoint(ck, dtype)?;
        let mut adam = Adam::new(cfg.lr);
        adam.load_state(&ck.tensors, model.params())?;
        adam.t = ck.step;
        let mut tr = Trainer::new(model, cfg, schedule)?;
        tr.adam = adam;
        Ok(tr)
    }
}

pub fn model_from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Model> {
    let cfg = infer_model_config(&ck.tensors)?;
    let mut model = Model::new(cfg, dtype, 0)?;
    model.params().load(&ck.tensors)?;
    let expected = model.params().len();
    let present = ck.tensors.keys().filter(|k| !k.starts_with("adam.")).count();
    if present != expected {
        return Err(Error::invalid(format!(
            "checkpoint has {present} parameters, model expects {expected}"
        )));
    }
    model.trained_steps = ck.step;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            widths: [8, 16, 24],
            time_dim: 6,
        };
        let mut model = Model::new(cfg, DType::F32, 5).unwrap();
        model.trained_steps = 42;
        let schedule = NoiseSchedule::linear(&Default::default()).unwrap();
        let tr = Trainer::new(model, TrainConfig::default(), schedule.clone()).unwrap();
        let hash = [7u8; 32];
        save(&path, &tr.checkpoint(hash)).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.config_hash, hash);
        assert_eq!(ck.step, 42);
        assert_eq!(infer_model_config(&ck.tensors).unwrap(), cfg);
        let back = Trainer::from_checkpoint(&ck, TrainConfig::default(), schedule, DType::F32).unwrap();
        assert_eq!(back.step(), 42);
        for ((na, va), (nb, vb)) in tr.model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(na, nb);
            let a = va.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = vb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b);
        }
        assert!(!dir.path().join("m.tmp").exists());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(&p, b"NOPE").unwrap();
        assert!(load(&p).is_err());
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&[0; 10]);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint { .. })));
    }
}
