//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `ZFCKPT`, u32 version, u32 length + config text, u8 flag + two f32
//! (normalization), u8 flag + u32 (end id), u64 updates applied, u8 flag +
//! f64 (best validation ELBO), u32 parameter count, then per parameter a
//! u32 length + name, u32 rank, u64 extents and f32 values. The optimizer
//! follows: u64 step, three f64 hyperparameters, then the first and second
//! moments of every parameter in store order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::ZForcingModel;
use crate::params::ParamStore;
use crate::trainer::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"ZFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub normalization: Option<Normalization>,
    pub end_id: Option<u32>,
    pub updates: u64,
    pub best_valid_elbo: Option<f64>,
    pub params: ParamStore,
    pub adam: AdamState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad flag byte {b}"))),
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_text());
        match self.normalization {
            Some(n) => {
                w.u8(1);
                w.f32s(&[n.mean, n.std]);
            }
            None => w.u8(0),
        }
        match self.end_id {
            Some(id) => {
                w.u8(1);
                w.u32(id);
            }
            None => w.u8(0),
        }
        w.u64(self.updates);
        match self.best_valid_elbo {
            Some(b) => {
                w.u8(1);
                w.f64(b);
            }
            None => w.u8(0),
        }
        w.u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.shape().len() as u32);
            t.shape().iter().for_each(|&d| w.u64(d as u64));
            w.f32s(t.data());
        }
        w.u64(self.adam.step);
        w.f64(self.adam.beta1);
        w.f64(self.adam.beta2);
        w.f64(self.adam.eps);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            w.f32s(m);
            w.f32s(v);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::from_text(&r.str()?)?;
        let normalization = if r.flag()? {
            Some(Normalization {
                mean: r.f32()?,
                std: r.f32()?,
            })
        } else {
            None
        };
        let end_id = if r.flag()? { Some(r.u32()?) } else { None };
        let updates = r.u64()?;
        let best_valid_elbo = if r.flag()? { Some(r.f64()?) } else { None };
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` is too large")))?;
            let data = r.f32s(numel)?;
            if params.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            params.add(name, Tensor::new(shape, data)?);
        }
        let step = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for (_, _, t) in params.iter() {
            m.push(r.f32s(t.numel())?);
            v.push(r.f32s(t.numel())?);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            normalization,
            end_id,
            updates,
            best_valid_elbo,
            params,
            adam: AdamState {
                step,
                beta1,
                beta2,
                eps,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the model described by the stored config and loads the
    /// stored values into it.
    pub fn restore_model(&self) -> Result<(ZForcingModel, ParamStore)> {
        self.restore_with(&self.config)
    }

    /// Like [`Checkpoint::restore_model`] but with dimensions taken from
    /// `config`; any parameter whose shape disagrees is reported by name.
    pub fn restore_with(&self, config: &TrainConfig) -> Result<(ZForcingModel, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (model, mut store) = ZForcingModel::new(config.model_config(self.end_id), &mut rng)?;
        for (_, name, t) in store.iter() {
            let Some(id) = self.params.find(name) else {
                return Err(Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")));
            };
            let saved = self.params.get(id);
            if saved.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint but the model expects {:?}",
                    saved.shape(),
                    t.shape()
                )));
            }
        }
        if let Some((_, name, _)) = self.params.iter().find(|(_, n, _)| store.find(n).is_none()) {
            return Err(Error::Checkpoint(format!("checkpoint parameter `{name}` is not part of the model")));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let src = self.params.get(self.params.find(store.name(id)).unwrap()).data().to_vec();
            store.get_mut(id).data_mut().copy_from_slice(&src);
        }
        Ok((model, store))
    }
}
