//! Binary checkpoints: config snapshot, normalization statistics and every
//! named tensor, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::tokenizer::NormStats;

const MAGIC: &[u8; 8] = b"TEMCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration text the model was trained with.
    pub config: String,
    pub n_vars: usize,
    pub norm: NormStats,
    pub params: Vec<NamedTensor>,
    pub injection: Vec<NamedTensor>,
}

fn snapshot(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .names()
        .iter()
        .zip(store.tensors())
        .map(|(n, t)| NamedTensor {
            name: n.clone(),
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        })
        .collect()
}

fn restore(store: &mut ParamStore, saved: &[NamedTensor], what: &str) -> Result<()> {
    if saved.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} {what} tensors, model has {}",
            saved.len(),
            store.len()
        )));
    }
    for (i, s) in saved.iter().enumerate() {
        if store.names()[i] != s.name || store.get(i).shape() != s.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint tensor '{}' {:?} does not match model tensor '{}' {:?}",
                s.name,
                s.shape,
                store.names()[i],
                store.get(i).shape()
            )));
        }
        store.get_mut(i).values_mut().copy_from_slice(&s.values);
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: &Model, config: &str, norm: &NormStats) -> Self {
        Self {
            config: config.to_string(),
            n_vars: model.spec().n_vars(),
            norm: norm.clone(),
            params: snapshot(&model.params),
            injection: snapshot(&model.injection),
        }
    }

    /// Copies the saved values into a model of the same architecture.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        restore(&mut model.params, &self.params, "parameter")?;
        restore(&mut model.injection, &self.injection, "injection")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_bytes(&mut out, self.config.as_bytes());
        put_u64(&mut out, self.n_vars as u64);
        put_f64s(&mut out, &self.norm.mean);
        put_f64s(&mut out, &self.norm.std);
        for store in [&self.params, &self.injection] {
            put_u64(&mut out, store.len() as u64);
            for t in store {
                put_bytes(&mut out, t.name.as_bytes());
                put_u64(&mut out, t.shape.len() as u64);
                t.shape.iter().for_each(|&d| put_u64(&mut out, d as u64));
                put_f64s(&mut out, &t.values);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let config = r.string()?;
        let n_vars = r.u64()? as usize;
        let norm = NormStats {
            mean: r.f64s()?,
            std: r.f64s()?,
        };
        let mut stores = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u64()? as usize;
            let mut tensors = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let name = r.string()?;
                let rank = r.u64()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let values = r.f64s()?;
                if shape.iter().product::<usize>() != values.len() {
                    return Err(Error::Data(format!("checkpoint tensor '{name}' has inconsistent length")));
                }
                tensors.push(NamedTensor { name, shape, values });
            }
            stores.push(tensors);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        let injection = stores.pop().expect("two stores");
        let params = stores.pop().expect("two stores");
        Ok(Self {
            config,
            n_vars,
            norm,
            params,
            injection,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    put_u64(out, vs.len() as u64);
    vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("bad length".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
