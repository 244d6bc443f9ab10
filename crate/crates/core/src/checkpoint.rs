//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NSN1"  u32 version
//! u32 len, NetworkSpec as JSON
//! u32 count, then per similarity layer: u32 layer, u32 len, SimilaritySpec as JSON
//! u32 count, then per tensor: u8 role (0 parameter, 1 buffer), name, tensor
//! u8 has_optimizer, then: u32 len, OptimizerConfig as JSON, u64 step,
//!   u32 count, per parameter: name, u32 slots, tensors
//! ```
//!
//! A name is `u32 len` followed by UTF-8 bytes; a tensor is `u32 rank`,
//! `rank × u64` dimensions and the `f64` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model, NetworkSpec, ParamStore, SimilaritySpec};
use crate::tensor::Tensor;
use crate::train::{Optimizer, OptimizerConfig, OptimizerState};

pub const MAGIC: &[u8; 4] = b"NSN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub optimizer: Option<Optimizer>,
}

/// `(layer, similarity)` for every similarity layer of `spec`.
pub fn similarity_metadata(spec: &NetworkSpec) -> Vec<(usize, SimilaritySpec)> {
    spec.layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            LayerSpec::NsConv { similarity, .. } => Some((i, similarity.clone())),
            _ => None,
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&Optimizer>) -> Checkpoint {
        Checkpoint { spec: model.spec().clone(), params: model.params.clone(), optimizer: optimizer.cloned() }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_params(self.spec, self.params)
    }

    /// Replace `model`'s parameters with the stored ones. Fails without
    /// touching `model` unless the stored network matches its spec.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        if &self.spec != model.spec() {
            return Err(Error::Configuration("checkpoint network does not match the model's".into()));
        }
        let checked = Model::from_params(self.spec.clone(), self.params.clone())?;
        *model = checked;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_json(&mut w, &self.spec)?;
        let meta = similarity_metadata(&self.spec);
        put_u32(&mut w, meta.len() as u32);
        for (layer, sim) in &meta {
            put_u32(&mut w, *layer as u32);
            put_json(&mut w, sim)?;
        }
        let tensors: Vec<_> = self
            .params
            .iter()
            .map(|(n, t)| (0u8, n, t))
            .chain(self.params.buffers().map(|(n, t)| (1u8, n, t)))
            .collect();
        put_u32(&mut w, tensors.len() as u32);
        for (role, name, t) in tensors {
            w.push(role);
            put_str(&mut w, name);
            put_tensor(&mut w, t);
        }
        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                put_json(&mut w, &opt.config)?;
                w.extend_from_slice(&opt.state.step.to_le_bytes());
                put_u32(&mut w, opt.state.slots.len() as u32);
                for (name, slots) in &opt.state.slots {
                    put_str(&mut w, name);
                    put_u32(&mut w, slots.len() as u32);
                    for t in slots {
                        put_tensor(&mut w, t);
                    }
                }
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}, expected \"NSN1\"")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let spec: NetworkSpec = r.json()?;
        let count = r.u32()?;
        let mut meta = Vec::new();
        for _ in 0..count {
            let layer = r.u32()? as usize;
            meta.push((layer, r.json::<SimilaritySpec>()?));
        }
        if meta != similarity_metadata(&spec) {
            return Err(Error::Format("similarity metadata disagrees with the stored network".into()));
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let role = r.u8()?;
            let name = r.string()?;
            let t = r.tensor()?;
            match role {
                0 => params.insert(name, t),
                1 => params.insert_buffer(name, t),
                other => return Err(Error::Format(format!("unknown tensor role {other} for {name}"))),
            }
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config: OptimizerConfig = r.json()?;
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut state = OptimizerState { step, ..Default::default() };
                for _ in 0..r.u32()? {
                    let name = r.string()?;
                    let n = r.u32()?;
                    let slots = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                    state.slots.insert(name, slots);
                }
                Some(Optimizer { config, state })
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { spec, params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io_at(e, path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io_at(e, path))?)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_json<T: serde::Serialize>(w: &mut Vec<u8>, v: &T) -> Result<()> {
    let s = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
    put_str(w, &s);
    Ok(())
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    put_u32(w, t.shape().len() as u32);
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated checkpoint: need {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("name is not UTF-8: {e}")))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let s = self.string()?;
        serde_json::from_str(&s).map_err(|e| Error::Format(format!("bad embedded JSON: {e}")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = n
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} overflows")))?;
        let data = self.take(bytes)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data)
    }
}
