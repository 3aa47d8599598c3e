//! Named parameter collections and their binary archive.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! "CSEG" | version u32 | entry count u32
//! per entry: name len u32 | name bytes | rank u64 | dims u64* | frozen u8 | f32 payload
//! trailer sections, each introduced by a 4-byte tag:
//!   "META" epoch u64 | val_metric f64 | seed u64
//!   "ADAM" step u64 | count u32 | per entry: name len u32 | name | m f32* | v f32*
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSEG";
pub const FORMAT_VERSION: u32 = 1;

/// Adam moment estimates for unfrozen parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// name -> (first moment, second moment)
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub val_metric: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelCheckpoint {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeMap<String, bool>,
    pub optimizer: OptimizerState,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) {
        let name = name.into();
        tensor.requires_grad = true;
        self.frozen.insert(name.clone(), false);
        self.params.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::shape(format!("checkpoint has no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("checkpoint has no parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.get(name).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    ///
    /// Freezing drops the parameter's gradient and optimizer moments.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                self.frozen.insert(name.clone(), frozen);
                t.requires_grad = !frozen;
                if frozen {
                    t.grad = None;
                    self.optimizer.moments.remove(name);
                }
            }
        }
    }

    /// Number of scalar parameters, optionally restricted to unfrozen ones.
    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !trainable_only || !self.is_frozen(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Concatenated raw bytes of every parameter under `prefix`, in name order.
    pub fn param_bytes(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.params {
            if name.starts_with(prefix) {
                out.extend_from_slice(name.as_bytes());
                for v in t.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    /// Adds gradients by parameter name. Gradients for frozen parameters are ignored.
    pub fn accumulate_grads<'a>(&mut self, grads: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Result<()> {
        for (name, g) in grads {
            if self.is_frozen(name) {
                continue;
            }
            self.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Inserts a parameter with seeded Gaussian values of the given standard deviation.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let values = if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        } else {
            vec![0.0; n]
        };
        self.insert(name, Tensor::new(shape.to_vec(), values).expect("shape matches"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f32) {
        self.insert(name, Tensor::filled(shape, value));
    }

    /// Copies every parameter present in both checkpoints from `other`.
    pub fn load_matching(&mut self, other: &ModelCheckpoint) -> usize {
        let mut n = 0;
        for (name, t) in self.params.iter_mut() {
            if let Some(src) = other.params.get(name) {
                if src.shape() == t.shape() {
                    t.values_mut().copy_from_slice(src.values());
                    n += 1;
                }
            }
        }
        n
    }

    /// Replaces all parameter values with zero.
    pub fn zero_all(&mut self) {
        for t in self.params.values_mut() {
            t.values_mut().fill(0.0);
        }
    }
}

/// Seeded generator used by all parameter initializers.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&data)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, ckpt.params.len() as u32);
    for (name, t) in &ckpt.params {
        put_name(&mut out, name);
        put_u64(&mut out, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        out.push(ckpt.is_frozen(name) as u8);
        put_f32s(&mut out, t.values());
    }
    out.extend_from_slice(b"META");
    put_u64(&mut out, ckpt.meta.epoch);
    out.extend_from_slice(&ckpt.meta.val_metric.to_le_bytes());
    put_u64(&mut out, ckpt.meta.seed);
    out.extend_from_slice(b"ADAM");
    put_u64(&mut out, ckpt.optimizer.step);
    put_u32(&mut out, ckpt.optimizer.moments.len() as u32);
    for (name, (m, v)) in &ckpt.optimizer.moments {
        put_name(&mut out, name);
        put_f32s(&mut out, m);
        put_f32s(&mut out, v);
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::MalformedFile(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::MalformedFile("parameter name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::MalformedFile("tensor too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode(data: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4).map_err(|_| Error::MalformedFile("missing magic".into()))? != MAGIC {
        return Err(Error::MalformedFile("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut ckpt = ModelCheckpoint::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u64()? as usize;
        if rank > 8 {
            return Err(Error::MalformedFile(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let frozen = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::MalformedFile(format!("bad freeze flag {b}"))),
        };
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::MalformedFile("tensor too large".into()))?;
        let values = r.f32s(n)?;
        ckpt.insert(name.clone(), Tensor::new(shape, values)?);
        if frozen {
            ckpt.set_frozen_exact(&name);
        }
    }
    while r.pos < data.len() {
        match r.take(4)? {
            b"META" => {
                ckpt.meta.epoch = r.u64()?;
                ckpt.meta.val_metric = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                ckpt.meta.seed = r.u64()?;
            }
            b"ADAM" => {
                ckpt.optimizer.step = r.u64()?;
                let n = r.u32()?;
                for _ in 0..n {
                    let name = r.name()?;
                    let len = ckpt
                        .params
                        .get(&name)
                        .ok_or_else(|| Error::MalformedFile(format!("moments for unknown parameter `{name}`")))?
                        .numel();
                    let m = r.f32s(len)?;
                    let v = r.f32s(len)?;
                    ckpt.optimizer.moments.insert(name, (m, v));
                }
            }
            tag => {
                return Err(Error::MalformedFile(format!(
                    "unknown checkpoint section {:?}",
                    String::from_utf8_lossy(tag)
                )))
            }
        }
    }
    Ok(ckpt)
}

impl ModelCheckpoint {
    /// A parameter together with its (lazily created) Adam moments.
    pub(crate) fn param_and_moments(&mut self, name: &str) -> Result<(&mut Tensor, &mut (Vec<f32>, Vec<f32>))> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("checkpoint has no parameter `{name}`")))?;
        let n = t.numel();
        let mv = self
            .optimizer
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        Ok((t, mv))
    }

    fn set_frozen_exact(&mut self, name: &str) {
        if let Some(t) = self.params.get_mut(name) {
            t.requires_grad = false;
            t.grad = None;
            self.frozen.insert(name.to_string(), true);
            self.optimizer.moments.remove(name);
        }
    }
}
