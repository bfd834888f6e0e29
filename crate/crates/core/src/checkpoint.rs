//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DTNETCKP"
//! version    u32
//! digest     32 bytes SHA-256 of the spec text
//! spec       u32 length + UTF-8 network spec (config syntax)
//! config     u32 length + UTF-8 full run config (config syntax)
//! epoch      u64      completed epochs
//! seed       u64
//! dtype      u8       4 = f32, 8 = f64
//! adam_step  u64
//! count      u32      number of tensors
//! tensors    count x { u32 name length, name, u32 rank, rank x u64 dims, values }
//! ```
//!
//! Tensor names are parameter paths; Adam moments are stored as
//! `adam.m:<path>` and `adam.v:<path>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{Adam, Moments};
use crate::param::Module;
use crate::tensor::{Real, Tensor};
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"DTNETCKP";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub spec_text: String,
    pub config: RunConfig,
    pub epoch: u64,
    pub seed: u64,
    pub adam_step: u64,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl<T: Real> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        let mut tensors = BTreeMap::new();
        trainer.model.visit("", &mut |name, p| {
            tensors.insert(name.to_string(), p.value.clone());
        });
        for (name, m) in &trainer.adam.moments {
            tensors.insert(format!("adam.m:{name}"), m.m.clone());
            tensors.insert(format!("adam.v:{name}"), m.v.clone());
        }
        let config = RunConfig { network: trainer.model.spec().clone(), train: trainer.config.clone() };
        Self {
            spec_text: trainer.model.spec().canonical(),
            config,
            epoch: trainer.epoch as u64,
            seed: trainer.config.seed,
            adam_step: trainer.adam.step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&digest(&self.spec_text));
        for text in [self.spec_text.clone(), self.config.render()] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(T::BYTES);
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CheckpointCorrupt("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let stored_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let spec_text = r.string()?;
        if digest(&spec_text) != stored_digest {
            return Err(Error::CheckpointCorrupt("spec digest does not match the stored spec".into()));
        }
        let config_text = r.string()?;
        let config = RunConfig::parse(&config_text, None, None)
            .map_err(|e| Error::CheckpointCorrupt(format!("stored config is invalid: {e}")))?;
        if config.network.canonical() != spec_text {
            return Err(Error::CheckpointCorrupt("stored config disagrees with the stored spec".into()));
        }
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let dtype = r.take(1)?[0];
        if dtype != T::BYTES {
            return Err(Error::CheckpointCorrupt(format!("stored {dtype}-byte floats, expected {}-byte", T::BYTES)));
        }
        let adam_step = r.u64()?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CheckpointCorrupt(format!("{name}: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|&n| n.checked_mul(T::BYTES as usize).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::CheckpointCorrupt(format!("{name}: truncated tensor data")))?;
            let raw = r.take(numel * T::BYTES as usize)?;
            let data = raw.chunks(T::BYTES as usize).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::CheckpointCorrupt(format!("{name}: {e}")))?;
            tensors.insert(name, t);
        }
        if r.remaining() != 0 {
            return Err(Error::CheckpointCorrupt(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { spec_text, config, epoch, seed, adam_step, tensors })
    }

    /// Rebuilds the trainer exactly as it was saved.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let mut trainer = Trainer::new(self.config.network.clone(), self.config.train.clone())?;
        self.restore(&mut trainer)?;
        Ok(trainer)
    }

    /// Loads weights and optimizer state into `trainer`, whose network must
    /// have been built from the same spec.
    pub fn restore(self, trainer: &mut Trainer<T>) -> Result<()> {
        let expected = trainer.model.spec().canonical();
        if expected != self.spec_text {
            return Err(Error::CheckpointSpecMismatch(format!(
                "checkpoint spec:\n{}network spec:\n{}",
                self.spec_text, expected
            )));
        }
        let mut tensors = self.tensors;
        let mut problem = None;
        trainer.model.visit_mut("", &mut |name, p| match tensors.remove(name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t,
            Some(t) => problem = Some(format!("{name}: stored shape {:?}, expected {:?}", t.shape(), p.value.shape())),
            None => problem = Some(format!("{name} missing from checkpoint")),
        });
        if let Some(p) = problem {
            return Err(Error::CheckpointSpecMismatch(p));
        }
        let mut moments = BTreeMap::new();
        let names: Vec<String> = tensors.keys().filter_map(|k| k.strip_prefix("adam.m:").map(String::from)).collect();
        for name in names {
            let m = tensors.remove(&format!("adam.m:{name}")).expect("listed");
            let v = tensors
                .remove(&format!("adam.v:{name}"))
                .ok_or_else(|| Error::CheckpointCorrupt(format!("adam state for {name} lacks second moments")))?;
            moments.insert(name, Moments { m, v });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::CheckpointSpecMismatch(format!("unexpected tensor {extra}")));
        }
        trainer.adam = Adam { config: self.config.train.adam, step: self.adam_step, moments };
        trainer.config = self.config.train;
        trainer.epoch = self.epoch as usize;
        Ok(())
    }
}

pub fn save<T: Real>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    fs::write(path, Checkpoint::from_trainer(trainer).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::CheckpointCorrupt(format!("truncated: needed {n} more bytes at offset {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CheckpointCorrupt("text is not UTF-8".into()))
    }
}
