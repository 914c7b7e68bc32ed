//! The `DBCK` checkpoint format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adversary, ArchConfig, Autoencoder, HeadKind};
use crate::adam::{AdamConfig, AdamState, Moments};
use crate::container::{self, Cursor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub t: u64,
    pub config: AdamConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    head: HeadKind,
    optimizers: BTreeMap<String, OptimizerMeta>,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// Named parameter table for encoder, decoder and adversary, plus optional
/// optimizer states and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: ArchConfig,
    pub head: HeadKind,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub optimizers: BTreeMap<String, OptimizerMeta>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn moment_key(opt: &str, which: &str, param: &str) -> String {
    format!("optim/{opt}/{which}/{param}")
}

impl ModelCheckpoint {
    pub fn capture<T: Scalar>(cae: &Autoencoder<T>, adv: &Adversary<T>) -> Self {
        let tensors = cae
            .named()
            .into_iter()
            .chain(adv.named())
            .map(|(k, v)| (k, v.cast::<f32>()))
            .collect();
        Self {
            arch: cae.arch.clone(),
            head: adv.kind(),
            tensors,
            optimizers: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_optimizer<T: Scalar>(mut self, name: &str, state: &AdamState<T>) -> Self {
        for (param, mo) in &state.moments {
            self.tensors.insert(moment_key(name, "m", param), mo.m.cast());
            self.tensors.insert(moment_key(name, "v", param), mo.v.cast());
        }
        self.optimizers
            .insert(name.to_string(), OptimizerMeta { t: state.t, config: state.config });
        self
    }

    fn fill<'a, T: Scalar>(&self, slots: Vec<(String, &'a mut Tensor<T>)>) -> Result<()> {
        for (name, slot) in slots {
            let src = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Malformed(format!("checkpoint lacks tensor {name}")))?;
            if src.shape() != slot.shape() {
                return Err(Error::Malformed(format!(
                    "{name}: stored shape {:?}, architecture expects {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.cast();
        }
        Ok(())
    }

    pub fn autoencoder<T: Scalar>(&self) -> Result<Autoencoder<T>> {
        let mut cae = Autoencoder::zeros(&self.arch)?;
        self.fill(cae.named_mut())?;
        Ok(cae)
    }

    pub fn adversary<T: Scalar>(&self) -> Result<Adversary<T>> {
        let mut adv = Adversary::zeros(&self.arch, self.head)?;
        self.fill(adv.named_mut())?;
        Ok(adv)
    }

    pub fn optimizer<T: Scalar>(&self, name: &str) -> Result<Option<AdamState<T>>> {
        let Some(meta) = self.optimizers.get(name) else { return Ok(None) };
        let prefix = format!("optim/{name}/m/");
        let mut state = AdamState::new(meta.config);
        state.t = meta.t;
        for (key, m) in self.tensors.range(prefix.clone()..) {
            let Some(param) = key.strip_prefix(&prefix) else { break };
            let v = self
                .tensors
                .get(&moment_key(name, "v", param))
                .ok_or_else(|| Error::Malformed(format!("missing second moment for {param}")))?;
            state.moments.insert(param.to_string(), Moments { m: m.cast(), v: v.cast() });
        }
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            container::put_f32s(&mut payload, t.data());
        }
        let header = Header {
            arch: self.arch.clone(),
            head: self.head,
            optimizers: self.optimizers.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut out = Vec::new();
        container::write(
            &mut out,
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            &serde_json::to_value(&header)?,
            &payload,
        )?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = container::read(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let header: Header = serde_json::from_value(header)?;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = Cursor::at(&payload, e.offset as usize).f32s(n)?;
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Self {
            arch: header.arch,
            head: header.head,
            tensors,
            optimizers: header.optimizers,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::io::Write::write_all(&mut BufWriter::new(File::create(path)?), &bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut BufReader::new(File::open(path)?), &mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
