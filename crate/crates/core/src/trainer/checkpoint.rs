//! Binary checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u32` format version, a `u64`
//! header length, the UTF-8 JSON header, then every parameter as raw
//! little-endian `f64` values in header order, followed by the optimizer's
//! first and second moments in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, INIT_RANGE};
use crate::error::{Error, Result};
use crate::numeric::{AdamConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"HKGXCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub vocab_hash: String,
    pub params: Vec<ParamSpec>,
    pub step: u64,
    pub epoch: usize,
    pub best_valid_mrr: Option<f64>,
    pub optimizer: OptimizerHeader,
    pub init: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

pub fn init_description() -> String {
    format!("uniform[-{INIT_RANGE},{INIT_RANGE}] embeddings, glorot-uniform weights")
}

fn put_block(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 20 + 24 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            put_block(&mut out, t);
        }
        for t in self.first_moments.iter().chain(&self.second_moments) {
            put_block(&mut out, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        let mut params = ParamStore::new();
        for spec in &header.params {
            params.add(&spec.name, r.tensor(&spec.shape)?)?;
        }
        let mut first_moments = Vec::with_capacity(header.params.len());
        for spec in &header.params {
            first_moments.push(r.tensor(&spec.shape)?);
        }
        let mut second_moments = Vec::with_capacity(header.params.len());
        for spec in &header.params {
            second_moments.push(r.tensor(&spec.shape)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            header,
            params,
            first_moments,
            second_moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}
