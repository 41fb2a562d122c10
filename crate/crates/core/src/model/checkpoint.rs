//! Single-file binary checkpoints.
//!
//! Layout (little-endian): magic `BLMC`, u32 format version, u32 header
//! length, JSON header `{version, config, step, state}`, then two tensor
//! sections (parameters, optimizer state). Each section is a u32 count
//! followed by records of u32 name length, name bytes, u8 dtype tag, u32
//! rank, u64 dims, raw data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

use super::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BLMC";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Free-form training state (seeds, schedule, history).
    pub state: serde_json::Value,
    pub params: Vec<NamedTensor>,
    pub optimizer: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    step: u64,
    state: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64, state: serde_json::Value, optimizer: Vec<NamedTensor>) -> Self {
        Self {
            config: model.config().clone(),
            step,
            state,
            params: model
                .named_params()
                .map(|(n, t)| NamedTensor {
                    name: n.to_string(),
                    tensor: t.clone(),
                })
                .collect(),
            optimizer,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_named(
            self.config.clone(),
            self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
        )
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            state: self.state.clone(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        write_section(w, &self.params)?;
        write_section(w, &self.optimizer)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let params = read_section(r)?;
        let optimizer = read_section(r)?;
        Ok(Self {
            config: header.config,
            step: header.step,
            state: header.state,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(&mut BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_section(w: &mut impl Write, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&[DType::F32.tag()])?;
        let shape = t.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        buf.clear();
        for &v in t.tensor.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_data<T: Float>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    let size = T::DTYPE.size();
    let mut raw = vec![0u8; n * size];
    r.read_exact(&mut raw)?;
    Ok(raw.chunks_exact(size).map(T::read_le).collect())
}

fn read_section(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::data("tensor name is not UTF-8"))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = DType::from_tag(tag[0]).ok_or_else(|| Error::data(format!("unknown dtype tag {}", tag[0])))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let tensor = match dtype {
            DType::F32 => Tensor::new(shape, read_data::<f32>(r, n)?)?,
            DType::F64 => Tensor::new(shape, read_data::<f64>(r, n)?)?.cast(),
        };
        out.push(NamedTensor { name, tensor });
    }
    Ok(out)
}
