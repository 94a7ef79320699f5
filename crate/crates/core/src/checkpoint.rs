//! Binary network checkpoints.
//!
//! Layout (little-endian): `"DLN1"`, u32 version, u32-length-prefixed UTF-8
//! architecture string, u64 seed, u32 tensor count, then per tensor a
//! u32-length-prefixed name, u32 rows, u32 cols and `rows·cols` f64 values.
//! The input width is not stored separately; it is the column count of the
//! first tensor (the first layer's input weights), and the class count is the
//! row count of the last (the softmax bias).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::net::{parse_spec, NetInit, Network};
use crate::params::Parameters;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DLN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub seed: u64,
}

/// Name and shape of one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

struct RawTensor {
    info: TensorInfo,
    data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(net: Network, seed: u64) -> Self {
        Checkpoint { net, seed }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let dsl = self.net.spec().to_dsl();
        put_u32(&mut out, dsl.len() as u32);
        out.extend_from_slice(dsl.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let tensors = self.net.tensors();
        put_u32(&mut out, tensors.len() as u32);
        for t in tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.rows as u32);
            put_u32(&mut out, t.cols as u32);
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let (dsl, seed, raw) = read_raw(bytes)?;
        let first = raw
            .first()
            .ok_or_else(|| Error::Malformed("checkpoint holds no tensors".into()))?;
        let input_dim = first.info.cols;
        let n_classes = raw[raw.len() - 1].info.rows;
        let spec = parse_spec(&dsl, input_dim, n_classes)?;
        let mut net = Network::build(spec, NetInit::Default, &mut ChaCha8Rng::seed_from_u64(0))?;
        {
            let mut slots = net.tensors_mut();
            if slots.len() != raw.len() {
                return Err(Error::Malformed(format!(
                    "architecture {dsl} has {} tensors, checkpoint stores {}",
                    slots.len(),
                    raw.len()
                )));
            }
            for (slot, t) in slots.iter_mut().zip(&raw) {
                if slot.name != t.info.name || slot.rows != t.info.rows || slot.cols != t.info.cols {
                    return Err(Error::Malformed(format!(
                        "tensor {} ({}x{}) does not match expected {} ({}x{})",
                        t.info.name, t.info.rows, t.info.cols, slot.name, slot.rows, slot.cols
                    )));
                }
                slot.data.copy_from_slice(&t.data);
            }
        }
        Ok(Checkpoint { net, seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Header and tensor table of a checkpoint, read without rebuilding the
/// network.
pub fn inspect_bytes(bytes: &[u8]) -> Result<(String, u64, Vec<TensorInfo>)> {
    let (dsl, seed, raw) = read_raw(bytes)?;
    Ok((dsl, seed, raw.into_iter().map(|t| t.info).collect()))
}

fn read_raw(bytes: &[u8]) -> Result<(String, u64, Vec<RawTensor>)> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dsl = r.string()?;
    let seed = r.u64()?;
    let n = r.u32()? as usize;
    let mut raw = Vec::with_capacity(n.min(1 << 12));
    for _ in 0..n {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Malformed(format!("tensor {name} is too large")))?;
        let data = r.f64s(len)?;
        raw.push(RawTensor {
            info: TensorInfo { name, rows, cols },
            data,
        });
    }
    if !r.is_done() {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok((dsl, seed, raw))
}
