//! Binary checkpoint format.
//!
//! ```text
//! magic   b"FGMXCKPT"
//! u32     version (1)
//! u32     entry count
//! per entry:
//!   u32   name length, then UTF-8 name bytes
//!   u32   tensor count
//!   per tensor:
//!     u32 rank, then rank × u64 dims
//!     numel × f64 values
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ModelBundle, ModelDims, NETWORK_NAMES};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FGMXCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensors: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensors: Vec<Tensor>) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            tensors,
        });
    }

    pub fn get(&self, name: &str) -> Option<&[Tensor]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.tensors.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.tensors.len() as u32).to_le_bytes());
            for t in &e.tensors {
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("name is not UTF-8"))?;
            let nt = r.u32()?;
            let mut tensors = Vec::with_capacity(nt as usize);
            for _ in 0..nt {
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u64()? as usize);
                }
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
                }
                tensors.push(Tensor::new(shape, data)?);
            }
            entries.push(CheckpointEntry { name, tensors });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            line: self.pos,
            msg: format!("checkpoint: {msg} (byte offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl ModelBundle {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for (name, tensors) in self.network_tensors() {
            c.push(name, tensors);
        }
        c
    }

    /// Rebuilds a bundle; dimensions are recovered from the stored shapes.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            c.get(name)
                .ok_or_else(|| Error::State(format!("checkpoint lacks the {name} network")))
        };
        let ext = get(NETWORK_NAMES[0])?;
        let cls = get(NETWORK_NAMES[1])?;
        if ext.len() < 2 || cls.len() != 2 {
            return Err(Error::State("checkpoint networks have too few tensors".into()));
        }
        let input_dim = ext[0].shape()[1];
        let hidden = ext[0].shape()[0];
        let latent_dim = cls[0].shape()[1];
        let num_classes = cls[0].shape()[0];
        let dims = ModelDims {
            input_dim,
            latent_dim,
            num_classes,
            hidden,
        };
        let mut bundle = ModelBundle::init(dims, 0)?;
        bundle.extractor.set_tensors(ext)?;
        bundle.classifier.weight = cls[0].clone();
        bundle.classifier.bias = cls[1].clone();
        bundle.policy.set_tensors(get(NETWORK_NAMES[2])?)?;
        bundle.discriminator.set_tensors(get(NETWORK_NAMES[3])?)?;
        Ok(bundle)
    }
}

/// A sequence of flat parameter snapshots keyed by iteration.
pub fn trajectory_checkpoint(points: &[(usize, Vec<f64>)]) -> Checkpoint {
    let mut c = Checkpoint::default();
    for (iter, w) in points {
        c.push(format!("iter_{iter}"), vec![Tensor::vector(w.clone())]);
    }
    c
}

pub fn read_trajectory(c: &Checkpoint) -> Result<Vec<(usize, Vec<f64>)>> {
    c.entries
        .iter()
        .map(|e| {
            let iter = e
                .name
                .strip_prefix("iter_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::State(format!("bad trajectory entry {:?}", e.name)))?;
            let w = e
                .tensors
                .first()
                .ok_or_else(|| Error::State("empty trajectory entry".into()))?;
            Ok((iter, w.data().to_vec()))
        })
        .collect()
}
