//! Checkpoint files: `"CKPT"`, `u32` block count, then per block a `u32`
//! name length, the UTF-8 name, `u32` rank, `rank` `u32` dims and the
//! `f32` payload, all little-endian.

use std::path::Path;

use oodconcepts_core::concepts::ConceptMatrix;
use oodconcepts_core::linalg::Matrix;
use oodconcepts_core::model::{ClassifierHead, ConceptModel, ReconstructionNet};

use crate::error::{CliError, Result};
use crate::formats::{read_bytes, write_atomic};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn push_matrix(&mut self, name: &str, m: &Matrix) {
        self.blocks.push(Block {
            name: name.to_string(),
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.data().iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn matrix(&self, name: &str, path: &Path) -> Result<Matrix> {
        let b = self.block(name).ok_or_else(|| CliError::format(path, format!("checkpoint has no block {name:?}")))?;
        if b.dims.len() != 2 {
            return Err(CliError::format(path, format!("block {name:?} has rank {}, expected 2", b.dims.len())));
        }
        let data = b.data.iter().map(|&v| v as f64).collect();
        Ok(Matrix::from_vec(b.dims[0] as usize, b.dims[1] as usize, data)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for d in &b.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CKPT_MAGIC {
            return Err(CliError::format(path, "bad magic, expected \"CKPT\""));
        }
        let count = r.u32()?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CliError::format(path, "block name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let count = count.ok_or_else(|| CliError::format(path, format!("block {name:?} is too large")))?;
            let payload = r.take(count.checked_mul(4).ok_or_else(|| CliError::format(path, "block size overflows"))?)?;
            let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(oodconcepts_core::Error::Data(format!("non-finite value in block {name:?}")).into());
            }
            blocks.push(Block { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(CliError::format(path, format!("{} trailing bytes after the last block", bytes.len() - r.pos)));
        }
        Ok(Self { blocks })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::format(self.path, format!("truncated at byte {}, needed {n} more", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn head_checkpoint(head: &ClassifierHead) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push_matrix("head.weight", &head.weight);
    c.push_matrix("head.bias", &head.bias);
    c
}

pub fn model_checkpoint(model: &ConceptModel) -> Checkpoint {
    let mut c = head_checkpoint(&model.head);
    c.push_matrix("concepts", model.concepts.matrix());
    c.push_matrix("g.w1", &model.g.w1);
    c.push_matrix("g.b1", &model.g.b1);
    c.push_matrix("g.w2", &model.g.w2);
    c.push_matrix("g.b2", &model.g.b2);
    c
}

pub fn head_from(c: &Checkpoint, path: &Path) -> Result<ClassifierHead> {
    Ok(ClassifierHead::new(c.matrix("head.weight", path)?, c.matrix("head.bias", path)?)?)
}

pub fn model_from(c: &Checkpoint, path: &Path) -> Result<ConceptModel> {
    let g = ReconstructionNet::new(c.matrix("g.w1", path)?, c.matrix("g.b1", path)?, c.matrix("g.w2", path)?, c.matrix("g.b2", path)?)?;
    Ok(ConceptModel::new(ConceptMatrix::new(c.matrix("concepts", path)?)?, g, head_from(c, path)?)?)
}

/// The head as it would come back from a checkpoint.
pub fn round_head(head: &ClassifierHead) -> Result<ClassifierHead> {
    head_from(&head_checkpoint(head), Path::new("<memory>"))
}
