//! Precomputed tower vectors, so one side can be encoded offline and scored
//! later against live vectors from the other side.
//!
//! Binary layout, little-endian: the magic `TGNNEMB1`, `u32` row count,
//! `u32` dim, then per row a `u32` byte length, the UTF-8 text and `dim`
//! f32 values.

use std::io::{Read, Write};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::model::{NodeInput, Side, TextGnn};

pub const MAGIC: &[u8; 8] = b"TGNNEMB1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<(String, Vec<Real>)>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&[Real]> {
        self.rows.iter().find(|(t, _)| t == text).map(|(_, v)| v.as_slice())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&len_u32(self.rows.len())?.to_le_bytes())?;
        w.write_all(&len_u32(self.dim)?.to_le_bytes())?;
        for (text, v) in &self.rows {
            if v.len() != self.dim {
                return Err(Error::shape("embedding row", &[self.dim], &[v.len()]));
            }
            w.write_all(&len_u32(text.len())?.to_le_bytes())?;
            w.write_all(text.as_bytes())?;
            for &x in v {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Data("not an embedding table (bad magic)".into()));
        }
        let n = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut rows = Vec::with_capacity(n.min(1 << 20));
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut text = vec![0u8; len];
            r.read_exact(&mut text).map_err(truncated)?;
            let text = String::from_utf8(text).map_err(|_| Error::Data("embedding text is not UTF-8".into()))?;
            r.read_exact(&mut buf).map_err(truncated)?;
            let v = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as Real)
                .collect();
            rows.push((text, v));
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Data("embedding table has trailing bytes".into()));
        }
        Ok(EmbeddingTable { dim, rows })
    }
}

/// Tower vectors for `nodes` on `side`, one row per node in input order.
pub fn export_tower_embeddings(model: &TextGnn, side: Side, nodes: &[NodeInput], batch_size: usize) -> Result<EmbeddingTable> {
    let refs: Vec<&NodeInput> = nodes.iter().collect();
    let vectors = model.tower_vectors(side, &refs, batch_size)?;
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("non-finite tower vector".into()));
    }
    Ok(EmbeddingTable {
        dim: model.tower_dim(),
        rows: nodes.iter().map(|n| n.text.clone()).zip(vectors).collect(),
    })
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidInput(format!("{n} does not fit the table format")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Data("embedding table is truncated".into())
    } else {
        Error::Io(e)
    }
}
