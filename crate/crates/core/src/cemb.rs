//! Binary embedding files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes   "CEMB" (raw embeddings) or "CIDX" (fused index)
//! version  u32       1
//! dim      u32
//! count    u64
//! fusion   16 bytes  CIDX only: text weight f32, image weight f32,
//!                    normalize u8, 7 zero bytes
//! records  count x { id_len u16, id (UTF-8), dim x f32 }
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::index::{EmbeddingVector, FusedIndex, FusionConfig, IndexError};

pub const CEMB_MAGIC: &[u8; 4] = b"CEMB";
pub const CIDX_MAGIC: &[u8; 4] = b"CIDX";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const FUSION_BLOCK_LEN: usize = 16;

/// Contents of a `CEMB` file: one embedding per id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: Vec<(String, EmbeddingVector)>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, vector: EmbeddingVector) -> Result<(), IndexError> {
        if vector.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: vector.dim(),
            });
        }
        self.entries.push((id.into(), vector));
        Ok(())
    }

    pub fn to_map(&self) -> HashMap<String, EmbeddingVector> {
        self.entries.iter().cloned().collect()
    }
}

/// Size in bytes of a file holding `count` rows with the given total id bytes.
pub fn encoded_len(magic: &[u8; 4], dim: usize, count: usize, total_id_bytes: usize) -> usize {
    let fusion = if magic == CIDX_MAGIC { FUSION_BLOCK_LEN } else { 0 };
    HEADER_LEN + fusion + count * 2 + total_id_bytes + count * dim * 4
}

fn put_header(out: &mut Vec<u8>, magic: &[u8; 4], dim: usize, count: usize) -> Result<(), IndexError> {
    let dim = u32::try_from(dim).map_err(|_| IndexError::Inconsistent(format!("dim {dim} too large")))?;
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, id: &str, row: &[f32]) -> Result<(), IndexError> {
    let len = u16::try_from(id.len())
        .map_err(|_| IndexError::Inconsistent(format!("id of {} bytes exceeds 65535", id.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    for v in row {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_cemb(table: &EmbeddingTable) -> Result<Vec<u8>, IndexError> {
    let id_bytes: usize = table.entries.iter().map(|(id, _)| id.len()).sum();
    let mut out = Vec::with_capacity(encoded_len(CEMB_MAGIC, table.dim, table.entries.len(), id_bytes));
    put_header(&mut out, CEMB_MAGIC, table.dim, table.entries.len())?;
    for (id, v) in &table.entries {
        if v.dim() != table.dim {
            return Err(IndexError::DimensionMismatch {
                expected: table.dim,
                got: v.dim(),
            });
        }
        put_record(&mut out, id, v.as_slice())?;
    }
    Ok(out)
}

pub fn encode_index(index: &FusedIndex) -> Result<Vec<u8>, IndexError> {
    let id_bytes: usize = index.ids().iter().map(String::len).sum();
    let mut out = Vec::with_capacity(encoded_len(CIDX_MAGIC, index.dim(), index.len(), id_bytes));
    put_header(&mut out, CIDX_MAGIC, index.dim(), index.len())?;
    let fusion = index.fusion();
    out.extend_from_slice(&fusion.text_weight.to_le_bytes());
    out.extend_from_slice(&fusion.image_weight.to_le_bytes());
    out.push(fusion.normalize as u8);
    out.extend_from_slice(&[0u8; 7]);
    for (i, id) in index.ids().iter().enumerate() {
        put_record(&mut out, id, index.row(i))?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.buf.len() - self.pos < n {
            return Err(IndexError::Truncated {
                offset: self.buf.len() as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, IndexError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

struct Header {
    dim: usize,
    count: usize,
}

fn read_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<Header, IndexError> {
    if r.buf.len() < 4 && magic.starts_with(r.buf) {
        return Err(IndexError::Truncated {
            offset: r.buf.len() as u64,
        });
    }
    if r.buf.len() < 4 || &r.buf[..4] != magic {
        return Err(IndexError::BadMagic);
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(IndexError::UnsupportedVersion(version));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    if dim == 0 {
        return Err(IndexError::Inconsistent("dim is zero".into()));
    }
    Ok(Header {
        dim,
        count: usize::try_from(count)
            .map_err(|_| IndexError::Inconsistent(format!("count {count} too large")))?,
    })
}

/// Reads `count` records, returning ids and the row-major matrix.
fn read_records(r: &mut Reader<'_>, header: &Header) -> Result<(Vec<String>, Vec<f32>), IndexError> {
    // smallest possible record is an empty id plus the row
    let min_record = 2 + header.dim * 4;
    if header.count.saturating_mul(min_record) > r.remaining() {
        return Err(IndexError::Truncated {
            offset: r.buf.len() as u64,
        });
    }
    let mut ids = Vec::with_capacity(header.count);
    let mut seen = HashSet::with_capacity(header.count);
    let mut matrix = Vec::with_capacity(header.count * header.dim);
    for _ in 0..header.count {
        let len = r.u16()? as usize;
        let at = r.pos;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| IndexError::Inconsistent(format!("id at byte {at} is not UTF-8")))?
            .to_string();
        if !seen.insert(id.clone()) {
            return Err(IndexError::DuplicateId(id));
        }
        for _ in 0..header.dim {
            let at = r.pos;
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(IndexError::Inconsistent(format!("non-finite value at byte {at}")));
            }
            matrix.push(v);
        }
        ids.push(id);
    }
    if r.remaining() != 0 {
        return Err(IndexError::Inconsistent(format!(
            "{} trailing bytes after {} records",
            r.remaining(),
            header.count
        )));
    }
    Ok((ids, matrix))
}

pub fn decode_cemb(bytes: &[u8]) -> Result<EmbeddingTable, IndexError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = read_header(&mut r, CEMB_MAGIC)?;
    let (ids, matrix) = read_records(&mut r, &header)?;
    let entries = ids
        .into_iter()
        .zip(matrix.chunks_exact(header.dim))
        .map(|(id, row)| Ok((id, EmbeddingVector::new(row.to_vec())?)))
        .collect::<Result<_, IndexError>>()?;
    Ok(EmbeddingTable {
        dim: header.dim,
        entries,
    })
}

pub fn decode_index(bytes: &[u8]) -> Result<FusedIndex, IndexError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = read_header(&mut r, CIDX_MAGIC)?;
    let text_weight = r.f32()?;
    let image_weight = r.f32()?;
    let normalize = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(IndexError::Inconsistent(format!("normalize flag {other}"))),
    };
    r.take(7)?;
    let (ids, matrix) = read_records(&mut r, &header)?;
    let fusion = FusionConfig {
        text_weight,
        image_weight,
        normalize,
    };
    FusedIndex::from_rows(ids, matrix, header.dim, fusion)
}

pub fn read_cemb(path: impl AsRef<Path>) -> Result<EmbeddingTable, IndexError> {
    decode_cemb(&fs::read(path)?)
}

pub fn write_cemb(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<(), IndexError> {
    fs::write(path, encode_cemb(table)?)?;
    Ok(())
}

pub fn save_index(index: &FusedIndex, path: impl AsRef<Path>) -> Result<(), IndexError> {
    fs::write(path, encode_index(index)?)?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<FusedIndex, IndexError> {
    decode_index(&fs::read(path)?)
}
