//! Per-residue embedding tables and receptor feature assembly.
//!
//! Embedding files are binary, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "VREMB001"
//! tag_len   u32       length of the model tag
//! tag       tag_len   UTF-8 model tag (e.g. "esm2_t12_35M", "onehot")
//! count     u32       number of rows
//! dim       u32       embedding width
//! row*      i64 residue index, then dim × f32
//! ```
//!
//! Nothing may follow the last row. Residue indices are unique within a
//! file and every value is finite. Rows are written in ascending residue
//! order, so writing a table read from a well-formed file reproduces it
//! byte for byte when the file was itself sorted.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::dataio::AminoAcid;
use crate::diffcore::checkpoint::write_atomic;
use crate::diffcore::Linear;
use crate::error::{Error, Result};
use crate::geometry::AtomCloud;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"VREMB001";
/// Width of assembled receptor features.
pub const FEATURE_WIDTH: usize = 256;
pub const ONE_HOT_TAG: &str = "onehot";

/// Structural problems in an embedding file or table.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated: {what} needs {needed} bytes at offset {offset}, {available} available")]
    Truncated { what: String, offset: usize, needed: usize, available: usize },
    #[error("{0} trailing bytes after the last row")]
    TrailingBytes(usize),
    #[error("model tag is not valid UTF-8")]
    BadTag,
    #[error("row for residue {residue} has {got} values, table dim is {dim}")]
    DimMismatch { residue: i64, dim: usize, got: usize },
    #[error("duplicate residue index {0}")]
    DuplicateResidue(i64),
    #[error("non-finite value in row for residue {0}")]
    NonFinite(i64),
}

/// Per-residue vectors of a fixed width, keyed by residue index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    model_tag: String,
    dim: usize,
    rows: BTreeMap<i64, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(model_tag: impl Into<String>, dim: usize) -> Self {
        Self { model_tag: model_tag.into(), dim, rows: BTreeMap::new() }
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, residue: i64, row: Vec<f32>) -> std::result::Result<(), EmbeddingError> {
        if row.len() != self.dim {
            return Err(EmbeddingError::DimMismatch { residue, dim: self.dim, got: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(residue));
        }
        if self.rows.contains_key(&residue) {
            return Err(EmbeddingError::DuplicateResidue(residue));
        }
        self.rows.insert(residue, row);
        Ok(())
    }

    pub fn get(&self, residue: i64) -> Option<&[f32]> {
        self.rows.get(&residue).map(Vec::as_slice)
    }

    /// Rows in ascending residue order.
    pub fn iter(&self) -> impl Iterator<Item = (i64, &[f32])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tag = self.model_tag.as_bytes();
        let mut out = Vec::with_capacity(24 + tag.len() + self.rows.len() * (8 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
        out.extend_from_slice(tag);
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (residue, row) in &self.rows {
            out.extend_from_slice(&residue.to_le_bytes());
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, EmbeddingError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != EMBEDDING_MAGIC {
            return Err(EmbeddingError::BadMagic);
        }
        let tag_len = r.u32("tag length")? as usize;
        let tag = std::str::from_utf8(r.take(tag_len, "model tag")?).map_err(|_| EmbeddingError::BadTag)?;
        let count = r.u32("row count")? as usize;
        let dim = r.u32("dim")? as usize;
        let mut table = Self::new(tag, dim);
        for k in 0..count {
            let residue = i64::from_le_bytes(r.take(8, &format!("residue index of row {k}"))?.try_into().expect("8 bytes"));
            let raw = r.take(4 * dim, &format!("values of row {k} (residue {residue})"))?;
            let row = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            table.insert(residue, row)?;
        }
        if r.pos != bytes.len() {
            return Err(EmbeddingError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|source| Error::Embedding { path: path.to_path_buf(), source })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], EmbeddingError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(EmbeddingError::Truncated { what: what.to_string(), offset: self.pos, needed: n, available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, EmbeddingError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Source of per-residue vectors.
pub trait ResidueLookup {
    fn dim(&self) -> usize;
    fn lookup(&self, residue: i64) -> Option<&[f32]>;
}

impl ResidueLookup for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, residue: i64) -> Option<&[f32]> {
        self.get(residue)
    }
}

/// Seeded linear map from embedding width to feature width. It is not
/// trained; downstream networks learn on top of it.
pub fn feature_projection(in_dim: usize, out_dim: usize, seed: u64) -> Linear {
    let mut rng = crate::diffcore::derived_rng(seed, 0x5052_4f4a);
    Linear::new(in_dim, out_dim, &mut rng)
}

fn project(rows: &Array2<f64>, proj: &Linear) -> Array2<f64> {
    let mut out = rows.dot(&proj.weight.t());
    out += &proj.bias;
    out
}

/// Replaces the pocket's features by the projected embedding of each atom's
/// residue. Positions and residue indices are kept.
pub fn assemble_receptor_features<L: ResidueLookup + ?Sized>(pocket: &AtomCloud, table: &L, proj: &Linear) -> Result<AtomCloud> {
    if proj.in_dim() != table.dim() {
        return Err(Error::shape(format!("projection expects width {}, embeddings have {}", proj.in_dim(), table.dim())));
    }
    let residues = pocket
        .residue_index()
        .ok_or_else(|| Error::invalid("pocket atoms carry no residue indices"))?;
    let mut raw = Array2::<f64>::zeros((pocket.len(), table.dim()));
    let mut missing = Vec::new();
    for (i, &res) in residues.iter().enumerate() {
        match table.lookup(res) {
            Some(row) => raw.row_mut(i).iter_mut().zip(row).for_each(|(d, &v)| *d = v as f64),
            None => missing.push(res),
        }
    }
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::MissingResidues(missing));
    }
    pocket.with_features(project(&raw, proj))
}

/// 20-wide amino-acid indicator rows.
pub fn one_hot(types: &[AminoAcid]) -> Array2<f64> {
    let mut out = Array2::zeros((types.len(), AminoAcid::COUNT));
    for (i, t) in types.iter().enumerate() {
        out[[i, t.index()]] = 1.0;
    }
    out
}

/// Parses residue labels (three- or one-letter codes) and one-hot encodes them.
pub fn one_hot_labels<S: AsRef<str>>(labels: &[S]) -> Result<Array2<f64>> {
    let types = labels.iter().map(|l| l.as_ref().parse()).collect::<Result<Vec<AminoAcid>>>()?;
    Ok(one_hot(&types))
}

/// Features for the no-embedding ablation: projected residue-type one-hots.
pub fn one_hot_fallback(pocket: &AtomCloud, types: &[AminoAcid], proj: &Linear) -> Result<AtomCloud> {
    if types.len() != pocket.len() {
        return Err(Error::shape(format!("{} residue types for {} pocket atoms", types.len(), pocket.len())));
    }
    if proj.in_dim() != AminoAcid::COUNT {
        return Err(Error::shape(format!("one-hot projection must take {} inputs", AminoAcid::COUNT)));
    }
    pocket.with_features(project(&one_hot(types), proj))
}

/// One-hot table in the embedding file format, keyed by residue index.
pub fn one_hot_table(residues: &[(i64, AminoAcid)]) -> std::result::Result<EmbeddingTable, EmbeddingError> {
    let mut table = EmbeddingTable::new(ONE_HOT_TAG, AminoAcid::COUNT);
    for &(res, aa) in residues {
        let mut row = vec![0.0f32; AminoAcid::COUNT];
        row[aa.index()] = 1.0;
        table.insert(res, row)?;
    }
    Ok(table)
}
