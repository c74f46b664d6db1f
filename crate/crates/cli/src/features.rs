//! Receptor feature sources for the pipeline: per-residue embeddings when
//! given, projected residue-type one-hots otherwise.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vrdiff::dataio::{AminoAcid, ComplexRecord};
use vrdiff::embeddings::{feature_projection, EmbeddingTable};
use vrdiff::training::{prepare_complex, FeatureSource, PreparedComplex};

use crate::error::{CliError, CliResult};

/// Fixed seed of the frozen projection to the receptor feature width.
pub const PROJECTION_SEED: u64 = 0x5652_5052;

/// What a checkpoint was trained on; later commands must match it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: String,
    pub dim: usize,
    pub model_tag: Option<String>,
    pub projection_seed: u64,
}

impl FeatureSpec {
    pub fn from_metadata(meta: &Value) -> CliResult<Self> {
        let v = meta.get("features").cloned().ok_or_else(|| CliError::Validation("checkpoint lacks feature metadata".into()))?;
        Ok(serde_json::from_value(v)?)
    }

    /// Same kind and width; the model tag only has to match when both name one.
    pub fn ensure_compatible(&self, other: &FeatureSpec) -> CliResult<()> {
        let tags_clash = matches!((&self.model_tag, &other.model_tag), (Some(a), Some(b)) if a != b);
        if self.kind != other.kind || self.dim != other.dim || tags_clash {
            return Err(vrdiff::Error::Checkpoint(format!(
                "checkpoint was trained on {} features of width {}, inputs give {} features of width {}",
                self.kind, self.dim, other.kind, other.dim
            ))
            .into());
        }
        Ok(())
    }
}

pub enum ReceptorFeatures {
    OneHot,
    Shared(EmbeddingTable),
    PerComplex(BTreeMap<String, EmbeddingTable>),
}

impl ReceptorFeatures {
    /// A file applies to every complex; a directory must hold
    /// `<id>.vremb` for each record. All tables must share a width.
    pub fn load(path: Option<&Path>, records: &[ComplexRecord]) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(ReceptorFeatures::OneHot);
        };
        if path.is_file() {
            return Ok(ReceptorFeatures::Shared(EmbeddingTable::read(path)?));
        }
        let missing: Vec<&str> =
            records.iter().filter(|r| !path.join(format!("{}.vremb", r.id)).is_file()).map(|r| r.id.as_str()).collect();
        if !missing.is_empty() {
            return Err(CliError::Config(format!(
                "embedding directory {} has no file for complexes {}",
                path.display(),
                missing.join(", ")
            )));
        }
        let mut tables = BTreeMap::new();
        for r in records {
            let table = EmbeddingTable::read(&path.join(format!("{}.vremb", r.id)))?;
            tables.insert(r.id.clone(), table);
        }
        let mut dims = tables.values().map(|t| (t.dim(), t.model_tag().to_string()));
        if let Some(first) = dims.next() {
            if let Some(other) = dims.find(|d| *d != first) {
                return Err(CliError::Validation(format!(
                    "embedding files disagree: {} of width {} vs {} of width {}",
                    first.1, first.0, other.1, other.0
                )));
            }
        }
        Ok(ReceptorFeatures::PerComplex(tables))
    }

    pub fn spec(&self) -> FeatureSpec {
        let (kind, dim, tag) = match self {
            ReceptorFeatures::OneHot => ("onehot", AminoAcid::ALL.len(), None),
            ReceptorFeatures::Shared(t) => ("embeddings", t.dim(), Some(t.model_tag().to_string())),
            ReceptorFeatures::PerComplex(m) => match m.values().next() {
                Some(t) => ("embeddings", t.dim(), Some(t.model_tag().to_string())),
                None => ("embeddings", 0, None),
            },
        };
        FeatureSpec { kind: kind.into(), dim, model_tag: tag, projection_seed: PROJECTION_SEED }
    }

    /// Pocket selection, features and centering for every record.
    pub fn prepare(
        &self,
        records: &[ComplexRecord],
        spec: &FeatureSpec,
        pocket_atoms: usize,
        width: usize,
    ) -> CliResult<Vec<PreparedComplex>> {
        let proj = feature_projection(spec.dim, width, spec.projection_seed);
        records
            .iter()
            .map(|r| {
                let source = match self {
                    ReceptorFeatures::OneHot => FeatureSource::OneHot(&proj),
                    ReceptorFeatures::Shared(t) => FeatureSource::Embeddings(t, &proj),
                    ReceptorFeatures::PerComplex(m) => FeatureSource::Embeddings(&m[&r.id], &proj),
                };
                prepare_complex(r, pocket_atoms, source).map_err(CliError::from)
            })
            .collect()
    }
}
