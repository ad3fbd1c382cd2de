//! Cosine-similarity index over unit vectors.
//!
//! Two implementations share the same storage: an exact flat scan, which is
//! the reference, and an HNSW graph for approximate search. Only the vectors
//! are persisted (see [`store`]); graphs are rebuilt on load.

mod flat;
mod hnsw;
pub mod store;

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingVector;

pub use hnsw::HnswParams;

/// Allowed deviation of a stored vector's norm from 1.
pub const INSERT_NORM_TOLERANCE: f32 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("duplicate chunk id `{0}`")]
    DuplicateId(String),
    #[error("vector for `{id}` has norm {norm}, expected 1")]
    NormViolation { id: String, norm: f32 },
    #[error("k must be >= 1")]
    InvalidK,
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt vector file: {0}")]
    CorruptFile(String),
    #[error("vector file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub score: f32,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    #[default]
    Flat,
    Hnsw,
}

impl std::str::FromStr for IndexKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(Self::Flat),
            "hnsw" => Ok(Self::Hnsw),
            other => Err(format!("unknown index kind `{other}`")),
        }
    }
}

/// Row-major vector storage shared by both index kinds.
#[derive(Debug, Clone)]
pub(crate) struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl VectorStore {
    pub(crate) fn len(&self) -> usize {
        self.ids.len()
    }

    pub(crate) fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result ordering: score descending, then chunk id ascending.
pub(crate) fn hit_order(store: &VectorStore, a: (f32, usize), b: (f32, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| store.id(a.1).cmp(store.id(b.1)))
}

fn to_hits(store: &VectorStore, scored: Vec<(f32, usize)>) -> Vec<RetrievalHit> {
    scored
        .into_iter()
        .enumerate()
        .map(|(rank, (score, i))| RetrievalHit {
            chunk_id: store.id(i).to_string(),
            score,
            rank,
        })
        .collect()
}

#[derive(Debug, Clone)]
enum Backend {
    Flat,
    Hnsw(hnsw::Graph),
}

/// An immutable, queryable index.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    store: VectorStore,
    backend: Backend,
}

/// Builds an index; HNSW construction is deterministic given `params.seed`
/// and the order of `entries`.
pub fn build_index(
    entries: &[IndexEntry],
    kind: IndexKind,
    params: &HnswParams,
) -> Result<VectorIndex, IndexError> {
    let dim = entries.first().map_or(0, |e| e.vector.dim());
    let mut seen = HashSet::with_capacity(entries.len());
    let mut ids = Vec::with_capacity(entries.len());
    let mut data = Vec::with_capacity(entries.len() * dim);
    for e in entries {
        if e.vector.dim() != dim {
            return Err(IndexError::DimMismatch {
                expected: dim,
                got: e.vector.dim(),
            });
        }
        let norm = e.vector.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > INSERT_NORM_TOLERANCE {
            return Err(IndexError::NormViolation {
                id: e.chunk_id.clone(),
                norm,
            });
        }
        if !seen.insert(e.chunk_id.as_str()) {
            return Err(IndexError::DuplicateId(e.chunk_id.clone()));
        }
        ids.push(e.chunk_id.clone());
        data.extend_from_slice(e.vector.as_slice());
    }
    let store = VectorStore { dim, ids, data };
    let backend = match kind {
        IndexKind::Flat => Backend::Flat,
        IndexKind::Hnsw => Backend::Hnsw(hnsw::Graph::build(&store, params)?),
    };
    Ok(VectorIndex { store, backend })
}

impl VectorIndex {
    pub fn kind(&self) -> IndexKind {
        match self.backend {
            Backend::Flat => IndexKind::Flat,
            Backend::Hnsw(_) => IndexKind::Hnsw,
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.len() == 0
    }

    /// Vector dimension, or `None` for an empty index.
    pub fn dim(&self) -> Option<usize> {
        (!self.is_empty()).then_some(self.store.dim)
    }

    /// Top-`k` hits for the unit query vector `q`, at most `len()` of them.
    pub fn query(&self, q: &[f32], k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if q.len() != self.store.dim {
            return Err(IndexError::DimMismatch {
                expected: self.store.dim,
                got: q.len(),
            });
        }
        let scored = match &self.backend {
            Backend::Flat => flat::top_k(&self.store, q, k),
            Backend::Hnsw(g) => g.search(&self.store, q, k),
        };
        Ok(to_hits(&self.store, scored))
    }

    /// The stored entries in insertion order.
    pub fn entries(&self) -> Vec<IndexEntry> {
        (0..self.store.len())
            .map(|i| IndexEntry {
                chunk_id: self.store.id(i).to_string(),
                vector: EmbeddingVector::from_raw(self.store.vector(i).to_vec()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::stub_embed;

    fn entry(id: &str, v: Vec<f32>) -> IndexEntry {
        IndexEntry {
            chunk_id: id.into(),
            vector: EmbeddingVector::from_raw(v),
        }
    }

    fn both() -> [IndexKind; 2] {
        [IndexKind::Flat, IndexKind::Hnsw]
    }

    #[test]
    fn empty_index_returns_nothing() {
        for kind in both() {
            let idx = build_index(&[], kind, &HnswParams::default()).unwrap();
            assert!(idx.query(&[1.0, 0.0], 3).unwrap().is_empty());
        }
    }

    #[test]
    fn single_entry_identity_and_orthogonal() {
        for kind in both() {
            let idx = build_index(&[entry("a#0", vec![1.0, 0.0])], kind, &HnswParams::default()).unwrap();
            let hit = &idx.query(&[1.0, 0.0], 1).unwrap()[0];
            assert_eq!((hit.chunk_id.as_str(), hit.rank), ("a#0", 0));
            assert!((hit.score - 1.0).abs() <= 1e-6);
            let hit = &idx.query(&[0.0, 1.0], 1).unwrap()[0];
            assert!(hit.score.abs() <= 1e-6);
        }
    }

    #[test]
    fn k_larger_than_index() {
        let entries: Vec<_> = (0..7).map(|i| entry(&format!("d#{i}"), stub_embed(&i.to_string(), 8).into_inner())).collect();
        for kind in both() {
            let idx = build_index(&entries, kind, &HnswParams::default()).unwrap();
            let hits = idx.query(stub_embed("q", 8).as_slice(), 50).unwrap();
            assert_eq!(hits.len(), 7);
            assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
            assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let v = stub_embed("same", 16).into_inner();
        let entries = [entry("b#0", v.clone()), entry("a#0", v.clone())];
        for kind in both() {
            let idx = build_index(&entries, kind, &HnswParams::default()).unwrap();
            let hits = idx.query(&v, 1).unwrap();
            assert_eq!(hits[0].chunk_id, "a#0");
        }
    }

    #[test]
    fn build_errors() {
        let p = HnswParams::default();
        let dim = build_index(&[entry("a", vec![1.0, 0.0]), entry("b", vec![1.0])], IndexKind::Flat, &p);
        assert!(matches!(dim, Err(IndexError::DimMismatch { expected: 2, got: 1 })));
        let dup = build_index(&[entry("a", vec![1.0, 0.0]), entry("a", vec![0.0, 1.0])], IndexKind::Flat, &p);
        assert!(matches!(dup, Err(IndexError::DuplicateId(id)) if id == "a"));
        let norm = build_index(&[entry("a", vec![1.0, 1.0])], IndexKind::Flat, &p);
        assert!(matches!(norm, Err(IndexError::NormViolation { .. })));
    }

    #[test]
    fn query_errors() {
        let idx = build_index(&[entry("a", vec![1.0, 0.0])], IndexKind::Flat, &HnswParams::default()).unwrap();
        assert!(matches!(idx.query(&[1.0, 0.0, 0.0], 1), Err(IndexError::DimMismatch { .. })));
        assert!(matches!(idx.query(&[1.0, 0.0], 0), Err(IndexError::InvalidK)));
    }
}
