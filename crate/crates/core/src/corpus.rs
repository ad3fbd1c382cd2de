//! Ingested corpora: building from source files and the on-disk layout.
//!
//! A corpus directory holds
//!
//! ```text
//! manifest.json   written last; its presence marks the corpus complete
//! docs.jsonl      one Document per line
//! chunks.jsonl    one Chunk per line, in index order
//! vectors.bin     chunk embeddings, see index::store
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::embed::{EmbedError, Embedder};
use crate::index::{build_index, store, HnswParams, IndexEntry, IndexError, IndexKind, VectorIndex};
use crate::ingest::{chunk_document, parse_source, Chunk, ChunkingConfig, Document, DocumentKind, IngestError};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const DOCS: &str = "docs.jsonl";
const CHUNKS: &str = "chunks.jsonl";
const VECTORS: &str = "vectors.bin";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("no complete corpus at {0} (manifest.json missing)")]
    NotFound(PathBuf),
    #[error("{} source file(s) failed to ingest: {}", .0.len(), summarize(.0))]
    IngestFailed(Vec<(PathBuf, IngestError)>),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("corpus data is inconsistent: {0}")]
    Corrupt(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn summarize(failures: &[(PathBuf, IngestError)]) -> String {
    failures
        .iter()
        .map(|(p, e)| format!("{}: {e}", p.display()))
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub display_name: String,
    pub embedding_model_id: String,
    pub embedding_dim: usize,
    pub chunking: ChunkingConfig,
    pub document_count: usize,
    pub chunk_count: usize,
    pub created_at: DateTime<Utc>,
    pub format_version: u32,
}

/// A loaded corpus: documents, chunks and the vector index over them.
#[derive(Debug, Clone)]
pub struct Corpus {
    manifest: CorpusManifest,
    docs: BTreeMap<String, Document>,
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
    index: VectorIndex,
}

impl Corpus {
    /// Chunks and embeds `docs` in memory. Chunks keep the order of `docs`.
    pub async fn build(
        corpus_id: &str,
        docs: Vec<Document>,
        chunking: &ChunkingConfig,
        embedder: &Embedder,
    ) -> Result<Self, CorpusError> {
        chunking.validate()?;
        let chunks: Vec<Chunk> = docs
            .iter()
            .map(|d| chunk_document(d, chunking))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        Self::assemble(corpus_id, docs, chunks, chunking, embedder).await
    }

    async fn assemble(
        corpus_id: &str,
        docs: Vec<Document>,
        chunks: Vec<Chunk>,
        chunking: &ChunkingConfig,
        embedder: &Embedder,
    ) -> Result<Self, CorpusError> {
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            embedder.embed_batch(&texts).await?
        };
        let entries: Vec<IndexEntry> = chunks
            .iter()
            .zip(vectors)
            .map(|(c, v)| IndexEntry {
                chunk_id: c.id.clone(),
                vector: v,
            })
            .collect();
        let manifest = CorpusManifest {
            corpus_id: corpus_id.to_string(),
            display_name: corpus_id.to_string(),
            embedding_model_id: embedder.model_id().to_string(),
            embedding_dim: entries.first().map_or(0, |e| e.vector.dim()),
            chunking: *chunking,
            document_count: docs.len(),
            chunk_count: chunks.len(),
            created_at: Utc::now(),
            format_version: CORPUS_FORMAT_VERSION,
        };
        let index = build_index(&entries, IndexKind::Flat, &HnswParams::default())?;
        Self::from_parts(manifest, docs, chunks, index)
    }

    fn from_parts(
        manifest: CorpusManifest,
        docs: Vec<Document>,
        chunks: Vec<Chunk>,
        index: VectorIndex,
    ) -> Result<Self, CorpusError> {
        let mut doc_map = BTreeMap::new();
        for d in docs {
            let id = d.id.clone();
            if doc_map.insert(id.clone(), d).is_some() {
                return Err(CorpusError::Corrupt(format!("duplicate document id `{id}`")));
            }
        }
        let by_id = chunks.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
        Ok(Self {
            manifest,
            docs: doc_map,
            chunks,
            by_id,
            index,
        })
    }

    /// Loads a corpus written by [`ingest_corpus`] and builds an index of
    /// the requested kind over its stored vectors.
    pub fn open(dir: &Path, kind: IndexKind, params: &HnswParams) -> Result<Self, CorpusError> {
        let manifest_path = dir.join(MANIFEST);
        let raw = match std::fs::read(&manifest_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CorpusError::NotFound(dir.to_path_buf()))
            }
            Err(e) => return Err(io_err(&manifest_path)(e)),
        };
        let manifest: CorpusManifest = serde_json::from_slice(&raw)
            .map_err(|e| CorpusError::Corrupt(format!("manifest.json: {e}")))?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(CorpusError::Corrupt(format!(
                "unsupported corpus format version {}",
                manifest.format_version
            )));
        }
        let docs: Vec<Document> = read_jsonl(&dir.join(DOCS))?;
        let chunks: Vec<Chunk> = read_jsonl(&dir.join(CHUNKS))?;
        let entries = store::load(&dir.join(VECTORS))?;

        if docs.len() != manifest.document_count {
            return Err(CorpusError::Corrupt(format!(
                "manifest lists {} documents, docs.jsonl has {}",
                manifest.document_count,
                docs.len()
            )));
        }
        if chunks.len() != manifest.chunk_count || entries.len() != chunks.len() {
            return Err(CorpusError::Corrupt(format!(
                "manifest lists {} chunks, chunks.jsonl has {}, vectors.bin has {}",
                manifest.chunk_count,
                chunks.len(),
                entries.len()
            )));
        }
        for (c, e) in chunks.iter().zip(&entries) {
            if c.id != e.chunk_id {
                return Err(CorpusError::Corrupt(format!(
                    "chunk order mismatch: `{}` in chunks.jsonl, `{}` in vectors.bin",
                    c.id, e.chunk_id
                )));
            }
            if e.vector.dim() != manifest.embedding_dim {
                return Err(CorpusError::Corrupt(format!(
                    "vector for `{}` has dim {}, manifest says {}",
                    c.id,
                    e.vector.dim(),
                    manifest.embedding_dim
                )));
            }
        }
        let index = build_index(&entries, kind, params)?;
        Self::from_parts(manifest, docs, chunks, index)
    }

    /// Writes the corpus to `dir`. Any existing manifest is removed first so
    /// an interrupted write never looks complete.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest_path = dir.join(MANIFEST);
        match std::fs::remove_file(&manifest_path) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&manifest_path)(e)),
        }
        write_jsonl(&dir.join(DOCS), self.docs.values())?;
        write_jsonl(&dir.join(CHUNKS), self.chunks.iter())?;
        store::save(&self.index.entries(), &dir.join(VECTORS))?;

        let tmp = dir.join("manifest.json.tmp");
        let body = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&tmp, body).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &manifest_path).map_err(io_err(&manifest_path))?;
        Ok(())
    }

    /// Same corpus with a freshly built index of another kind.
    pub fn reindex(&self, kind: IndexKind, params: &HnswParams) -> Result<Self, CorpusError> {
        Ok(Self {
            index: build_index(&self.index.entries(), kind, params)?,
            ..self.clone()
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn id(&self) -> &str {
        &self.manifest.corpus_id
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.by_id.get(id).map(|&i| &self.chunks[i])
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.docs.get(id)
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CorpusError::Corrupt(format!("{} line {}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl Iterator<Item = &'a T>,
) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("record serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    w.get_ref().sync_all().map_err(io_err(path))
}

/// Optional `<stem>.meta.json` next to a source file. `kind` selects the
/// document kind; every other key becomes document metadata.
fn read_sidecar(txt: &Path) -> Result<(DocumentKind, HashMap<String, String>), IngestError> {
    let path = txt.with_extension("meta.json");
    let raw = match std::fs::read_to_string(&path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok((DocumentKind::Other, HashMap::new()))
        }
        Err(source) => return Err(IngestError::Io { path, source }),
    };
    let map: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&raw).map_err(|e| IngestError::Sidecar {
            path: path.clone(),
            message: e.to_string(),
        })?;
    let mut kind = DocumentKind::Other;
    let mut hints = HashMap::new();
    for (k, v) in map {
        let v = match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        if k == "kind" {
            kind = v.parse().map_err(|message| IngestError::Sidecar {
                path: path.clone(),
                message,
            })?;
        } else {
            hints.insert(k, v);
        }
    }
    Ok((kind, hints))
}

fn source_files(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: e.path().unwrap_or(dir).to_path_buf(),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory loop")),
        })?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "txt") {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Document id for `file`: its path relative to the source root, without
/// the `.txt` extension, using `/` separators.
fn doc_id(root: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(root).unwrap_or(file).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Ingests every `.txt` file under `source_dir` into `out_dir`.
///
/// Fails without writing a manifest if any file cannot be parsed or
/// chunked, or if the embedder is unreachable.
pub async fn ingest_corpus(
    source_dir: &Path,
    corpus_id: &str,
    chunking: &ChunkingConfig,
    embedder: &Embedder,
    out_dir: &Path,
) -> Result<CorpusManifest, CorpusError> {
    chunking.validate()?;
    let files = source_files(source_dir)?;
    if files.is_empty() {
        let path = source_dir.to_path_buf();
        return Err(CorpusError::IngestFailed(vec![(
            path.clone(),
            IngestError::NoSources { path },
        )]));
    }

    type Parsed = Result<(Document, Vec<Chunk>), (PathBuf, IngestError)>;
    let results: Vec<Parsed> = files
        .par_iter()
        .map(|file| {
            let load = || {
                let (kind, mut hints) = read_sidecar(file)?;
                hints.entry("id".into()).or_insert_with(|| doc_id(source_dir, file));
                hints.insert("corpus_id".into(), corpus_id.to_string());
                let doc = parse_source(file, kind, &hints)?;
                let chunks = chunk_document(&doc, chunking)?;
                Ok((doc, chunks))
            };
            load().map_err(|e| (file.clone(), e))
        })
        .collect();

    let mut failures = Vec::new();
    let mut docs = Vec::with_capacity(results.len());
    let mut chunks = Vec::new();
    for r in results {
        match r {
            Ok((d, c)) => {
                docs.push(d);
                chunks.extend(c);
            }
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        return Err(CorpusError::IngestFailed(failures));
    }
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    chunks.sort_by(|a, b| a.doc_id.cmp(&b.doc_id).then(a.ordinal.cmp(&b.ordinal)));
    tracing::info!(
        corpus = corpus_id,
        documents = docs.len(),
        chunks = chunks.len(),
        "embedding chunks"
    );
    let corpus = Corpus::assemble(corpus_id, docs, chunks, chunking, embedder).await?;
    corpus.save(out_dir)?;
    Ok(corpus.manifest.clone())
}
