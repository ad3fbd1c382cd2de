//! Source parsing and chunking.

mod chunk;
mod parse;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use chunk::chunk_document;
pub use parse::{parse_source, parse_text};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8")]
    Encoding { path: PathBuf },
    #[error("{path} contains no text")]
    EmptyDocument { path: PathBuf },
    #[error("invalid sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("no .txt source files under {path}")]
    NoSources { path: PathBuf },
    #[error("invalid chunking config: {0}")]
    InvalidConfig(String),
}

/// Half-open byte range `[start, end)` into a document's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    InterviewTranscript,
    Fieldnote,
    Diary,
    #[default]
    Other,
}

impl std::str::FromStr for DocumentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interview_transcript" | "interview" | "transcript" => Ok(Self::InterviewTranscript),
            "fieldnote" | "fieldnotes" => Ok(Self::Fieldnote),
            "diary" => Ok(Self::Diary),
            "other" => Ok(Self::Other),
            other => Err(format!("unknown document kind `{other}`")),
        }
    }
}

/// One speaker turn in a transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub corpus_id: String,
    pub source_path: String,
    pub kind: DocumentKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turns: Option<Vec<Turn>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub span: Span,
    pub token_count: usize,
}

impl Chunk {
    pub fn make_id(doc_id: &str, ordinal: usize) -> String {
        format!("{doc_id}#{ordinal}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkStrategy {
    #[default]
    TokenWindow,
    SpeakerTurn,
}

impl std::str::FromStr for ChunkStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token_window" => Ok(Self::TokenWindow),
            "speaker_turn" => Ok(Self::SpeakerTurn),
            other => Err(format!("unknown chunking strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    pub strategy: ChunkStrategy,
    pub max_chunk_tokens: usize,
    pub overlap_tokens: usize,
    pub min_chunk_tokens: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            strategy: ChunkStrategy::TokenWindow,
            max_chunk_tokens: 256,
            overlap_tokens: 32,
            min_chunk_tokens: 16,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.max_chunk_tokens == 0 {
            return Err(IngestError::InvalidConfig("max_chunk_tokens must be > 0".into()));
        }
        if self.overlap_tokens >= self.max_chunk_tokens {
            return Err(IngestError::InvalidConfig(format!(
                "overlap_tokens ({}) must be < max_chunk_tokens ({})",
                self.overlap_tokens, self.max_chunk_tokens
            )));
        }
        if self.min_chunk_tokens == 0 || self.min_chunk_tokens > self.max_chunk_tokens {
            return Err(IngestError::InvalidConfig(format!(
                "min_chunk_tokens ({}) must be in 1..={}",
                self.min_chunk_tokens, self.max_chunk_tokens
            )));
        }
        Ok(())
    }
}
