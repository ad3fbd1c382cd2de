//! Retrieval-augmented chat engine that answers as a corpus respondent.
//!
//! Ethnographic source files are parsed and chunked ([`ingest`]), embedded
//! ([`embed`]) and stored in a cosine-similarity index ([`index`]). During a
//! conversation the latest interviewer utterance is used to retrieve context
//! ([`retrieval`]), which is rendered into the interlocutor prompt ([`prompt`])
//! and sent to a local model server ([`llm`]). Responses are checked against the
//! four interview rules and regenerated when they break one ([`guards`],
//! [`engine`]).

pub mod corpus;
pub mod embed;
pub mod engine;
pub mod guard_eval;
pub mod guards;
pub mod index;
pub mod ingest;
pub mod llm;
pub mod prompt;
pub mod retrieval;
pub mod session;
pub mod tokenize;

pub use corpus::{ingest_corpus, Corpus, CorpusError, CorpusManifest};
pub use embed::{EmbedError, Embedder, EmbedderConfig, EmbeddingVector};
pub use engine::{Engine, EngineError, TurnEvent};
pub use guards::{check_guards, GuardLexicon, GuardSettings, GuardVerdict, Rule};
pub use index::{build_index, IndexEntry, IndexError, IndexKind, RetrievalHit, VectorIndex};
pub use ingest::{chunk_document, parse_source, Chunk, ChunkingConfig, Document, IngestError};
pub use llm::{GenerationParams, GenerationResult, Generator, LlmError};
pub use prompt::{PromptBundle, PromptTemplate, RenderMode};
pub use retrieval::{retrieve, RetrievalConfig, RetrievedContext};
pub use session::{ChatTurn, Role, Session, SessionStore};
pub use tokenize::count_tokens;
