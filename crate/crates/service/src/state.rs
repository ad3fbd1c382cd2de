//! Shared service state: loaded corpora, their engines and open sessions.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use si_core::guards::GuardLexicon;
use si_core::session::SessionError;
use si_core::{Corpus, CorpusError, Embedder, Engine, Generator, GuardSettings, PromptTemplate, Session, SessionStore};

use crate::config::ServiceConfig;

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("cannot use data directory {path}: {source}")]
    DataDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedder: {0}")]
    Embedder(#[from] si_core::EmbedError),
    #[error("model server: {0}")]
    Llm(#[from] si_core::LlmError),
    #[error("prompt template: {0}")]
    Prompt(#[from] si_core::prompt::PromptError),
    #[error("guard lexicon: {0}")]
    Lexicon(#[from] si_core::guards::GuardError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("corpus `{0}` not found")]
    UnknownCorpus(String),
    #[error("corpus `{id}` was embedded with `{corpus}`, the service embedder is `{service}`")]
    ModelMismatch { id: String, corpus: String, service: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// A session as seen by the API. `live` is held for the whole of a turn;
/// `published` is what readers see and only changes once a turn is done.
pub struct SessionSlot {
    pub live: Arc<tokio::sync::Mutex<Session>>,
    published: RwLock<Session>,
}

impl SessionSlot {
    fn new(session: Session) -> Self {
        Self {
            published: RwLock::new(session.clone()),
            live: Arc::new(tokio::sync::Mutex::new(session)),
        }
    }

    pub fn snapshot(&self) -> Session {
        self.published.read().unwrap().clone()
    }

    pub fn publish(&self, session: &Session) {
        *self.published.write().unwrap() = session.clone();
    }
}

/// Everything needed to build an engine for a corpus.
pub struct EngineParts {
    pub embedder: Embedder,
    pub generator: Arc<dyn Generator>,
    pub template: PromptTemplate,
    pub lexicon: GuardLexicon,
    pub guards: GuardSettings,
}

impl EngineParts {
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, StateError> {
        let template = match &cfg.prompt.template_path {
            Some(p) => PromptTemplate::from_file(p, cfg.render_mode())?,
            None => PromptTemplate::golden(cfg.render_mode()),
        };
        let lexicon = match &cfg.guards.lexicon_path {
            Some(p) => GuardLexicon::load(p)?,
            None => GuardLexicon::builtin(),
        };
        lexicon.validate(&cfg.guards.settings)?;
        Ok(Self {
            embedder: Embedder::from_config(&cfg.embedder)?,
            generator: cfg.llm.build()?,
            template,
            lexicon,
            guards: cfg.guards.settings.clone(),
        })
    }

    pub fn engine(&self, corpus: Arc<Corpus>) -> Engine {
        Engine::new(corpus, self.embedder.clone(), self.generator.clone())
            .with_template(self.template.clone())
            .with_lexicon(self.lexicon.clone())
            .with_guards(self.guards.clone())
    }

    /// Opens the corpus in `dir` and checks it was embedded by the
    /// configured model.
    pub fn open_corpus(&self, dir: &Path, cfg: &ServiceConfig) -> Result<Corpus, StateError> {
        let corpus = Corpus::open(dir, cfg.index.kind, &cfg.index.hnsw)?;
        let m = corpus.manifest();
        if m.embedding_model_id != self.embedder.model_id() {
            return Err(StateError::ModelMismatch {
                id: m.corpus_id.clone(),
                corpus: m.embedding_model_id.clone(),
                service: self.embedder.model_id().to_string(),
            });
        }
        Ok(corpus)
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    parts: EngineParts,
    engines: RwLock<BTreeMap<String, Arc<Engine>>>,
    pub store: SessionStore,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    /// Prepares the data directory and loads every complete corpus under
    /// `data_dir/corpora`. Corpora that fail to load are logged and
    /// skipped.
    pub fn new(config: ServiceConfig, parts: EngineParts) -> Result<Self, StateError> {
        for dir in [config.corpora_dir(), config.sessions_dir()] {
            std::fs::create_dir_all(&dir).map_err(|source| StateError::DataDir { path: dir.clone(), source })?;
        }
        let probe = config.data_dir.join(".write-test");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|source| StateError::DataDir {
                path: config.data_dir.clone(),
                source,
            })?;
        let store = SessionStore::open(config.sessions_dir())?;
        let state = Self {
            config,
            parts,
            engines: RwLock::new(BTreeMap::new()),
            store,
            sessions: Mutex::new(HashMap::new()),
        };
        state.load_all();
        Ok(state)
    }

    fn load_all(&self) {
        let entries = match std::fs::read_dir(self.config.corpora_dir()) {
            Ok(e) => e,
            Err(e) => {
                tracing::error!(error = %e, "cannot list corpora");
                return;
            }
        };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
        dirs.sort();
        for dir in dirs {
            match self.parts.open_corpus(&dir, &self.config) {
                Ok(corpus) => {
                    tracing::info!(corpus = corpus.id(), chunks = corpus.chunks().len(), "corpus loaded");
                    self.install(corpus);
                }
                Err(StateError::Corpus(CorpusError::NotFound(_))) => {
                    tracing::warn!(dir = %dir.display(), "skipping incomplete corpus (no manifest)");
                }
                Err(e) => tracing::error!(dir = %dir.display(), error = %e, "skipping corpus"),
            }
        }
    }

    fn install(&self, corpus: Corpus) -> Arc<Engine> {
        let id = corpus.id().to_string();
        let engine = Arc::new(self.parts.engine(Arc::new(corpus)));
        self.engines.write().unwrap().insert(id, engine.clone());
        engine
    }

    pub fn engines(&self) -> Vec<Arc<Engine>> {
        self.engines.read().unwrap().values().cloned().collect()
    }

    pub fn engine(&self, corpus_id: &str) -> Option<Arc<Engine>> {
        self.engines.read().unwrap().get(corpus_id).cloned()
    }

    /// Re-reads a corpus from `data_dir/corpora/{id}` and swaps it in.
    /// Turns already running keep the engine they started with.
    pub fn reload(&self, corpus_id: &str) -> Result<Arc<Engine>, StateError> {
        if corpus_id.is_empty() || corpus_id.contains(['/', '\\']) || corpus_id.starts_with('.') {
            return Err(StateError::UnknownCorpus(corpus_id.to_string()));
        }
        let dir = self.config.corpora_dir().join(corpus_id);
        if !dir.is_dir() {
            return Err(StateError::UnknownCorpus(corpus_id.to_string()));
        }
        let corpus = self.parts.open_corpus(&dir, &self.config)?;
        if corpus.id() != corpus_id {
            return Err(StateError::UnknownCorpus(corpus_id.to_string()));
        }
        Ok(self.install(corpus))
    }

    pub fn new_session(&self, session: Session) -> Result<Arc<SessionSlot>, StateError> {
        self.store.create(&session)?;
        let id = session.id.clone();
        let slot = Arc::new(SessionSlot::new(session));
        self.sessions.lock().unwrap().insert(id, slot.clone());
        Ok(slot)
    }

    /// The in-memory session, loading it from disk on first access.
    pub fn session(&self, id: &str) -> Result<Arc<SessionSlot>, StateError> {
        if let Some(h) = self.sessions.lock().unwrap().get(id) {
            return Ok(h.clone());
        }
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(SessionError::NotFound(id.to_string()).into());
        }
        let session = self.store.load(id)?;
        let mut map = self.sessions.lock().unwrap();
        Ok(map
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(SessionSlot::new(session)))
            .clone())
    }

    pub fn session_ids(&self) -> Result<Vec<String>, StateError> {
        Ok(self.store.list()?)
    }

    /// Waits for every in-flight turn to finish.
    pub async fn drain(&self) {
        let slots: Vec<Arc<SessionSlot>> = self.sessions.lock().unwrap().values().cloned().collect();
        for s in slots {
            drop(s.live.lock().await);
        }
    }

    pub fn template_id(&self) -> &str {
        self.parts.template.id()
    }
}
