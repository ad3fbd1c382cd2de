//! Service configuration, read from TOML.
//!
//! ```toml
//! listen_addr = "127.0.0.1:8787"
//! data_dir = "data"
//! cors_allowed_origins = ["http://localhost:5173"]
//!
//! [embedder]
//! provider = "http_openai_compatible"
//! base_url = "http://127.0.0.1:8080"
//! model_id = "paraphrase-multilingual-mpnet-base-v2"
//!
//! [llm]
//! provider = "http_openai_compatible"
//! base_url = "http://127.0.0.1:11434"
//! model_id = "mistral:7b"
//!
//! [guards]
//! max_regens = 2
//! lexicon_path = "guards/lexicon.json"
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use si_core::guards::GuardSettings;
use si_core::index::HnswParams;
use si_core::llm::LlmConfig;
use si_core::{EmbedderConfig, IndexKind, RenderMode, RetrievalConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexSettings {
    pub kind: IndexKind,
    #[serde(flatten)]
    pub hnsw: HnswParams,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardConfig {
    #[serde(flatten)]
    pub settings: GuardSettings,
    pub lexicon_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub template_path: Option<PathBuf>,
    /// Defaults to chat messages for chat endpoints and the stubs.
    pub render_mode: Option<RenderMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen_addr: SocketAddr,
    pub data_dir: PathBuf,
    pub embedder: EmbedderConfig,
    pub llm: LlmConfig,
    pub retrieval: RetrievalConfig,
    pub index: IndexSettings,
    pub guards: GuardConfig,
    pub prompt: PromptConfig,
    pub cors_allowed_origins: Vec<String>,
    /// Directory of static UI assets served at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen_addr: SocketAddr::from(([127, 0, 0, 1], 8787)),
            data_dir: PathBuf::from("data"),
            embedder: EmbedderConfig::default(),
            llm: LlmConfig::default(),
            retrieval: RetrievalConfig::default(),
            index: IndexSettings::default(),
            guards: GuardConfig::default(),
            prompt: PromptConfig::default(),
            cors_allowed_origins: Vec::new(),
            ui_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads `path`, or `SI_CONFIG` when no path is given, or falls back to
    /// defaults. Environment overrides for the model servers are applied
    /// last.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let from_env = std::env::var_os("SI_CONFIG").filter(|v| !v.is_empty()).map(PathBuf::from);
        let cfg = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                Self::from_toml(&text, &p)?
            }
            None => Self::default(),
        };
        Ok(cfg.with_env())
    }

    pub fn with_env(mut self) -> Self {
        self.embedder = self.embedder.apply_env();
        self.llm = self.llm.apply_env();
        self
    }

    pub fn corpora_dir(&self) -> PathBuf {
        self.data_dir.join("corpora")
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }

    pub fn render_mode(&self) -> RenderMode {
        self.prompt.render_mode.unwrap_or(RenderMode::ChatMessages)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.embedder.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.llm.params.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.retrieval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.index.hnsw.m < 2 {
            return Err(ConfigError::Invalid("index.m must be >= 2".into()));
        }
        Ok(())
    }
}
