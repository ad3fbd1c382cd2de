//! Conversation state and its on-disk form.
//!
//! A session lives in `sessions/{id}.meta.json` (everything but the turns)
//! and `sessions/{id}.jsonl`, one [`ChatTurn`] per line, append-only.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::guards::GuardVerdict;
use crate::index::RetrievalHit;
use crate::llm::GenerationParams;
use crate::retrieval::RetrievalConfig;

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("session I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed session record in {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Interviewer,
    Interlocutor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    #[default]
    Active,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub hits: Vec<RetrievalHit>,
    #[serde(default)]
    pub guard_verdicts: Vec<GuardVerdict>,
    #[serde(default)]
    pub regen_count: u32,
    #[serde(default)]
    pub partial: bool,
    pub started_at: DateTime<Utc>,
    pub completed_at: DateTime<Utc>,
}

impl ChatTurn {
    pub fn interviewer(text: &str, at: DateTime<Utc>) -> Self {
        Self {
            role: Role::Interviewer,
            text: text.to_string(),
            hits: Vec::new(),
            guard_verdicts: Vec::new(),
            regen_count: 0,
            partial: false,
            started_at: at,
            completed_at: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub corpus_id: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub turns: Vec<ChatTurn>,
    pub generation_params: GenerationParams,
    pub retrieval_config: RetrievalConfig,
    pub prompt_template_id: String,
    #[serde(default)]
    pub status: SessionStatus,
}

impl Session {
    pub fn new(
        corpus_id: &str,
        generation_params: GenerationParams,
        retrieval_config: RetrievalConfig,
        prompt_template_id: &str,
    ) -> Self {
        Self {
            id: uuid::Uuid::new_v4().simple().to_string(),
            corpus_id: corpus_id.to_string(),
            created_at: Utc::now(),
            turns: Vec::new(),
            generation_params,
            retrieval_config,
            prompt_template_id: prompt_template_id.to_string(),
            status: SessionStatus::Active,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }

    pub fn interviewer_turns(&self) -> impl Iterator<Item = &ChatTurn> {
        self.turns.iter().filter(|t| t.role == Role::Interviewer)
    }

    /// Turns alternate interviewer / interlocutor, starting with the
    /// interviewer.
    pub fn alternates(turns: &[ChatTurn]) -> bool {
        turns.iter().enumerate().all(|(i, t)| {
            t.role
                == if i % 2 == 0 {
                    Role::Interviewer
                } else {
                    Role::Interlocutor
                }
        })
    }
}

/// Directory of persisted sessions.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.meta.json"))
    }

    pub fn transcript_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    /// Writes the session header (status, params). Turns are not touched.
    pub fn write_meta(&self, session: &Session) -> Result<(), SessionError> {
        let meta = Session {
            turns: Vec::new(),
            ..session.clone()
        };
        let path = self.meta_path(&session.id);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&meta).expect("session serializes"))?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn create(&self, session: &Session) -> Result<(), SessionError> {
        self.write_meta(session)?;
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.transcript_path(&session.id))?;
        Ok(())
    }

    /// Appends turns as JSON lines and syncs the file.
    pub fn append(&self, id: &str, turns: &[ChatTurn]) -> Result<(), SessionError> {
        let mut buf = Vec::new();
        for t in turns {
            serde_json::to_writer(&mut buf, t).expect("turn serializes");
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().append(true).open(self.transcript_path(id)).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                SessionError::NotFound(id.to_string())
            } else {
                e.into()
            }
        })?;
        f.write_all(&buf)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Session, SessionError> {
        let meta_path = self.meta_path(id);
        let meta = std::fs::read(&meta_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                SessionError::NotFound(id.to_string())
            } else {
                e.into()
            }
        })?;
        let mut session: Session = serde_json::from_slice(&meta).map_err(|e| SessionError::Malformed {
            path: meta_path,
            message: e.to_string(),
        })?;
        let path = self.transcript_path(id);
        let file = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(session),
            Err(e) => return Err(e.into()),
        };
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let turn = serde_json::from_str(&line).map_err(|e| SessionError::Malformed {
                path: path.clone(),
                message: format!("line {}: {e}", n + 1),
            })?;
            session.turns.push(turn);
        }
        Ok(session)
    }

    /// Ids of all stored sessions, sorted.
    pub fn list(&self) -> Result<Vec<String>, SessionError> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()
                    .and_then(|n| n.strip_suffix(".meta.json"))
                    .map(String::from)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}
