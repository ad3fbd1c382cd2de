//! The `si` command line.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use si_core::guard_eval::{evaluate, load_fixtures, parse_fixtures, BUILTIN_FIXTURES};
use si_core::guards::GuardLexicon;
use si_core::index::HnswParams;
use si_core::ingest::ChunkStrategy;
use si_core::{ingest_corpus, ChunkingConfig, Corpus, CorpusError, GuardSettings, IndexKind, Session, SessionStore, TurnEvent};
use tokio::net::TcpListener;

use crate::config::{ConfigError, ServiceConfig};
use crate::state::{AppState, EngineParts, StateError};

#[derive(Debug, Parser)]
#[command(name = "si", version, about = "Chat with an ethnographic corpus")]
pub struct Cli {
    /// TOML config file (falls back to SI_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir` from the config.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Disable the dialogue guards.
    #[arg(long, global = true)]
    pub no_guards: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse, chunk and embed a directory of .txt files into a corpus.
    Ingest(IngestArgs),
    /// Inspect a corpus index and optionally benchmark flat against HNSW.
    Index(IndexArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Converse with a corpus in the terminal, one question per line.
    Chat(ChatArgs),
    /// Score the guards against a labelled fixture set.
    GuardsEval(GuardsEvalArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of source .txt files (with optional .meta.json sidecars).
    #[arg(long)]
    pub source: PathBuf,
    /// Corpus id.
    #[arg(long)]
    pub corpus: String,
    /// Output directory; defaults to `{data_dir}/corpora/{corpus}`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "token_window")]
    pub strategy: ChunkStrategy,
    #[arg(long, default_value_t = 256)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 32)]
    pub overlap: usize,
    #[arg(long, default_value_t = 16)]
    pub min_tokens: usize,
    /// Embedding server base URL; switches to the HTTP embedder.
    #[arg(long)]
    pub embed_url: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
    /// Dimension of the stub embedder.
    #[arg(long)]
    pub stub_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Corpus id or directory.
    #[arg(long)]
    pub corpus: String,
    #[arg(long, default_value = "flat")]
    pub kind: IndexKind,
    /// Compare HNSW against the flat index on random unit queries.
    #[arg(long)]
    pub bench: bool,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub listen: Option<SocketAddr>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// Corpus id or directory.
    #[arg(long)]
    pub corpus: String,
}

#[derive(Debug, Args)]
pub struct GuardsEvalArgs {
    /// Fixture file; defaults to the shipped set.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Lexicon file; defaults to the configured or builtin lexicon.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("{0}")]
    Corpus(#[from] CorpusErrorReport),
    #[error("{0}")]
    Engine(#[from] si_core::EngineError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

/// A corpus error with every failed source file listed.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CorpusErrorReport(String);

impl From<CorpusError> for CorpusErrorReport {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::IngestFailed(failures) => {
                let mut s = format!("ingestion failed for {} file(s):", failures.len());
                for (path, err) in failures {
                    s.push_str(&format!("\n  {}: {err}", path.display()));
                }
                Self(s)
            }
            other => Self(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::Corpus(e.into())
    }
}

impl Cli {
    pub fn load_config(&self) -> Result<ServiceConfig, CliError> {
        let mut cfg = ServiceConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if self.no_guards {
            cfg.guards.settings = GuardSettings::disabled();
        }
        Ok(cfg)
    }
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.load_config()?;
    match &cli.command {
        Command::Ingest(a) => ingest(a, cfg, cli.json).await,
        Command::Index(a) => index(a, &cfg, cli.json),
        Command::Serve(a) => serve(a, cfg).await,
        Command::Chat(a) => chat(a, cfg, cli.json).await,
        Command::GuardsEval(a) => guards_eval(a, &cfg, cli.json),
    }
}

fn corpus_dir(arg: &str, cfg: &ServiceConfig) -> PathBuf {
    let p = Path::new(arg);
    if p.is_dir() && p.join("manifest.json").is_file() {
        p.to_path_buf()
    } else {
        cfg.corpora_dir().join(arg)
    }
}

async fn ingest(a: &IngestArgs, mut cfg: ServiceConfig, json_out: bool) -> Result<(), CliError> {
    if let Some(url) = &a.embed_url {
        cfg.embedder.base_url = Some(url.clone());
        cfg.embedder.provider = si_core::embed::EmbedProviderKind::HttpOpenaiCompatible;
    }
    if let Some(m) = &a.embed_model {
        cfg.embedder.model_id = m.clone();
    }
    if let Some(d) = a.stub_dim {
        cfg.embedder.stub_dim = d;
    }
    let embedder = si_core::Embedder::from_config(&cfg.embedder).map_err(StateError::from)?;
    let chunking = ChunkingConfig {
        strategy: a.strategy,
        max_chunk_tokens: a.max_tokens,
        overlap_tokens: a.overlap,
        min_chunk_tokens: a.min_tokens,
    };
    let out = a.out.clone().unwrap_or_else(|| cfg.corpora_dir().join(&a.corpus));
    let started = Instant::now();
    let manifest = ingest_corpus(&a.source, &a.corpus, &chunking, &embedder, &out).await?;
    if json_out {
        println!("{}", json!({"manifest": manifest, "out": out, "elapsed_ms": started.elapsed().as_millis()}));
    } else {
        println!(
            "ingested `{}`: {} documents, {} chunks, dim {} ({}) into {} in {:.2}s",
            manifest.corpus_id,
            manifest.document_count,
            manifest.chunk_count,
            manifest.embedding_dim,
            manifest.embedding_model_id,
            out.display(),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn median_ms(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn index(a: &IndexArgs, cfg: &ServiceConfig, json_out: bool) -> Result<(), CliError> {
    let dir = corpus_dir(&a.corpus, cfg);
    let started = Instant::now();
    let corpus = Corpus::open(&dir, a.kind, &cfg.index.hnsw)?;
    let load_ms = started.elapsed().as_secs_f64() * 1e3;
    let m = corpus.manifest().clone();
    if !a.bench {
        if json_out {
            println!("{}", json!({"manifest": m, "kind": a.kind, "load_ms": load_ms}));
        } else {
            println!(
                "`{}`: {} chunks, dim {}, {:?} index loaded in {load_ms:.1} ms",
                m.corpus_id, m.chunk_count, m.embedding_dim, a.kind
            );
        }
        return Ok(());
    }
    if corpus.index().is_empty() {
        return Err(CliError::Other("corpus has no vectors to benchmark".into()));
    }
    let flat = if a.kind == IndexKind::Flat {
        corpus
    } else {
        corpus.reindex(IndexKind::Flat, &HnswParams::default())?
    };
    let built = Instant::now();
    let hnsw = flat.reindex(IndexKind::Hnsw, &cfg.index.hnsw)?;
    let hnsw_build_ms = built.elapsed().as_secs_f64() * 1e3;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (mut r1, mut r10) = (0usize, 0usize);
    let (mut flat_ms, mut hnsw_ms) = (Vec::new(), Vec::new());
    let k = 10.min(flat.index().len());
    for _ in 0..a.queries {
        let q = random_unit(&mut rng, m.embedding_dim);
        let t = Instant::now();
        let exact = flat.index().query(&q, k).map_err(|e| CliError::Other(e.to_string()))?;
        flat_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        let approx = hnsw.index().query(&q, k).map_err(|e| CliError::Other(e.to_string()))?;
        hnsw_ms.push(t.elapsed().as_secs_f64() * 1e3);
        if approx.first().map(|h| &h.chunk_id) == exact.first().map(|h| &h.chunk_id) {
            r1 += 1;
        }
        r10 += approx.iter().filter(|h| exact.iter().any(|e| e.chunk_id == h.chunk_id)).count();
    }
    let n = a.queries.max(1) as f64;
    let recall1 = r1 as f64 / n;
    let recall10 = r10 as f64 / (n * k as f64);
    let report = json!({
        "corpus_id": m.corpus_id,
        "vectors": flat.index().len(),
        "dim": m.embedding_dim,
        "queries": a.queries,
        "k": k,
        "recall_at_1": recall1,
        "recall_at_k": recall10,
        "flat_median_ms": median_ms(flat_ms),
        "hnsw_median_ms": median_ms(hnsw_ms),
        "hnsw_build_ms": hnsw_build_ms,
    });
    if json_out {
        println!("{report}");
    } else {
        println!(
            "{} vectors, dim {}, {} queries\nrecall@1 {:.3}  recall@{k} {:.3}\nflat median {:.3} ms  hnsw median {:.3} ms  hnsw build {:.0} ms",
            report["vectors"], report["dim"], a.queries, recall1, recall10, report["flat_median_ms"].as_f64().unwrap_or(0.0),
            report["hnsw_median_ms"].as_f64().unwrap_or(0.0), hnsw_build_ms
        );
    }
    Ok(())
}

async fn serve(a: &ServeArgs, mut cfg: ServiceConfig) -> Result<(), CliError> {
    if let Some(l) = a.listen {
        cfg.listen_addr = l;
    }
    cfg.validate()?;
    let addr = cfg.listen_addr;
    let parts = EngineParts::from_config(&cfg)?;
    let state = Arc::new(AppState::new(cfg, parts)?);
    let listener = TcpListener::bind(addr).await.map_err(|source| CliError::Bind { addr, source })?;
    tracing::info!(addr = %listener.local_addr()?, corpora = state.engines().len(), "listening");
    crate::serve(listener, state, crate::shutdown_signal()).await?;
    Ok(())
}

async fn chat(a: &ChatArgs, cfg: ServiceConfig, json_out: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let parts = EngineParts::from_config(&cfg)?;
    let corpus = parts.open_corpus(&corpus_dir(&a.corpus, &cfg), &cfg)?;
    let corpus_id = corpus.id().to_string();
    let engine = parts.engine(Arc::new(corpus));
    std::fs::create_dir_all(cfg.sessions_dir())?;
    let store = SessionStore::open(cfg.sessions_dir()).map_err(StateError::from)?;
    let mut session = Session::new(
        &corpus_id,
        cfg.llm.params.clone(),
        cfg.retrieval.clone(),
        engine.template().id(),
    );
    store.create(&session).map_err(StateError::from)?;
    eprintln!("session {} on corpus `{corpus_id}`; one question per line, EOF to quit", session.id);

    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = line?;
        let question = line.trim();
        if question.is_empty() {
            continue;
        }
        let mut out = std::io::stdout();
        let mut sink = |ev: TurnEvent| match ev {
            TurnEvent::Token(t) if !json_out => {
                let _ = out.write_all(t.as_bytes());
                let _ = out.flush();
            }
            TurnEvent::Guards {
                attempt,
                verdicts,
                regenerating: true,
            } if !json_out => {
                let rules: Vec<&str> = verdicts.iter().filter(|v| v.triggered).map(|v| v.rule.key()).collect();
                eprintln!("\n[guards: {} on attempt {attempt}, regenerating]", rules.join(", "));
            }
            _ => {}
        };
        let turn = engine.run_turn(&mut session, Some(&store), question, &mut sink).await?;
        if json_out {
            println!("{}", serde_json::to_string(&turn).map_err(|e| CliError::Other(e.to_string()))?);
        } else {
            println!();
            let flagged: Vec<&str> = turn
                .guard_verdicts
                .iter()
                .filter(|v| v.triggered)
                .map(|v| v.rule.key())
                .collect();
            if !flagged.is_empty() {
                eprintln!("[flagged: {}]", flagged.join(", "));
            }
        }
    }
    Ok(())
}

fn guards_eval(a: &GuardsEvalArgs, cfg: &ServiceConfig, json_out: bool) -> Result<(), CliError> {
    let fixtures = match &a.fixtures {
        Some(p) => load_fixtures(p),
        None => parse_fixtures(BUILTIN_FIXTURES),
    }
    .map_err(StateError::from)?;
    let lexicon = match a.lexicon.as_ref().or(cfg.guards.lexicon_path.as_ref()) {
        Some(p) => GuardLexicon::load(p),
        None => Ok(GuardLexicon::builtin()),
    }
    .map_err(StateError::from)?;
    let report = evaluate(&fixtures, &lexicon, &cfg.guards.settings);
    if json_out {
        println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Other(e.to_string()))?);
        return Ok(());
    }
    println!(
        "fixtures {} ({} violating, {} clean)",
        report.fixtures, report.violating, report.clean
    );
    println!("precision {:.3}", report.precision);
    println!("recall {:.3}", report.recall);
    println!("lexicon-exact recall {:.3}", report.lexicon_exact_recall);
    println!("clean responses flagged {}", report.clean_flagged);
    for m in &report.mismatches {
        println!("  mismatch {}: expected {:?}, detected {:?}", m.id, m.expected, m.detected);
    }
    Ok(())
}
