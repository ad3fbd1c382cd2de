//! HTTP service and command-line front end for the interlocutor engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod state;

use std::sync::Arc;

use axum::Router;
use tokio::net::TcpListener;

pub use api::router;
pub use config::ServiceConfig;
pub use state::{AppState, EngineParts, StateError};

pub fn app(state: Arc<AppState>) -> Router {
    api::router(state)
}

/// Serves `state` on `listener` until `shutdown` resolves, then waits for
/// in-flight turns so their transcripts are complete on disk.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = app(state.clone());
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    state.drain().await;
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}
