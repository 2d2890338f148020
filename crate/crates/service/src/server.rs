//! Running service: HTTP listener, background review lane, graceful shutdown.

use std::future::Future;
use std::sync::Arc;

use tokio::net::TcpListener;
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;
use tracing::{info, warn};

use crate::api::{router, AppState};
use crate::app::App;
use crate::error::ServiceError;

/// Binds the configured address, mapping a taken port to its own error.
pub async fn bind(app: &App) -> Result<TcpListener, ServiceError> {
    let addr = app.config.listen_addr()?;
    TcpListener::bind(addr).await.map_err(|source| ServiceError::PortInUse { addr, source })
}

fn review_worker(app: Arc<App>, notify: Arc<Notify>, mut stop: watch::Receiver<bool>) -> JoinHandle<()> {
    tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = notify.notified() => {}
                _ = stop.changed() => return,
            }
            loop {
                let engine = app.engine.clone();
                match tokio::task::spawn_blocking(move || engine.run_next_review()).await {
                    Ok(Some(summary)) => info!(session = ?summary.session_id, mutations = summary.mutations(), "review done"),
                    Ok(None) => break,
                    Err(e) => {
                        warn!(error = %e, "review task failed");
                        break;
                    }
                }
            }
        }
    })
}

/// Serves until `shutdown` resolves, then finishes queued reviews and
/// persists the store and session state.
pub async fn serve<F>(app: Arc<App>, listener: TcpListener, shutdown: F) -> Result<(), ServiceError>
where
    F: Future<Output = ()> + Send + 'static,
{
    let (stop_tx, stop_rx) = watch::channel(false);
    let notify = Arc::new(Notify::new());
    let lanes = app.config.server.review_parallelism;
    let workers: Vec<JoinHandle<()>> = (0..lanes).map(|_| review_worker(app.clone(), notify.clone(), stop_rx.clone())).collect();
    if !app.engine.pending_reviews().is_empty() {
        notify.notify_one();
    }
    let state = AppState { app: app.clone(), reviews: notify, shutdown: stop_rx };
    info!(addr = ?listener.local_addr().ok(), lanes, "serving");
    let signal = async move {
        shutdown.await;
        let _ = stop_tx.send(true);
    };
    axum::serve(listener, router(state)).with_graceful_shutdown(signal).await?;
    for w in workers {
        let _ = w.await;
    }
    let drained = app.clone();
    let done = tokio::task::spawn_blocking(move || {
        let left = drained.engine.run_pending_reviews().len();
        drained.persist().map(|_| left)
    })
    .await
    .map_err(|e| ServiceError::Startup(e.to_string()))??;
    info!(reviews_finished = done, "shut down");
    Ok(())
}
