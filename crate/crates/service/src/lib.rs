//! HTTP+JSON annotation service.
//!
//! A session wraps one active learning loop whose oracle is a human. The
//! service hands out the current batch of triplet queries, records answers in
//! a synced append-only log before acknowledging them, and retrains on the
//! blocking pool once the batch is complete.
//!
//! | method | path | |
//! |---|---|---|
//! | `POST` | `/sessions` | create a session from a [`SessionConfig`] |
//! | `GET` | `/sessions/{id}/pending` | unanswered queries of the current batch |
//! | `POST` | `/sessions/{id}/answers` | `{"query_id": "...", "ordering": "j" \| "k"}` |
//! | `GET` | `/sessions/{id}/status` | round, labeled count, latest TGA, status |

mod api;
pub mod session;

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

pub use api::router;
pub use session::{Ack, LabelLogEntry, PendingView, QueryView, Session, SessionConfig, Status, StatusView};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("query {0} is not pending")]
    QueryNotFound(String),
    #[error("query {0} was already answered")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("corrupt session data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Core(#[from] decorr_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Registry of sessions stored under `<data_dir>/sessions/<id>/`.
pub struct Service {
    root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl Service {
    /// Opens the data directory and recovers every session in it. Sessions
    /// whose batch was fully answered before a restart resume training, so
    /// this must run inside a Tokio runtime.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Arc<Self>, ServiceError> {
        let root = data_dir.as_ref().join("sessions");
        std::fs::create_dir_all(&root)?;
        let mut sessions = HashMap::new();
        let mut jobs = Vec::new();
        for entry in std::fs::read_dir(&root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let id = entry.file_name().to_string_lossy().into_owned();
            let (session, job) = Session::recover(id.clone(), entry.path())?;
            let session = Arc::new(session);
            tracing::info!(session = %id, "recovered session");
            if let Some(job) = job {
                jobs.push((session.clone(), job));
            }
            sessions.insert(id, session);
        }
        for (session, job) in jobs {
            session::spawn_training(session, job);
        }
        Ok(Arc::new(Self {
            root,
            sessions: RwLock::new(sessions),
        }))
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_string()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    /// Creates and registers a session. Blocking: materializes the dataset
    /// and selects the initial pool.
    pub fn create(&self, config: SessionConfig) -> Result<Arc<Session>, ServiceError> {
        let id = loop {
            let candidate = format!("{:016x}", rand::random::<u64>());
            if !self.root.join(&candidate).exists() {
                break candidate;
            }
        };
        let dir = self.root.join(&id);
        let (session, job) = match Session::create(id.clone(), dir.clone(), config) {
            Ok(created) => created,
            Err(e) => {
                let _ = std::fs::remove_dir_all(&dir);
                return Err(e);
            }
        };
        let session = Arc::new(session);
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, session.clone());
        if let Some(job) = job {
            session::spawn_training(session.clone(), job);
        }
        Ok(session)
    }
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<Service>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
