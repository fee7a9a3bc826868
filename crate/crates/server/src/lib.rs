//! Local HTTP API over a trained checkpoint: synthesis with pitch edits,
//! Griffin-Lim audio, and on-disk edit sessions.
//!
//! | method | path                  | body / response                         |
//! |--------|-----------------------|-----------------------------------------|
//! | POST   | `/api/synthesize`     | [`SynthesizeRequest`] → [`SynthesizeResponse`] |
//! | POST   | `/api/audio?n_iters=` | [`SynthesizeRequest`] → `audio/wav`     |
//! | GET    | `/api/sessions`       | `[SessionSummary]`                      |
//! | GET    | `/api/sessions/{id}`  | [`EditSession`]                         |
//! | PUT    | `/api/sessions/{id}`  | [`SessionBody`] → [`EditSession`]       |

mod api;
mod config;
mod error;
mod session;

use std::net::SocketAddr;
use std::sync::Arc;

use fastpitch::model::Checkpoint;

pub use api::{router, MelPayload, SynthesisStats, SynthesizeRequest, SynthesizeResponse};
pub use config::{ServerConfig, PORT_ENV};
pub use error::ApiError;
pub use session::{EditSession, SessionBody, SessionStore, SessionSummary};

/// Shared, read-only model plus the session store.
pub struct AppState {
    pub checkpoint: Checkpoint,
    pub sessions: SessionStore,
}

impl AppState {
    pub fn new(checkpoint: Checkpoint, sessions: SessionStore) -> Arc<Self> {
        Arc::new(Self { checkpoint, sessions })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Model(#[from] fastpitch::Error),
    #[error("server I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid server configuration: {0}")]
    Config(String),
}

/// Loads the checkpoint named in `config` and serves until the process
/// is stopped.
pub async fn serve(config: ServerConfig) -> Result<(), ServeError> {
    let checkpoint = Checkpoint::load(&config.checkpoint)?;
    let sessions = SessionStore::open(&config.data_dir)?;
    let app = router(AppState::new(checkpoint, sessions));
    let addr = SocketAddr::new(config.host, config.port);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
