use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use fastpitch::inference::PitchTransform;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// A stored pitch-editing session. Overrides are Hz values keyed by
/// symbol index and apply after `transforms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub id: String,
    pub text: String,
    pub speaker_id: usize,
    pub overrides: BTreeMap<usize, f64>,
    pub transforms: Vec<PitchTransform>,
    /// Milliseconds since the Unix epoch.
    pub created_ms: u64,
    pub updated_ms: u64,
}

/// What a client PUTs. Unknown fields are ignored so a fetched
/// [`EditSession`] can be sent back as is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionBody {
    #[serde(default)]
    pub id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub speaker_id: usize,
    #[serde(default)]
    pub overrides: BTreeMap<usize, f64>,
    #[serde(default)]
    pub transforms: Vec<PitchTransform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub text: String,
    pub updated_ms: u64,
}

/// One JSON file per session under a data directory. Writes go to a
/// temporary file that is renamed into place, serialized per id.
pub struct SessionStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    temp_counter: AtomicU64,
}

pub(crate) fn validate_id(id: &str) -> Result<(), ApiError> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ApiError::BadRequest(format!(
            "session id {id:?} must be 1-64 characters of letters, digits, '-' or '_'"
        )))
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl SessionStore {
    pub fn open(dir: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            locks: Mutex::new(HashMap::new()),
            temp_counter: AtomicU64::new(0),
        })
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Stores `body` under `id`, keeping the original creation time when
    /// the session already exists. The body must already be validated.
    pub async fn store(&self, id: &str, body: SessionBody) -> Result<EditSession, ApiError> {
        validate_id(id)?;
        let lock = self.lock_for(id);
        let _guard = lock.lock().await;
        let now = now_ms();
        let created_ms = match self.load(id).await {
            Ok(existing) => existing.created_ms,
            Err(ApiError::NotFound(_)) => now,
            Err(e) => return Err(e),
        };
        let session = EditSession {
            id: id.to_string(),
            text: body.text,
            speaker_id: body.speaker_id,
            overrides: body.overrides,
            transforms: body.transforms,
            created_ms,
            updated_ms: now,
        };
        let json = serde_json::to_vec_pretty(&session).map_err(|e| ApiError::Internal(e.to_string()))?;
        let n = self.temp_counter.fetch_add(1, Ordering::Relaxed);
        let temp = self.dir.join(format!(".{id}.{}.{n}.tmp", std::process::id()));
        let write = async {
            tokio::fs::write(&temp, &json).await?;
            tokio::fs::rename(&temp, self.path(id)).await
        };
        if let Err(e) = write.await {
            let _ = tokio::fs::remove_file(&temp).await;
            return Err(ApiError::Internal(format!("storing session {id}: {e}")));
        }
        Ok(session)
    }

    pub async fn load(&self, id: &str) -> Result<EditSession, ApiError> {
        validate_id(id)?;
        let bytes = match tokio::fs::read(self.path(id)).await {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(ApiError::NotFound(format!("no session {id:?}")))
            }
            Err(e) => return Err(ApiError::Internal(format!("reading session {id}: {e}"))),
        };
        serde_json::from_slice(&bytes).map_err(|e| ApiError::Internal(format!("session {id} is corrupt: {e}")))
    }

    /// All stored sessions, sorted by id. Unreadable files are skipped
    /// with a warning.
    pub async fn list(&self) -> Result<Vec<SessionSummary>, ApiError> {
        let mut entries = tokio::fs::read_dir(&self.dir)
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let mut out = Vec::new();
        while let Some(entry) = entries
            .next_entry()
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
        {
            let name = entry.file_name();
            let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")) else {
                continue;
            };
            if validate_id(id).is_err() {
                continue;
            }
            match self.load(id).await {
                Ok(s) => out.push(SessionSummary {
                    id: s.id,
                    text: s.text,
                    updated_ms: s.updated_ms,
                }),
                Err(e) => log::warn!("skipping session file {}: {e}", entry.path().display()),
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}
