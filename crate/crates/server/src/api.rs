use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use fastpitch::dsp::wav::wav_bytes;
use fastpitch::dsp::DEFAULT_GRIFFIN_LIM_ITERS;
use fastpitch::inference::{synthesize, PitchTransform, Synthesis};
use fastpitch::model::Speaker;
use fastpitch::tensor_file::{f64_from_bytes, f64_to_bytes};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::error::ApiError;
use crate::session::{validate_id, EditSession, SessionBody, SessionSummary};
use crate::AppState;

const MAX_GRIFFIN_LIM_ITERS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeRequest {
    pub text: String,
    #[serde(default)]
    pub speaker_id: Option<usize>,
    #[serde(default)]
    pub transform: Option<PitchTransform>,
    /// Hz per symbol index, applied after `transform`.
    #[serde(default)]
    pub overrides: BTreeMap<usize, f64>,
}

/// Mel frames as base64 of little-endian f64, row-major `frames × n_mels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelPayload {
    pub shape: [usize; 2],
    pub dtype: String,
    pub data: String,
}

impl MelPayload {
    fn encode(frames: &fastpitch::numerics::Tensor) -> Self {
        Self {
            shape: [frames.rows(), frames.cols()],
            dtype: "f64le".into(),
            data: BASE64.encode(f64_to_bytes(frames.data())),
        }
    }

    /// Decoded values, or `None` when the payload is inconsistent.
    pub fn values(&self) -> Option<Vec<f64>> {
        let values = f64_from_bytes(&BASE64.decode(&self.data).ok()?)?;
        (values.len() == self.shape[0] * self.shape[1]).then_some(values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisStats {
    pub frames: usize,
    pub audio_seconds: f64,
    pub sample_rate: u32,
    pub hop_length: usize,
    /// Corpus pitch statistics the model was trained with.
    pub pitch_mean_hz: f64,
    pub pitch_std_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeResponse {
    pub symbols: Vec<String>,
    pub durations: Vec<usize>,
    /// After the request's edits; `null` for symbols without pitch.
    pub pitch_hz: Vec<Option<f64>>,
    pub predicted_pitch_hz: Vec<Option<f64>>,
    pub mel: MelPayload,
    pub stats: SynthesisStats,
}

/// Routes plus CORS for `localhost` / `127.0.0.1` origins on any port.
pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin: &HeaderValue, _| {
            origin.to_str().is_ok_and(is_local_origin)
        }))
        .allow_methods(tower_http::cors::Any)
        .allow_headers(tower_http::cors::Any);
    Router::new()
        .route("/api/synthesize", post(synthesize_handler))
        .route("/api/audio", post(audio_handler))
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{id}", get(get_session).put(put_session))
        .layer(cors)
        .with_state(state)
}

fn is_local_origin(origin: &str) -> bool {
    let Some(rest) = origin
        .strip_prefix("http://")
        .or_else(|| origin.strip_prefix("https://"))
    else {
        return false;
    };
    let host = match rest.rsplit_once(':') {
        Some((host, port)) if port.chars().all(|c| c.is_ascii_digit()) => host,
        _ => rest,
    };
    matches!(host, "localhost" | "127.0.0.1" | "[::1]")
}

fn parse_request(body: &[u8]) -> Result<SynthesizeRequest, ApiError> {
    let req: SynthesizeRequest =
        serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))?;
    if req.text.trim().is_empty() {
        return Err(ApiError::BadRequest("text is empty".into()));
    }
    Ok(req)
}

fn check_speaker(state: &AppState, speaker_id: usize) -> Result<(), ApiError> {
    let n = state.checkpoint.model.config().n_speakers;
    if speaker_id >= n {
        return Err(ApiError::BadRequest(format!(
            "unknown speaker {speaker_id}; the model has {n} speaker(s)"
        )));
    }
    Ok(())
}

async fn run_synthesis(
    state: Arc<AppState>,
    req: SynthesizeRequest,
    vocoder_iters: Option<usize>,
) -> Result<Synthesis, ApiError> {
    let speaker_id = req.speaker_id.unwrap_or(0);
    check_speaker(&state, speaker_id)?;
    let mut transforms: Vec<PitchTransform> = req.transform.into_iter().collect();
    if !req.overrides.is_empty() {
        transforms.push(PitchTransform::SetValues(req.overrides));
    }
    tokio::task::spawn_blocking(move || {
        synthesize(
            &state.checkpoint,
            &req.text,
            Speaker::Id(speaker_id),
            &transforms,
            vocoder_iters,
        )
    })
    .await
    .map_err(|e| ApiError::Internal(format!("synthesis task failed: {e}")))?
    .map_err(ApiError::from)
}

async fn synthesize_handler(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<SynthesizeResponse>, ApiError> {
    let req = parse_request(&body)?;
    let out = run_synthesis(state.clone(), req, None).await?;
    let audio = &state.checkpoint.audio;
    let stats = state.checkpoint.pitch_stats;
    Ok(Json(SynthesizeResponse {
        symbols: out.symbols.iter().map(|c| c.to_string()).collect(),
        durations: out.durations,
        pitch_hz: out.pitch_hz,
        predicted_pitch_hz: out.predicted_pitch_hz,
        stats: SynthesisStats {
            frames: out.mel.n_frames(),
            audio_seconds: out.mel.n_frames() as f64 * audio.frame_seconds(),
            sample_rate: audio.sample_rate,
            hop_length: audio.hop_length,
            pitch_mean_hz: stats.mean_hz,
            pitch_std_hz: stats.std_hz,
        },
        mel: MelPayload::encode(&out.mel.frames),
    }))
}

#[derive(Debug, Deserialize)]
struct AudioQuery {
    n_iters: Option<usize>,
}

async fn audio_handler(
    State(state): State<Arc<AppState>>,
    Query(query): Query<AudioQuery>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let n_iters = query.n_iters.unwrap_or(DEFAULT_GRIFFIN_LIM_ITERS);
    if n_iters > MAX_GRIFFIN_LIM_ITERS {
        return Err(ApiError::BadRequest(format!(
            "n_iters {n_iters} exceeds the limit of {MAX_GRIFFIN_LIM_ITERS}"
        )));
    }
    let req = parse_request(&body)?;
    let out = run_synthesis(state, req, Some(n_iters)).await?;
    let clip = out
        .audio
        .ok_or_else(|| ApiError::Internal("vocoder produced no audio".into()))?;
    let wav = wav_bytes(&clip)?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], wav))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Result<Json<Vec<SessionSummary>>, ApiError> {
    Ok(Json(state.sessions.list().await?))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<EditSession>, ApiError> {
    Ok(Json(state.sessions.load(&id).await?))
}

/// Rejects bodies that do not describe a usable session for this model.
fn check_session(state: &AppState, id: &str, body: &SessionBody) -> Result<(), ApiError> {
    let conflict = |msg: String| ApiError::Conflict(format!("malformed session {id:?}: {msg}"));
    if let Some(body_id) = &body.id {
        if body_id != id {
            return Err(conflict(format!("body id {body_id:?} differs from the path")));
        }
    }
    let (symbols, _) = state
        .checkpoint
        .vocabulary
        .encode(&body.text)
        .map_err(|e| conflict(e.to_string()))?;
    check_speaker(state, body.speaker_id).map_err(|e| conflict(e.to_string()))?;
    let set_values = body.transforms.iter().filter_map(|t| match t {
        PitchTransform::SetValues(v) => Some(v),
        _ => None,
    });
    for values in std::iter::once(&body.overrides).chain(set_values) {
        for (&i, &hz) in values {
            if i >= symbols.len() {
                return Err(conflict(format!(
                    "override for symbol {i}, but the text has {} symbols",
                    symbols.len()
                )));
            }
            if !hz.is_finite() || hz <= 0.0 {
                return Err(conflict(format!("override {hz} Hz for symbol {i}")));
            }
        }
    }
    Ok(())
}

async fn put_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<EditSession>, ApiError> {
    validate_id(&id)?;
    let body: SessionBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::Conflict(format!("malformed session {id:?}: {e}")))?;
    check_session(&state, &id, &body)?;
    Ok(Json(state.sessions.store(&id, body).await?))
}
