use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use fastpitch::dsp::MelConfig;
use fastpitch::model::{Checkpoint, FastPitch, ModelConfig};
use fastpitch::numerics::Tensor;
use fastpitch::prosody::PitchStats;
use fastpitch::text::Vocabulary;
use fastpitch_server::{router, AppState, EditSession, ServerConfig, SessionStore, SessionSummary, SynthesizeResponse};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const FRAMES_PER_SYMBOL: usize = 3;

/// An untrained two-speaker model whose duration predictor is pinned to
/// exactly three frames per symbol.
fn checkpoint() -> Checkpoint {
    let config = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        predictor_channels: 16,
        n_speakers: 2,
        ..ModelConfig::default()
    };
    let mut model = FastPitch::new(config, 5).unwrap();
    let params = model.params_mut();
    let weight = params.id_of("duration_predictor.projection.weight").unwrap();
    let bias = params.id_of("duration_predictor.projection.bias").unwrap();
    let shape = params.get(weight).shape().to_vec();
    *params.get_mut(weight) = Tensor::zeros(&shape);
    *params.get_mut(bias) = Tensor::vector(vec![((FRAMES_PER_SYMBOL + 1) as f64).ln()]);
    Checkpoint {
        model,
        pitch_stats: PitchStats::new(150.0, 30.0).unwrap(),
        vocabulary: Vocabulary::default(),
        audio: MelConfig::default(),
        step: 0,
    }
}

fn app(data_dir: &Path) -> Router {
    router(AppState::new(checkpoint(), SessionStore::open(data_dir).unwrap()))
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn synth(app: &Router, body: Value) -> SynthesizeResponse {
    let (status, bytes) = send(app, "POST", "/api/synthesize", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::test]
async fn minimal_text_synthesizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(&app(dir.path()), json!({"text": "a"})).await;
    assert_eq!(out.symbols, vec!["a"]);
    assert_eq!(out.durations, vec![FRAMES_PER_SYMBOL]);
    assert_eq!(out.mel.shape, [FRAMES_PER_SYMBOL, 80]);
    assert_eq!(out.mel.values().unwrap().len(), FRAMES_PER_SYMBOL * 80);
    assert_eq!(out.stats.frames, FRAMES_PER_SYMBOL);
}

#[tokio::test]
async fn synthesis_is_deterministic_per_body() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let body = json!({"text": "hello there", "transform": {"kind": "shift_hz", "value": 25.0}});
    let (_, first) = send(&app, "POST", "/api/synthesize", Some(body.clone())).await;
    let (_, second) = send(&app, "POST", "/api/synthesize", Some(body)).await;
    assert_eq!(first, second);
}

#[tokio::test]
async fn override_sets_symbol_pitch() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let base = synth(&app, json!({"text": "abc"})).await;
    let out = synth(&app, json!({"text": "abc", "overrides": {"0": 220.0}})).await;
    let hz = out.pitch_hz[0].unwrap();
    assert!((hz - 220.0).abs() < 1e-9, "{hz}");
    assert_eq!(out.pitch_hz[1..], base.pitch_hz[1..]);
    assert_eq!(out.predicted_pitch_hz, base.predicted_pitch_hz);

    let shifted = synth(
        &app,
        json!({"text": "abc", "transform": {"kind": "shift_hz", "value": 50.0}}),
    )
    .await;
    for (s, b) in shifted.pitch_hz.iter().zip(&base.pitch_hz) {
        assert!((s.unwrap() - b.unwrap() - 50.0).abs() < 1e-9);
    }
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let cases = [
        (json!({"text": ""}), StatusCode::BAD_REQUEST),
        (json!({"text": "   "}), StatusCode::BAD_REQUEST),
        (json!({"text": "###"}), StatusCode::BAD_REQUEST),
        (json!({"text": "a", "speaker_id": 2}), StatusCode::BAD_REQUEST),
        (json!({"text": "a", "bogus": 1}), StatusCode::BAD_REQUEST),
        (
            json!({"text": "ab", "overrides": {"2": 200.0}}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"text": "ab", "overrides": {"0": -5.0}}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
    ];
    for (body, expected) in cases {
        let (status, bytes) = send(&app, "POST", "/api/synthesize", Some(body.clone())).await;
        assert_eq!(status, expected, "{body}");
        let err: Value = serde_json::from_slice(&bytes).unwrap();
        assert!(err["error"].is_string());
    }
    assert_eq!(
        synth(&app, json!({"text": "a", "speaker_id": 1})).await.durations.len(),
        1
    );
}

fn parse_wav(bytes: &[u8]) -> (hound::WavSpec, usize) {
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).unwrap();
    (reader.spec(), reader.len() as usize)
}

#[tokio::test]
async fn audio_returns_wav_of_the_expected_length() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    for uri in ["/api/audio?n_iters=4", "/api/audio?n_iters=0"] {
        let req = Request::post(uri)
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(json!({"text": "hi"}).to_string()))
            .unwrap();
        let res = app.clone().oneshot(req).await.unwrap();
        assert_eq!(res.status(), StatusCode::OK);
        assert_eq!(res.headers()[header::CONTENT_TYPE], "audio/wav");
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        assert_eq!(&bytes[..4], b"RIFF");
        let (spec, samples) = parse_wav(&bytes);
        assert_eq!((spec.channels, spec.sample_rate, spec.bits_per_sample), (1, 22050, 16));
        let frames = 2 * FRAMES_PER_SYMBOL;
        let expected = (frames - 1) * 256;
        assert!(samples.abs_diff(expected) <= 256, "{samples} vs {expected}");
    }
    let (status, _) = send(&app, "POST", "/api/audio?n_iters=100000", Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, "POST", "/api/audio", Some(json!({"text": ""}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn session_round_trip_and_listing() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let body = json!({
        "text": "a big dog",
        "speaker_id": 1,
        "overrides": {"0": 180.5, "4": 95.25},
        "transforms": [{"kind": "scale", "value": 1.5}, {"kind": "invert"}],
    });
    let (status, bytes) = send(&app, "PUT", "/api/sessions/take-1", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let stored: EditSession = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(stored.overrides.len(), 2);

    let (status, bytes) = send(&app, "GET", "/api/sessions/take-1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<EditSession>(&bytes).unwrap(), stored);

    // Sending a fetched session back keeps its creation time.
    let (status, bytes) = send(
        &app,
        "PUT",
        "/api/sessions/take-1",
        Some(serde_json::to_value(&stored).unwrap()),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let again: EditSession = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(again.created_ms, stored.created_ms);
    assert!(again.updated_ms >= stored.updated_ms);

    send(&app, "PUT", "/api/sessions/other", Some(json!({"text": "hi"}))).await;
    let (_, bytes) = send(&app, "GET", "/api/sessions", None).await;
    let list: Vec<SessionSummary> = serde_json::from_slice(&bytes).unwrap();
    let ids: Vec<&str> = list.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["other", "take-1"]);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[tokio::test]
async fn session_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    assert_eq!(
        send(&app, "GET", "/api/sessions/missing", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        send(&app, "GET", "/api/sessions/..%2Fetc", None).await.0,
        StatusCode::BAD_REQUEST
    );
    let malformed = [
        json!({"txt": "oops"}),
        json!({"text": "ab", "overrides": {"7": 200.0}}),
        json!({"text": "ab", "overrides": {"0": 0.0}}),
        json!({"text": "ab", "speaker_id": 9}),
        json!({"text": "ab", "id": "someone-else"}),
        json!({"text": "ab", "transforms": [{"kind": "set_values", "value": {"3": 120.0}}]}),
        json!({"text": "ab", "transforms": [{"kind": "warp"}]}),
    ];
    for body in malformed {
        assert_eq!(
            send(&app, "PUT", "/api/sessions/s1", Some(body.clone())).await.0,
            StatusCode::CONFLICT,
            "{body}"
        );
    }
    assert_eq!(
        send(&app, "GET", "/api/sessions/s1", None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (_, bytes) = send(
        &app(dir.path()),
        "PUT",
        "/api/sessions/keep",
        Some(json!({"text": "we move"})),
    )
    .await;
    let stored: EditSession = serde_json::from_slice(&bytes).unwrap();
    let restarted = app(dir.path());
    let (status, bytes) = send(&restarted, "GET", "/api/sessions/keep", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<EditSession>(&bytes).unwrap(), stored);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_stores_are_all_retrievable() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(SessionStore::open(dir.path()).unwrap());
    let app = router(AppState::new(checkpoint(), SessionStore::open(dir.path()).unwrap()));
    let mut tasks = Vec::new();
    for i in 0..32 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            // Half the writers share one id to exercise the per-id lock.
            let id = if i % 2 == 0 {
                format!("s{i}")
            } else {
                "shared".to_string()
            };
            let body = json!({"text": "my queen", "overrides": {"0": 100.0 + i as f64}});
            let (status, _) = send(&app, "PUT", &format!("/api/sessions/{id}"), Some(body)).await;
            assert_eq!(status, StatusCode::OK);
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    for i in (0..32).step_by(2) {
        let s = store.load(&format!("s{i}")).await.unwrap();
        assert_eq!(s.overrides[&0], 100.0 + i as f64);
    }
    let shared = store.load("shared").await.unwrap();
    assert!((0..32)
        .filter(|i| i % 2 == 1)
        .any(|i| shared.overrides[&0] == 100.0 + i as f64));
    assert_eq!(store.list().await.unwrap().len(), 17);
}

#[tokio::test]
async fn cors_allows_only_local_origins() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let preflight = |origin: &str| {
        Request::builder()
            .method("OPTIONS")
            .uri("/api/synthesize")
            .header(header::ORIGIN, origin)
            .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
            .body(Body::empty())
            .unwrap()
    };
    let res = app.clone().oneshot(preflight("http://localhost:5173")).await.unwrap();
    assert_eq!(
        res.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN],
        "http://localhost:5173"
    );
    let res = app.oneshot(preflight("https://example.com")).await.unwrap();
    assert!(res.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

#[test]
fn config_files_and_port_override() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("server.toml");
    std::fs::write(
        &toml_path,
        "checkpoint = \"ckpt\"\ndata_dir = \"sessions\"\nport = 9000\n",
    )
    .unwrap();
    let cfg = ServerConfig::from_file(&toml_path).unwrap();
    assert_eq!(cfg.port, 9000);
    assert_eq!(cfg.checkpoint, dir.path().join("ckpt"));

    let json_path = dir.path().join("server.json");
    std::fs::write(&json_path, r#"{"checkpoint": "/abs/ckpt", "data_dir": "s"}"#).unwrap();
    let cfg = ServerConfig::from_file(&json_path).unwrap();
    assert_eq!((cfg.port, cfg.checkpoint.as_path()), (8080, Path::new("/abs/ckpt")));

    let env = |value: &'static str| move |key: &str| (key == fastpitch_server::PORT_ENV).then(|| value.to_string());
    assert_eq!(cfg.clone().with_env_port(env("7001")).unwrap().port, 7001);
    assert!(cfg.clone().with_env_port(env("seventy")).is_err());
    assert_eq!(cfg.clone().with_env_port(|_| None).unwrap().port, 8080);

    std::fs::write(&toml_path, "checkpoint = \"c\"\ndata_dir = \"d\"\nprot = 1\n").unwrap();
    assert!(ServerConfig::from_file(&toml_path).is_err());
    assert!(ServerConfig::from_file(&dir.path().join("server.yaml")).is_err());
}
