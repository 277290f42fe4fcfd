use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use jewelcap::augment::Image;
use jewelcap::captioner::{CaptionerModel, ModelConfig, Task};
use jewelcap::layers::CellKind;
use jewelcap::synth::{generate_corpus, CaptionLevel, CorpusConfig};
use jewelcap_cli::server::{router, AppState, CaptionResponse};
use serde_json::Value;
use tower::ServiceExt;

const BOUNDARY: &str = "XjewelcapBoundary";

fn tiny_model(task: Task, level: CaptionLevel) -> CaptionerModel {
    let corpus = generate_corpus(CorpusConfig {
        n_base: 40,
        seed: 2,
        multiplier: 1,
        image_size: 8,
    })
    .unwrap();
    let mut config = ModelConfig::new(task, CellKind::Gru, 8, corpus.vocab().unwrap());
    config.embed_dim = 8;
    config.image_size = 8;
    config.level = level;
    CaptionerModel::build(config).unwrap()
}

fn full_state() -> AppState {
    let mut state = AppState::new();
    state.insert(CaptionLevel::Basic, tiny_model(Task::Classification, CaptionLevel::Basic)).unwrap();
    state.insert(CaptionLevel::Normal, tiny_model(Task::Captioning, CaptionLevel::Normal)).unwrap();
    state.insert(CaptionLevel::Complete, tiny_model(Task::Captioning, CaptionLevel::Complete)).unwrap();
    state
}

fn png() -> Vec<u8> {
    let mut img = Image::filled(20, 20, [0.9, 0.9, 0.9]);
    for x in 5..15 {
        img.set(x, 10, [0.8, 0.6, 0.1]);
    }
    img.encode_png().unwrap()
}

fn multipart(image: &[u8], level: Option<&str>) -> Request<Body> {
    let mut body = Vec::new();
    body.extend_from_slice(
        format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"a.png\"\r\nContent-Type: image/png\r\n\r\n")
            .as_bytes(),
    );
    body.extend_from_slice(image);
    body.extend_from_slice(b"\r\n");
    if let Some(level) = level {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"level\"\r\n\r\n{level}\r\n").as_bytes(),
        );
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/api/caption")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn json_request(image: &[u8], level: Option<&str>) -> Request<Body> {
    let b64 = base64::engine::general_purpose::STANDARD.encode(image);
    let body = match level {
        Some(l) => serde_json::json!({ "image": b64, "level": l }),
        None => serde_json::json!({ "image": b64 }),
    };
    Request::post("/api/caption")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn send(state: &AppState, req: Request<Body>) -> (StatusCode, Value) {
    let res = router(state.clone(), None).unwrap().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn captions_at_every_level() {
    let state = full_state();
    for level in ["basic", "normal", "complete"] {
        let (status, body) = send(&state, multipart(&png(), Some(level))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let r: CaptionResponse = serde_json::from_value(body).unwrap();
        assert_eq!(r.level.as_str(), level);
        assert_eq!(Some(r.model_id.as_str()), state.checksum(r.level));
        assert!(r.latency_ms >= 0.0);
    }
    let (_, body) = send(&state, multipart(&png(), Some("basic"))).await;
    assert!(["necklace", "ring", "earring", "bracelet"].contains(&body["caption"].as_str().unwrap()));
}

#[tokio::test]
async fn level_defaults_to_complete_and_json_matches_multipart() {
    let state = full_state();
    let (s1, a) = send(&state, multipart(&png(), None)).await;
    let (s2, b) = send(&state, json_request(&png(), None)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["level"], "complete");
    assert_eq!(a["caption"], b["caption"]);
}

#[tokio::test]
async fn caption_matches_library_decode() {
    let model = tiny_model(Task::Captioning, CaptionLevel::Complete);
    let expected = model.caption(&model.image_input(&Image::decode(&png()).unwrap())).unwrap();
    let mut state = AppState::new();
    state.insert(CaptionLevel::Complete, model).unwrap();
    let (_, body) = send(&state, json_request(&png(), Some("complete"))).await;
    assert_eq!(body["caption"].as_str().unwrap(), expected);
}

#[tokio::test]
async fn error_contract() {
    let state = full_state();
    let bytes = png();
    let truncated = &bytes[..bytes.len() / 2];
    let (status, body) = send(&state, multipart(truncated, Some("basic"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "invalid_image");

    let (status, body) = send(&state, json_request(&bytes, Some("verbose"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "unknown_level");

    let (status, body) = send(&AppState::new(), multipart(&bytes, Some("normal"))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "model_not_loaded");
}

#[tokio::test]
async fn oversized_upload_rejected() {
    let big = vec![0u8; jewelcap_cli::server::MAX_UPLOAD_BYTES + 1];
    let res = router(full_state(), None).unwrap().oneshot(multipart(&big, None)).await.unwrap();
    assert!(res.status().is_client_error());
}

#[tokio::test]
async fn health_lists_checksums() {
    let mut state = AppState::new();
    let model = tiny_model(Task::Captioning, CaptionLevel::Normal);
    let checksum = model.checksum();
    state.insert(CaptionLevel::Normal, model).unwrap();
    let res = router(state, None)
        .unwrap()
        .oneshot(Request::get("/api/health").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let body: Value = serde_json::from_slice(&res.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["models"]["normal"], checksum.as_str());
    assert!(body["models"]["basic"].is_null());
}

#[test]
fn slot_level_must_match_checkpoint() {
    let mut state = AppState::new();
    assert!(state
        .insert(CaptionLevel::Complete, tiny_model(Task::Captioning, CaptionLevel::Normal))
        .is_err());
    assert!(state
        .insert(CaptionLevel::Complete, tiny_model(Task::Classification, CaptionLevel::Basic))
        .is_err());
}

#[tokio::test]
async fn cors_header_for_configured_origin() {
    let req = Request::get("/api/health")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let res = router(AppState::new(), Some("http://localhost:5173")).unwrap().oneshot(req).await.unwrap();
    assert_eq!(
        res.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "http://localhost:5173"
    );
}
