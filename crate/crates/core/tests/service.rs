use std::io::Cursor;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use mpox_screen::data::{preprocess_image, CropRect};
use mpox_screen::deploy::{quantize_fp16, ModelArtifact};
use mpox_screen::labels::{ClassLabel, TaskKind};
use mpox_screen::model::{build_model, HeadConfig, TrainedModel};
use mpox_screen::nn::{Backbone, BackboneId, BackboneSource};
use mpox_screen::service::{
    input_config, router, AppState, Catalog, CatalogEntry, ErrorResponse, HealthResponse, ModelsResponse,
    PredictRequest, PredictResponse, DISCLAIMER, MAX_BODY_BYTES,
};
use serde_json::Value;
use tower::ServiceExt;

const SIZE: usize = 32;

fn artifact(task: TaskKind, seed: u64) -> ModelArtifact {
    let bb = Backbone::load_at(BackboneId::MobileNetV3Small, &BackboneSource::Random { seed }, SIZE).unwrap();
    let cfg = HeadConfig::new(&[(256, 0.0)], 1e-3).unwrap();
    let m = build_model(Arc::new(bb), &cfg, task, seed).unwrap();
    quantize_fp16(&TrainedModel::untrained(m, seed)).unwrap()
}

fn state() -> AppState {
    let entry = CatalogEntry::from_artifact("mnv3s-multiclass", &artifact(TaskKind::Multiclass, 5)).unwrap();
    AppState::new(Catalog::new(vec![entry]).unwrap())
}

fn png(w: u32, h: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 5) as u8, (y * 3) as u8, ((x * y) % 251) as u8]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn request(image: &[u8]) -> PredictRequest {
    PredictRequest {
        image: B64.encode(image),
        crop: None,
        model_id: None,
        explain: false,
        colormap: None,
        alpha: None,
    }
}

async fn send(state: &AppState, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

async fn get(state: &AppState, path: &str) -> (StatusCode, Vec<u8>) {
    let (s, _, b) = send(state, Request::get(path).body(Body::empty()).unwrap()).await;
    (s, b)
}

async fn post_json(state: &AppState, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/api/v1/predict")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body))
        .unwrap();
    let (s, _, b) = send(state, req).await;
    (s, b)
}

async fn predict(state: &AppState, req: &PredictRequest) -> (StatusCode, Vec<u8>) {
    post_json(state, serde_json::to_vec(req).unwrap()).await
}

fn error_code(body: &[u8]) -> String {
    let e: ErrorResponse = serde_json::from_slice(body).unwrap();
    assert_eq!(e.disclaimer, DISCLAIMER);
    e.error.code
}

#[tokio::test]
async fn health_reports_ok_with_version() {
    let (s, b) = get(&state(), "/api/v1/health").await;
    assert_eq!(s, StatusCode::OK);
    let h: HealthResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(h.models, 1);
    assert_eq!(h.disclaimer, DISCLAIMER);
}

#[tokio::test]
async fn catalog_lists_the_loaded_artifact() {
    let (s, b) = get(&state(), "/api/v1/models").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["models"][0]["precision"], "fp16");
    let m: ModelsResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(m.models.len(), 1);
    let info = &m.models[0];
    assert_eq!(info.id, "mnv3s-multiclass");
    assert_eq!(info.task, TaskKind::Multiclass);
    let canonical: Vec<String> = ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect();
    assert_eq!(info.class_names, canonical);
    assert_eq!(info.class_names[0], "Acne");
    assert_eq!(info.input_size, [SIZE, SIZE]);
}

#[tokio::test]
async fn predict_matches_in_process_inference_bit_for_bit() {
    let st = state();
    let image = png(50, 40);
    let crop = CropRect {
        x: 5,
        y: 4,
        width: 30,
        height: 28,
    };
    let req = PredictRequest {
        crop: Some(crop),
        explain: true,
        ..request(&image)
    };
    let (s, b) = predict(&st, &req).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let r: PredictResponse = serde_json::from_slice(&b).unwrap();

    assert_eq!(r.probabilities.len(), 4);
    let total: f64 = r.probabilities.iter().map(|p| p.probability).sum();
    assert!((total - 1.0).abs() < 1e-6);
    let best = (0..4)
        .max_by(|a, b| r.probabilities[*a].probability.total_cmp(&r.probabilities[*b].probability).then(b.cmp(a)))
        .unwrap();
    assert_eq!(r.top_index, best);
    assert_eq!(r.top_label, r.probabilities[best].label);
    assert_eq!(r.crop, Some(crop));
    assert_eq!(r.disclaimer, DISCLAIMER);
    assert_eq!(r.model.version.len(), 12);

    let catalog = st.catalog();
    let entry = catalog.get(None).unwrap();
    let tensor = preprocess_image(&image, &input_config(entry, Some(crop))).unwrap();
    let direct = entry.model.predict(&tensor).unwrap();
    for (got, want) in r.probabilities.iter().zip(&direct) {
        assert_eq!(got.probability.to_bits(), want.to_bits());
    }

    let overlay = image::load_from_memory(&B64.decode(r.overlay_png.unwrap()).unwrap()).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (SIZE as u32, SIZE as u32));
}

#[tokio::test]
async fn identical_requests_give_identical_responses() {
    let st = state();
    let req = PredictRequest {
        explain: true,
        ..request(&png(SIZE as u32, SIZE as u32))
    };
    let (_, a) = predict(&st, &req).await;
    let (_, b) = predict(&st, &req).await;
    let mut a: PredictResponse = serde_json::from_slice(&a).unwrap();
    let mut b: PredictResponse = serde_json::from_slice(&b).unwrap();
    a.latency_ms = 0.0;
    b.latency_ms = 0.0;
    assert_eq!(a, b);
}

#[tokio::test]
async fn jpeg_uploads_are_accepted() {
    let img = image::RgbImage::from_fn(40, 40, |x, y| image::Rgb([x as u8 * 6, y as u8 * 6, 128]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Jpeg).unwrap();
    let (s, _) = predict(&state(), &request(out.get_ref())).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn malformed_inputs_get_machine_readable_400s() {
    let st = state();
    let (s, b) = predict(&st, &request(b"this is plain text, not an image")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&b), "undecodable_image");

    let (s, b) = post_json(&st, b"just some text".to_vec()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&b), "invalid_json");

    let bad = PredictRequest {
        image: "@@not base64@@".into(),
        ..request(b"")
    };
    let (s, b) = predict(&st, &bad).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&b), "invalid_base64");

    let outside = PredictRequest {
        crop: Some(CropRect {
            x: 30,
            y: 0,
            width: 30,
            height: 10,
        }),
        ..request(&png(50, 40))
    };
    let (s, b) = predict(&st, &outside).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&b), "crop_out_of_bounds");

    let alpha = PredictRequest {
        explain: true,
        alpha: Some(2.0),
        ..request(&png(50, 40))
    };
    let (s, b) = predict(&st, &alpha).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&b), "invalid_argument");
}

#[tokio::test]
async fn unknown_model_is_404() {
    let req = PredictRequest {
        model_id: Some("nope".into()),
        ..request(&png(20, 20))
    };
    let (s, b) = predict(&state(), &req).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&b), "unknown_model");
}

#[tokio::test]
async fn oversized_payload_is_413() {
    let body = vec![b'a'; MAX_BODY_BYTES + 1];
    let (s, b) = post_json(&state(), body).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&b), "payload_too_large");
}

#[tokio::test]
async fn cross_origin_requests_are_allowed() {
    let req = Request::get("/api/v1/health")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let (_, h, _) = send(&state(), req).await;
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let preflight = Request::options("/api/v1/predict")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (s, h, _) = send(&state(), preflight).await;
    assert!(s.is_success());
    assert!(h.contains_key(header::ACCESS_CONTROL_ALLOW_METHODS));
}

#[tokio::test]
async fn reload_swaps_the_catalog() {
    let dir = tempfile::tempdir().unwrap();
    artifact(TaskKind::Binary, 1).write(dir.path().join("a-binary")).unwrap();
    let st = AppState::from_dir(dir.path()).unwrap();
    let before = st.catalog();
    assert_eq!(before.len(), 1);

    artifact(TaskKind::Multiclass, 2).write(dir.path().join("b-multiclass")).unwrap();
    let req = Request::post("/api/v1/admin/reload").body(Body::empty()).unwrap();
    let (s, _, b) = send(&st, req).await;
    assert_eq!(s, StatusCode::OK);
    let m: ModelsResponse = serde_json::from_slice(&b).unwrap();
    let ids: Vec<_> = m.models.iter().map(|m| m.id.as_str()).collect();
    assert_eq!(ids, ["a-binary", "b-multiclass"]);
    assert_eq!(m.models[0].class_names, ["Mpox", "Others"]);
    // readers holding the old catalog keep a consistent view
    assert_eq!(before.len(), 1);

    let req = Request::post("/api/v1/admin/reload").body(Body::empty()).unwrap();
    let (s, _, b) = send(&state(), req).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error_code(&b), "reload_unavailable");
}

#[tokio::test]
async fn unknown_routes_are_404_json() {
    let (s, b) = get(&state(), "/api/v2/anything").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&b), "not_found");
}
