mod common;

use std::sync::Arc;
use std::time::Duration;

use avatar_cli::commands::load_state;
use avatar_cli::serve::{router, AppState};
use avatar_core::dataset::Dataset;
use avatar_core::imageio::{RawBuffer, RgbImage};
use avatar_core::language_brush::DIM_PROMPT;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

fn app() -> (tempfile::TempDir, Arc<AppState>) {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_dataset(dir.path());
    let ckpt = common::small_checkpoint(dir.path(), &data);
    let state = load_state(&ckpt).unwrap();
    let app = AppState::start(state, Some(Dataset::load(&data).unwrap()));
    (dir, app)
}

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn render_is_deterministic_and_validated() {
    let (_dir, app) = app();
    let uri = "/api/render?yaw=30&pitch=10&dist=3&frame=1";
    let (s1, a) = call(&app, "GET", uri, None).await;
    let (s2, b) = call(&app, "GET", uri, None).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let img = RgbImage::decode_png(&a).unwrap();
    assert_eq!((img.width, img.height), (16, 16));
    assert_eq!(call(&app, "GET", "/api/render?yaw=abc", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/api/render?dist=-1", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/api/render?frame=999", None).await.0, StatusCode::BAD_REQUEST);

    let cams: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(_dir.path().join("data/cameras.json")).unwrap()).unwrap();
    let body = serde_json::json!({"camera": cams[2]["camera"], "frame": 2});
    let (s, png) = call(&app, "POST", "/api/render", Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    assert!(RgbImage::decode_png(&png).is_ok());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn poses_and_buffers() {
    let (_dir, app) = app();
    let (s, body) = call(&app, "GET", "/api/poses", None).await;
    assert_eq!(s, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["frames"].as_array().unwrap().len(), 5);
    assert_eq!(v["novel_pose"], serde_json::json!([4]));
    assert_eq!(v["joints"].as_array().unwrap().len(), 6);

    let (s, bytes) = call(&app, "GET", "/api/buffers?frame=0", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&bytes[..8], b"RCLB-BUF");
    let raw = RawBuffer::from_bytes(&bytes).unwrap();
    assert_eq!((raw.width, raw.height, raw.channels), (16, 16, 13 + 7));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn freeze_and_edit_sessions() {
    let (_dir, app) = app();
    let (s, body) = call(&app, "POST", "/api/freeze", Some(serde_json::json!({"groups": ["texture.nope"]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v = json(&body);
    assert!(v["valid_groups"].as_array().unwrap().iter().any(|g| g == "texture.shading"));
    assert_eq!(v["unknown"], serde_json::json!(["texture.nope"]));
    assert_eq!(
        call(&app, "POST", "/api/freeze", Some(serde_json::json!({"nope": 1}))).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );

    let (_, groups) = call(&app, "GET", "/api/poses", None).await;
    assert!(json(&groups).is_object());
    let frozen: Vec<&str> = vec![
        "deformation.weights", "deformation.nonrigid", "canonical.feature", "canonical.uvs", "texture.core",
        "texture.albedo", "pose.residual",
    ];
    let (s, body) = call(&app, "POST", "/api/freeze", Some(serde_json::json!({"groups": frozen}))).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(json(&body)["unfrozen"], serde_json::json!(["texture.shading"]));

    let before = call(&app, "GET", "/api/render?yaw=0", None).await.1;
    let (s, body) = call(&app, "POST", "/api/edit", Some(serde_json::json!({"prompt": DIM_PROMPT, "period": 1}))).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let (_, status) = call(&app, "GET", "/api/status", None).await;
    let st = json(&status);
    assert_eq!(st["edit_session"]["prompt"], DIM_PROMPT);
    assert_eq!(st["edit_session"]["active"], true);

    let again = call(&app, "POST", "/api/edit", Some(serde_json::json!({"prompt": DIM_PROMPT}))).await.0;
    assert_eq!(again, StatusCode::CONFLICT);
    let refreeze = call(&app, "POST", "/api/freeze", Some(serde_json::json!({"groups": []}))).await.0;
    assert_eq!(refreeze, StatusCode::CONFLICT);

    // Wait until at least one update period has been committed.
    let mut st = serde_json::Value::Null;
    for _ in 0..200 {
        st = json(&call(&app, "GET", "/api/status", None).await.1);
        if st["edit_session"]["steps"].as_u64().unwrap() >= 2 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert!(st["edit_session"]["frames_edited"].as_u64().unwrap() >= 1, "{st}");
    assert!(st["step"].as_u64().unwrap() >= 2);
    assert!(st["losses"]["total"].is_f64());

    let (s, body) = call(&app, "POST", "/api/edit/stop", None).await;
    assert_eq!(s, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["stopped"], true);
    assert_eq!(v["status"]["edit_session"]["active"], false);
    let after = call(&app, "GET", "/api/render?yaw=0", None).await.1;
    assert_ne!(before, after, "snapshot should advance with training");

    let bad = call(&app, "POST", "/api/edit", Some(serde_json::json!({"prompt": "Make it sparkle"}))).await.0;
    assert_eq!(bad, StatusCode::BAD_REQUEST);
    let bad = call(&app, "POST", "/api/edit", Some(serde_json::json!({"prompt": DIM_PROMPT, "editor": "carrier-pigeon"}))).await.0;
    assert_eq!(bad, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bounded_edit_finishes_by_itself() {
    let (_dir, app) = app();
    let body = serde_json::json!({"prompt": DIM_PROMPT, "editor": "identity", "period": 2, "steps": 3});
    assert_eq!(call(&app, "POST", "/api/edit", Some(body)).await.0, StatusCode::OK);
    for _ in 0..200 {
        let st = json(&call(&app, "GET", "/api/status", None).await.1);
        if st["edit_session"]["active"] == false {
            assert_eq!(st["edit_session"]["steps"], 3);
            assert_eq!(st["step"], 3);
            return;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("edit session did not finish");
}
