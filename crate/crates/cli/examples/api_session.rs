//! Drives the studio HTTP API in process: status, a render, a freeze and a
//! short dim edit, without binding a socket.
//!
//! `cargo run --release -p avatar-cli --example api_session -- checkpoint data_dir`

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use avatar_cli::commands::load_state;
use avatar_cli::serve::{router, AppState};
use avatar_core::dataset::Dataset;
use avatar_core::language_brush::DIM_PROMPT;
use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (u16, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .expect("request");
    let resp = router(app.clone()).oneshot(req).await.expect("infallible");
    let status = resp.status().as_u16();
    (status, resp.into_body().collect().await.expect("body").to_bytes().to_vec())
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "oracle_run/final.ckpt".into()));
    let data = PathBuf::from(args.next().unwrap_or_else(|| "oracle_data".into()));
    let app = AppState::start(load_state(&ckpt)?, Some(Dataset::load(&data)?));

    let (s, body) = call(&app, "GET", "/api/status", None).await;
    println!("GET /api/status -> {s} {}", String::from_utf8_lossy(&body));
    let (s, png) = call(&app, "GET", "/api/render?yaw=30&pitch=10&dist=3&frame=0", None).await;
    println!("GET /api/render -> {s}, {} bytes of PNG", png.len());

    // Everything but the shading head.
    let frozen = [
        "deformation.weights",
        "deformation.nonrigid",
        "canonical.feature",
        "canonical.uvs",
        "texture.core",
        "texture.albedo",
        "pose.residual",
    ];
    let (s, body) = call(&app, "POST", "/api/freeze", Some(json!({ "groups": frozen }))).await;
    println!("POST /api/freeze -> {s} {}", String::from_utf8_lossy(&body));

    let (s, _) = call(&app, "POST", "/api/edit", Some(json!({ "prompt": DIM_PROMPT, "steps": 50 }))).await;
    println!("POST /api/edit -> {s}");
    loop {
        let st: Value = serde_json::from_slice(&call(&app, "GET", "/api/status", None).await.1)?;
        if st["edit_session"]["active"] != Value::Bool(true) {
            println!("edit finished: {}", st["edit_session"]);
            break;
        }
        tokio::time::sleep(Duration::from_millis(500)).await;
    }
    let (_, after) = call(&app, "GET", "/api/render?yaw=30&pitch=10&dist=3&frame=0", None).await;
    println!("render after edit: {} bytes, changed {}", after.len(), after != png);
    Ok(())
}
