//! The HTTP API behind the studio UI. By default a recorded session is
//! replayed in-process and the responses printed; `--listen` serves on
//! 127.0.0.1:8080 until Ctrl-C.
//!
//!     cargo run --release --example serve [-- CHECKPOINT] [--listen]

mod common;

use cfanet::config::ServiceConfig;
use cfanet::data::{encode_png, tensor_to_vec};
use cfanet::service::{replay, router, serve, AppState, RecordedRequest};
use serde_json::json;

fn main() -> cfanet::Result<()> {
    common::init_logging();
    let ckpt = common::checkpoint()?;
    let rt = tokio::runtime::Runtime::new()?;
    if std::env::args().any(|a| a == "--listen") {
        return rt.block_on(serve(ServiceConfig { model: Some(ckpt), ..Default::default() }));
    }

    let state = AppState::new(ServiceConfig::default());
    state.load_model(&ckpt)?;
    let (model, ds) = common::model_and_data()?;
    let size = model.image_size();
    let png = encode_png(&tensor_to_vec(&ds.val[0].image(0)), size)?;
    let app = router(state);

    let created = rt.block_on(replay(app.clone(), &[RecordedRequest::upload("/v1/sessions", &png)]))?;
    let id = created[0].json()["session_id"].as_str().unwrap_or_default().to_string();
    println!("POST /v1/sessions -> {} {}", created[0].status, shorten(created[0].json()));
    let theta = model.theta();
    let log = [
        RecordedRequest::get("/v1/health"),
        RecordedRequest::json(&format!("/v1/sessions/{id}/anonymize"), &json!({"alpha": theta + 0.3, "seed": 1})),
        RecordedRequest::json(&format!("/v1/sessions/{id}/anonymize"), &json!({"alpha": theta, "seed": 1})),
        RecordedRequest::json(&format!("/v1/sessions/{id}/sweep"), &json!({"alphas": [theta + 0.1, 1.2], "seeds": [1, 2]})),
    ];
    for (req, resp) in log.iter().zip(rt.block_on(replay(app, &log))?) {
        println!("{} {} -> {} {}", req.method, req.path, resp.status, shorten(resp.json()));
    }
    Ok(())
}

/// Base64 PNG fields are replaced by a marker for the terminal.
fn shorten(mut body: serde_json::Value) -> serde_json::Value {
    if let Some(obj) = body.as_object_mut() {
        for v in obj.values_mut() {
            if v.as_str().is_some_and(|s| s.len() > 80) {
                *v = json!("<png>");
            }
        }
    }
    body
}
