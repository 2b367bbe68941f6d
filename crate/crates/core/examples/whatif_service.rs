//! Drives the what-if HTTP API in-process: trains a small twin and
//! guardian, opens a session, applies a level change and asks for
//! counterfactual forecasts of two alternatives.
//!
//! `cargo run --release --example whatif_service`
//!
//! The same API is served over TCP by `cormpo serve --twin twin.ctwn`.

use std::time::Duration;

use axum::body::Body;
use axum::http::Request;
use axum::Router;
use cormpo::guardian::{guardian_fit, GuardianConfig};
use cormpo::service::{router, AppState, Models};
use cormpo::synth::{GeneratorConfig, ScriptedExpert, SynthEnv};
use cormpo::twin::{train_forecaster, AnyTwin, MlpForecaster, MlpParams, TrainConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: Value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    println!("{method} {uri} -> {status}");
    v
}

#[tokio::main]
async fn main() -> cormpo::Result<()> {
    let env = SynthEnv::new(GeneratorConfig { n_trajectories: 300, seed: 4, ..Default::default() });
    let ds = env.generate_dataset(&ScriptedExpert)?;
    let mut twin = MlpForecaster::new(MlpParams { hidden: vec![64], dropout_p: 0.2 }, 1)?;
    train_forecaster(&mut twin, &ds, &TrainConfig { max_epochs: 15, ..Default::default() })?;
    let (guardian, _) = guardian_fit(&ds, &GuardianConfig::default())?;
    let models = Models { twin: AnyTwin::Mlp(twin), guardian: Some(guardian), policy: None, generator: env };
    let app = router(AppState::new(models, Duration::from_secs(600)));

    println!("{}", call(&app, "GET", "/capabilities", None).await);
    let session = call(&app, "POST", "/sessions", Some(json!({"seed": 7}))).await;
    let id = session["id"].as_str().unwrap().to_string();
    let p0 = session["plevel"].as_i64().unwrap();
    println!("session {id} starts at P{p0}");

    let lower = (p0 - 1).max(2);
    let step = call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({"plevel": lower}))).await;
    println!("stepped to P{lower}: u = {}, ood = {}, ACP = {}, WS = {}", step["u"], step["ood"], step["acp"], step["ws"]);

    for plevel in [lower, (lower - 2).max(2)] {
        let body = json!({"plevel": plevel, "horizon": 6, "n_samples": 30});
        let w = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(body)).await;
        let map = &w["bands"]["map"];
        let last = |q: &str| map[q].as_array().and_then(|a| a.last()).and_then(Value::as_f64).unwrap_or(f64::NAN);
        println!(
            "  hold P{plevel} for 6h: final-hour MAP p10 {:.1}  p50 {:.1}  p90 {:.1}",
            last("p10"),
            last("p50"),
            last("p90")
        );
    }
    call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    Ok(())
}
