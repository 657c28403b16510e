//! `/api/v1` endpoints against an untrained 32×32 model.

use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dscm_cli::service::{router, AppState, CounterfactualResponse, Snapshot, CONFIG_HASH_HEADER};
use dscm_core::auxiliary::{AuxRole, Segmentor, SegmentorConfig};
use dscm_core::dscm::Dscm;
use dscm_core::flow::{fit_statistics, FlowSet};
use dscm_core::hvae::{Hvae, HvaeConfig};
use dscm_core::synth::{generate_in_memory, SceneSpec, Split};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const HASH: &str = "cafe01";

fn snapshot() -> Snapshot {
    let spec = SceneSpec::three_structures(32, 32);
    let data = generate_in_memory(12, 5, &spec).unwrap();
    let graph = fit_statistics(&spec.graph(), &data).unwrap();
    let flows = FlowSet::<f64>::identity(&graph, 4, 5).unwrap();
    let hvae = Hvae::<f32>::new(
        HvaeConfig {
            height: 32,
            width: 32,
            levels: 3,
            channels: vec![3, 4, 4],
            latent_channels: 1,
            parent_dim: 3,
            sigma_x: 0.1,
        },
        5,
    )
    .unwrap();
    let evaluator = Segmentor::<f32>::new(
        SegmentorConfig {
            structures: spec.structure_names(),
            height: 32,
            width: 32,
            channels: 2,
            pixel_area: 1.0,
        },
        AuxRole::Eval,
        6,
    )
    .unwrap();
    let samples = data
        .into_iter()
        .enumerate()
        .map(|(i, o)| (if i < 8 { Split::Train } else { Split::Test }, o))
        .collect();
    Snapshot {
        config_hash: HASH.into(),
        regime: "none".into(),
        model: Dscm::new(graph, flows, hvae).unwrap(),
        evaluator: Some(evaluator),
        samples,
    }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Option<String>, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let (parts, body) = resp.into_parts();
    let header = |k: &str| parts.headers.get(k).map(|v| v.to_str().unwrap().to_string());
    let (ctype, hash) = (header("content-type"), header(CONFIG_HASH_HEADER));
    let bytes = body.collect().await.unwrap().to_bytes();
    (status, ctype, hash, serde_json::from_slice(&bytes).unwrap())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(body: &Value) -> Request<Body> {
    Request::post("/api/v1/counterfactual")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn f32s(encoded: &str) -> Vec<f32> {
    B64.decode(encoded)
        .unwrap()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[tokio::test]
async fn samples_are_paged_and_carry_the_config_hash() {
    let app = router(AppState::new(Some(snapshot())));
    let (status, _, hash, body) = call(&app, get("/api/v1/samples?split=train&page=1&page_size=3")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(hash.as_deref(), Some(HASH));
    assert_eq!(body["config_hash"], HASH);
    assert_eq!(body["total"], 8);
    let items = body["items"].as_array().unwrap();
    assert_eq!(items.len(), 3);
    assert_eq!(items[0]["id"], "000003");
    assert!(items[0]["attributes"]["left"].as_f64().unwrap() > 0.0);
    assert_eq!(items[0]["thumbnail"]["encoding"], "png-rgb8");

    let (status, _, _, body) = call(&app, get("/api/v1/samples?page_size=0")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["invalid_params"][0]["name"], "page_size");
}

#[tokio::test]
async fn sample_detail_and_not_found() {
    let app = router(AppState::new(Some(snapshot())));
    let (status, _, _, body) = call(&app, get("/api/v1/samples/000009")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["split"], "test");
    assert_eq!(body["image"]["encoding"], "png-gray16");
    assert_eq!(body["predicted_areas"].as_object().unwrap().len(), 3);

    let (status, ctype, hash, body) = call(&app, get("/api/v1/samples/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(ctype.as_deref(), Some("application/problem+json"));
    assert_eq!(hash.as_deref(), Some(HASH));
    assert_eq!(body["status"], 404);
}

#[tokio::test]
async fn model_info_serves_feasible_ranges() {
    let snap = snapshot();
    let expected: BTreeMap<String, (f64, f64)> = snap
        .model
        .graph
        .attributes
        .iter()
        .map(|a| (a.name.clone(), a.feasible_range().unwrap()))
        .collect();
    let app = router(AppState::new(Some(snap)));
    let (status, _, _, body) = call(&app, get("/api/v1/model/info")).await;
    assert_eq!(status, StatusCode::OK);
    for a in body["attributes"].as_array().unwrap() {
        let (lo, hi) = expected[a["name"].as_str().unwrap()];
        assert_eq!(a["feasible_range"], json!([lo, hi]));
    }
    assert_eq!(body["structures"], json!(["left", "right", "center"]));
}

#[tokio::test]
async fn identity_request_returns_factual_parents_exactly() {
    let snap = snapshot();
    let (_, o) = snap.samples[2].clone();
    let recon = snap.model.reconstruct(&o.image, &o.attributes).unwrap();
    let floor = recon.data.iter().zip(&o.image.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / 1024.0;
    let app = router(AppState::new(Some(snap)));
    let assignments: BTreeMap<&str, f64> = ["left", "right", "center"]
        .iter()
        .map(|s| (*s, o.attributes.get(s).unwrap()))
        .collect();
    let (status, _, _, body) = call(&app, post(&json!({ "sample_id": o.id, "assignments": assignments }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let r: CounterfactualResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.parents_cf, o.attributes.values);
    assert!(r.warnings.is_empty());
    assert_eq!((r.counterfactual_image.width, r.counterfactual_image.height), (32, 32));
    let diff = f32s(&r.diff.data);
    let energy = diff.iter().map(|d| d.abs() as f64).sum::<f64>() / 1024.0;
    assert!(energy <= floor + 1e-6, "diff {energy} vs reconstruction {floor}");
    let m = diff.iter().fold(0.0f32, |a, d| a.max(d.abs()));
    assert_eq!(r.colormap.limit, if m > 0.0 { m } else { 1.0 });
    assert_eq!(r.predicted_areas.unwrap().counterfactual.len(), 3);
}

#[tokio::test]
async fn out_of_range_target_is_clamped_with_a_warning() {
    let snap = snapshot();
    let id = snap.samples[0].1.id.clone();
    let (_, hi) = snap.model.graph.attribute("left").unwrap().feasible_range().unwrap();
    let app = router(AppState::new(Some(snap)));
    let (status, _, _, body) = call(&app, post(&json!({ "sample_id": id, "assignments": { "left": 1e6 } }))).await;
    assert_eq!(status, StatusCode::OK);
    let r: CounterfactualResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.warnings.len(), 1, "{:?}", r.warnings);
    assert_eq!(r.applied["left"], hi);
    assert_eq!(r.parents_cf["left"], hi);
}

#[tokio::test]
async fn invalid_assignments_list_the_offending_variables() {
    let snap = snapshot();
    let id = snap.samples[0].1.id.clone();
    let app = router(AppState::new(Some(snap)));
    let req = json!({ "sample_id": id, "assignments": { "left": -3.0, "volume": 2.0, "x": 1.0 } });
    let (status, ctype, _, body) = call(&app, post(&req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(ctype.as_deref(), Some("application/problem+json"));
    let mut names: Vec<&str> = body["invalid_params"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["left", "volume", "x"]);

    let (status, _, _, _) = call(&app, post(&json!({ "sample_id": "nope", "assignments": { "left": 3.0 } }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _, _, body) = call(&app, post(&json!({ "assignments": 3 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["status"], 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let snap = snapshot();
    let o = snap.samples[4].1.clone();
    let app = router(AppState::new(Some(snap)));
    let req = json!({ "sample_id": o.id, "assignments": { "center": o.attributes.get("center").unwrap() * 1.3 } });
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (app, req) = (app.clone(), req.clone());
            tokio::spawn(async move { call(&app, post(&req)).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let (status, _, _, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn unloaded_model_is_unavailable_and_swap_is_atomic() {
    let state = AppState::new(None);
    let app = router(state.clone());
    for uri in ["/api/v1/samples", "/api/v1/model/info", "/api/v1/samples/000001"] {
        let (status, ctype, _, body) = call(&app, get(uri)).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
        assert_eq!(ctype.as_deref(), Some("application/problem+json"));
        assert_eq!(body["status"], 503);
    }
    assert!(state.swap(Some(snapshot())).is_none());
    let (status, _, hash, _) = call(&app, get("/api/v1/model/info")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(hash.as_deref(), Some(HASH));

    let (status, _, _, _) = call(&app, get("/api/v2/model/info")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
