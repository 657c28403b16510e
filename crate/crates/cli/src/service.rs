//! JSON-over-HTTP counterfactual service under `/api/v1`.
//!
//! Requests run against an immutable [`Snapshot`]; reloading swaps the whole
//! snapshot atomically, so in-flight requests finish on the model they started
//! with. The generation path needs no segmentor; the evaluation segmentor is
//! only used for the area readouts returned next to the images.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dscm_core::auxiliary::soft_area;
use dscm_core::dscm::{AbductionMode, Dscm};
use dscm_core::graph::{AttributeKind, AttributeVector, CausalGraph, Intervention, Observation};
use dscm_core::image::Image;
use dscm_core::report::{diff_to_rgb, gray_to_rgb, DiffColormap};
use dscm_core::synth::{Dataset, Split};
use dscm_core::{Error, Segmentor32};

pub const API_PREFIX: &str = "/api/v1";
pub const CONFIG_HASH_HEADER: &str = "x-config-hash";
const MAX_PAGE_SIZE: usize = 100;

/// Everything a request needs, loaded once and never mutated.
pub struct Snapshot {
    pub config_hash: String,
    pub regime: String,
    pub model: Dscm<f32>,
    pub evaluator: Option<Segmentor32>,
    pub samples: Vec<(Split, Observation)>,
}

impl Snapshot {
    pub fn from_dataset(
        config_hash: String,
        regime: String,
        model: Dscm<f32>,
        evaluator: Option<Segmentor32>,
        dataset: &Dataset,
    ) -> Self {
        let mut samples = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            samples.extend(dataset.split(split).iter().map(|o| (split, o.clone())));
        }
        Self {
            config_hash,
            regime,
            model,
            evaluator,
            samples,
        }
    }

    fn find(&self, id: &str) -> Option<&(Split, Observation)> {
        self.samples.iter().find(|(_, o)| o.id == id)
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    current: Arc<RwLock<Option<Arc<Snapshot>>>>,
}

impl AppState {
    pub fn new(snapshot: Option<Snapshot>) -> Self {
        Self {
            current: Arc::new(RwLock::new(snapshot.map(Arc::new))),
        }
    }

    /// Replaces the served snapshot; returns the previous one.
    pub fn swap(&self, snapshot: Option<Snapshot>) -> Option<Arc<Snapshot>> {
        let mut guard = self.current.write().expect("snapshot lock poisoned");
        std::mem::replace(&mut *guard, snapshot.map(Arc::new))
    }

    fn get(&self) -> Result<Arc<Snapshot>, ApiError> {
        self.current
            .read()
            .expect("snapshot lock poisoned")
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model unavailable", "no model is loaded"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvalidParam {
    pub name: String,
    pub reason: String,
}

/// RFC 7807 problem document.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    title: String,
    detail: String,
    invalid_params: Vec<InvalidParam>,
    config_hash: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, title: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            title: title.into(),
            detail: detail.into(),
            invalid_params: Vec::new(),
            config_hash: None,
        }
    }

    fn with_hash(mut self, hash: &str) -> Self {
        self.config_hash = Some(hash.to_string());
        self
    }

    fn validation(detail: impl Into<String>, params: Vec<InvalidParam>) -> Self {
        let mut e = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation error", detail);
        e.invalid_params = params;
        e
    }

    fn from_core(e: Error) -> Self {
        match &e {
            Error::UnknownAttribute(name) => Self::validation(
                e.to_string(),
                vec![InvalidParam {
                    name: name.clone(),
                    reason: "unknown attribute".into(),
                }],
            ),
            _ if e.is_validation() => Self::validation(e.to_string(), Vec::new()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let slug = self.title.replace(' ', "-");
        let mut body = json!({
            "type": format!("https://dscm.invalid/problems/{slug}"),
            "title": self.title,
            "status": self.status.as_u16(),
            "detail": self.detail,
            "config_hash": self.config_hash,
        });
        if !self.invalid_params.is_empty() {
            body["invalid_params"] = serde_json::to_value(&self.invalid_params).expect("params serialise");
        }
        let mut resp = (self.status, Json(body)).into_response();
        resp.headers_mut()
            .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/problem+json"));
        if let Some(h) = self.config_hash.as_deref().and_then(|h| HeaderValue::from_str(h).ok()) {
            resp.headers_mut().insert(CONFIG_HASH_HEADER, h);
        }
        resp
    }
}

/// JSON body plus the config hash, both as a header and as a body field.
fn ok(hash: &str, mut body: Value) -> Response {
    body["config_hash"] = Value::String(hash.to_string());
    let mut resp = Json(body).into_response();
    if let Ok(h) = HeaderValue::from_str(hash) {
        resp.headers_mut().insert(CONFIG_HASH_HEADER, h);
    }
    resp
}

/// Lossless image on the wire.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncodedImage {
    pub width: usize,
    pub height: usize,
    /// `png-gray16`, `png-rgb8` or `f32le` (raw little-endian floats, row-major).
    pub encoding: String,
    pub data: String,
}

fn png_gray16(image: &Image) -> EncodedImage {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().expect("in-memory png header");
        let raw: Vec<u8> = image
            .data
            .iter()
            .flat_map(|&v| (((v.clamp(0.0, 1.0) as f64) * 65535.0).round() as u16).to_be_bytes())
            .collect();
        w.write_image_data(&raw).expect("in-memory png data");
    }
    EncodedImage {
        width: image.width,
        height: image.height,
        encoding: "png-gray16".into(),
        data: B64.encode(bytes),
    }
}

fn f32le(image: &Image) -> EncodedImage {
    let raw: Vec<u8> = image.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    EncodedImage {
        width: image.width,
        height: image.height,
        encoding: "f32le".into(),
        data: B64.encode(raw),
    }
}

fn png_rgb(img: &dscm_core::report::RgbImage) -> Result<EncodedImage, ApiError> {
    let bytes = img.to_png_bytes().map_err(ApiError::from_core)?;
    Ok(EncodedImage {
        width: img.width,
        height: img.height,
        encoding: "png-rgb8".into(),
        data: B64.encode(bytes),
    })
}

fn areas(snapshot: &Snapshot, image: &Image) -> Result<Option<BTreeMap<String, f64>>, ApiError> {
    let Some(seg) = &snapshot.evaluator else {
        return Ok(None);
    };
    let mask = seg.predict_masks(image).map_err(ApiError::from_core)?;
    let mut out = BTreeMap::new();
    for s in &mask.structures {
        out.insert(s.clone(), soft_area(&mask, s).map_err(ApiError::from_core)?);
    }
    Ok(Some(out))
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    pub split: Option<String>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

fn parse_split(s: &str) -> Option<Split> {
    match s {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        _ => None,
    }
}

async fn list_samples(State(state): State<AppState>, Query(q): Query<PageQuery>) -> Result<Response, ApiError> {
    let snap = state.get()?;
    let hash = snap.config_hash.clone();
    let split = match q.split.as_deref() {
        None => Split::Test,
        Some(s) => parse_split(s).ok_or_else(|| {
            ApiError::validation(
                format!("unknown split `{s}`"),
                vec![InvalidParam {
                    name: "split".into(),
                    reason: "expected train, val or test".into(),
                }],
            )
            .with_hash(&hash)
        })?,
    };
    let page = q.page.unwrap_or(0);
    let page_size = q.page_size.unwrap_or(20);
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::validation(
            format!("page_size must be in 1..={MAX_PAGE_SIZE}"),
            vec![InvalidParam {
                name: "page_size".into(),
                reason: format!("{page_size} is out of range"),
            }],
        )
        .with_hash(&hash));
    }
    let all: Vec<&Observation> = snap.samples.iter().filter(|(s, _)| *s == split).map(|(_, o)| o).collect();
    let mut items = Vec::new();
    for o in all.iter().skip(page * page_size).take(page_size) {
        let thumb = png_rgb(&gray_to_rgb(&o.image, 1)).map_err(|e| e.with_hash(&hash))?;
        items.push(json!({
            "id": o.id,
            "split": split.name(),
            "attributes": o.attributes.values,
            "thumbnail": thumb,
        }));
    }
    Ok(ok(
        &hash,
        json!({ "items": items, "page": page, "page_size": page_size, "total": all.len() }),
    ))
}

async fn get_sample(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let snap = state.get()?;
    let hash = snap.config_hash.clone();
    let (split, o) = snap
        .find(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not found", format!("unknown sample `{id}`")).with_hash(&hash))?;
    let predicted = areas(&snap, &o.image).map_err(|e| e.with_hash(&hash))?;
    Ok(ok(
        &hash,
        json!({
            "id": o.id,
            "split": split.name(),
            "attributes": o.attributes.values,
            "image": png_gray16(&o.image),
            "predicted_areas": predicted,
        }),
    ))
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CounterfactualRequest {
    pub sample_id: String,
    pub assignments: BTreeMap<String, f64>,
    #[serde(default)]
    pub abduction: AbductionMode,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictedAreas {
    pub factual: BTreeMap<String, f64>,
    pub counterfactual: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CounterfactualResponse {
    pub sample_id: String,
    pub factual_image: EncodedImage,
    pub counterfactual_image: EncodedImage,
    /// Exact `x̃ − x`.
    pub diff: EncodedImage,
    /// `diff` rendered with `colormap`.
    pub diff_map: EncodedImage,
    pub colormap: DiffColormap,
    pub predicted_areas: Option<PredictedAreas>,
    pub factual_parents: BTreeMap<String, f64>,
    pub parents_cf: BTreeMap<String, f64>,
    pub applied: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub config_hash: String,
}

pub fn counterfactual_response(snap: &Snapshot, req: &CounterfactualRequest) -> Result<CounterfactualResponse, ApiError> {
    let hash = &snap.config_hash;
    let (_, o) = snap.find(&req.sample_id).ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "not found", format!("unknown sample `{}`", req.sample_id)).with_hash(hash)
    })?;
    let iv = Intervention {
        assignments: req.assignments.clone(),
    };
    let problems = iv.problems(&snap.model.graph);
    if !problems.is_empty() {
        let params = problems
            .into_iter()
            .map(|(name, reason)| InvalidParam { name, reason })
            .collect();
        return Err(ApiError::validation("invalid assignments", params).with_hash(hash));
    }
    let r = snap
        .model
        .counterfactual(&o.image, &o.attributes, &iv, req.abduction)
        .map_err(|e| ApiError::from_core(e).with_hash(hash))?;
    let colormap = DiffColormap::symmetric(&[&r.diff]);
    let predicted = match (areas(snap, &o.image)?, areas(snap, &r.image_cf)?) {
        (Some(factual), Some(counterfactual)) => Some(PredictedAreas { factual, counterfactual }),
        _ => None,
    };
    Ok(CounterfactualResponse {
        sample_id: o.id.clone(),
        factual_image: png_gray16(&o.image),
        counterfactual_image: png_gray16(&r.image_cf),
        diff: f32le(&r.diff),
        diff_map: png_rgb(&diff_to_rgb(&r.diff, &colormap, 1))?,
        colormap,
        predicted_areas: predicted,
        factual_parents: o.attributes.values.clone(),
        parents_cf: r.parents_cf.values,
        applied: r.applied.assignments,
        warnings: r.warnings,
        config_hash: hash.clone(),
    })
}

async fn post_counterfactual(
    State(state): State<AppState>,
    body: Result<Json<CounterfactualRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let snap = state.get()?;
    let Json(req) = body.map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "malformed request", e.body_text()).with_hash(&snap.config_hash)
    })?;
    let hash = snap.config_hash.clone();
    let resp = tokio::task::spawn_blocking(move || counterfactual_response(&snap, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", e.to_string()).with_hash(&hash))??;
    let body = serde_json::to_value(&resp).expect("response serialises");
    Ok(ok(&hash, body))
}

fn kind_name(kind: AttributeKind) -> &'static str {
    match kind {
        AttributeKind::ContinuousPositive => "continuous-positive",
        AttributeKind::ContinuousReal => "continuous-real",
        AttributeKind::Binary => "binary",
    }
}

pub fn model_info(snap: &Snapshot) -> Value {
    let g: &CausalGraph = &snap.model.graph;
    let attributes: Vec<Value> = g
        .attributes
        .iter()
        .map(|a| {
            json!({
                "name": a.name,
                "kind": kind_name(a.kind),
                "unit": a.unit,
                "parents": a.parents,
                "image_parent": g.image_parents.contains(&a.name),
                "observed_range": a.observed_range,
                "feasible_range": a.feasible_range(),
            })
        })
        .collect();
    let c = &snap.model.hvae.config;
    json!({
        "regime": snap.regime,
        "graph_hash": g.structure_hash(),
        "image": { "height": c.height, "width": c.width },
        "structures": g.image_parents,
        "attributes": attributes,
        "evaluator_id": snap.evaluator.as_ref().map(|s| s.id()),
    })
}

async fn get_model_info(State(state): State<AppState>) -> Result<Response, ApiError> {
    let snap = state.get()?;
    Ok(ok(&snap.config_hash, model_info(&snap)))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/samples", get(list_samples))
        .route("/samples/:id", get(get_sample))
        .route("/counterfactual", post(post_counterfactual))
        .route("/model/info", get(get_model_info));
    Router::new().nest(API_PREFIX, api).fallback(fallback).with_state(state)
}

/// Factual attribute values as an assignment map: the identity intervention.
pub fn identity_assignments(attributes: &AttributeVector, structures: &[String]) -> BTreeMap<String, f64> {
    structures
        .iter()
        .filter_map(|s| attributes.values.get(s).map(|v| (s.clone(), *v)))
        .collect()
}
