//! JSON/PNG HTTP API over a [`SessionStore`].
//!
//! | method | path | body / response |
//! |---|---|---|
//! | POST | `/api/sessions` | multipart `image` (+ `n`, `seeds`, `segmenter`, `generator`) → session |
//! | GET | `/api/sessions` | `[id]` |
//! | GET | `/api/sessions/{id}` | session |
//! | GET | `/api/sessions/{id}/segments` | segment list |
//! | POST | `/api/sessions/{id}/edits` | `{segment_id, action, version}` → session + `conflict` |
//! | POST | `/api/sessions/{id}/recolorize` | session |
//! | GET | `/api/sessions/{id}/input.png`, `result.png`, `composed.png` | RGB PNG |
//! | GET | `/api/sessions/{id}/segmentation.png` | 16-bit segment ids |
//! | GET | `/api/sessions/{id}/references/{index}` | candidate PNG |
//! | GET | `/api/sessions/{id}/segments/{segment}/candidates/{index}` | candidate cropped to the segment bbox |
//!
//! Errors are `{code, stage, message}` with a matching HTTP status.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::session::{Session, SessionError, SessionStore};
use crate::composition::{assemble_reference, Choice, EditAction};
use crate::imagination::BBox;
use crate::io::{decode_rgb, encode_labels_png, encode_png};
use crate::pipeline::{PipelineParams, Stage};

/// Largest accepted upload.
pub const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub stage: Stage,
    pub message: String,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { code: "bad_request".into(), stage: Stage::Input, message: message.into(), status: 400 }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (code, status) = match &e {
            SessionError::NotFound(_) => ("not_found", 404),
            SessionError::InvalidEdit(_) => ("invalid_edit", 422),
            SessionError::Pipeline(p) if p.stage == Stage::Input => ("bad_request", 400),
            SessionError::Pipeline(_) => ("pipeline_failed", 500),
            SessionError::Storage(_) => ("storage", 500),
        };
        ApiError { code: code.into(), stage: e.stage(), message: e.to_string(), status }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub version: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub width: usize,
    pub height: usize,
    pub params: PipelineParams,
    pub reference_count: usize,
    pub segment_count: usize,
    pub beta: BTreeMap<u32, Choice>,
    pub edited_segments: Vec<u32>,
    pub edit_count: usize,
    pub input_url: String,
    pub result_url: String,
    pub composed_url: String,
    pub segmentation_url: String,
    pub segments_url: String,
    pub reference_urls: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict: Option<bool>,
}

impl SessionView {
    pub fn of(s: &Session) -> Self {
        let id = &s.meta.id;
        let base = format!("/api/sessions/{id}");
        let beta = s.assignment.beta().clone();
        SessionView {
            id: id.clone(),
            version: s.meta.version,
            created_ms: s.meta.created_ms,
            updated_ms: s.meta.updated_ms,
            width: s.meta.width,
            height: s.meta.height,
            params: s.meta.params.clone(),
            reference_count: s.references.len(),
            segment_count: s.segmentation().len(),
            edited_segments: beta.keys().copied().filter(|&j| s.assignment.is_edited(j)).collect(),
            beta,
            edit_count: s.assignment.edit_log().len(),
            input_url: format!("{base}/input.png"),
            result_url: format!("{base}/result.png?v={}", s.meta.version),
            composed_url: format!("{base}/composed.png?v={}", s.meta.version),
            segmentation_url: format!("{base}/segmentation.png"),
            segments_url: format!("{base}/segments"),
            reference_urls: (0..s.references.len()).map(|i| format!("{base}/references/{i}")).collect(),
            conflict: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub id: u32,
    pub class: u32,
    pub class_name: String,
    pub bbox: BBox,
    pub pixel_count: usize,
    pub beta: Choice,
    pub automatic: Choice,
    pub edited: bool,
    pub scores: Vec<f64>,
    pub candidates: Vec<String>,
}

pub fn segment_views(s: &Session) -> Vec<SegmentView> {
    let seg = s.segmentation();
    seg.segment_ids()
        .filter_map(|j| {
            let beta = s.assignment.choice(j)?;
            let class = seg.class_of(j).unwrap_or_default();
            Some(SegmentView {
                id: j,
                class,
                class_name: s.meta.class_names.get(&class).cloned().unwrap_or_else(|| format!("class {class}")),
                bbox: seg.bbox(j)?,
                pixel_count: seg.pixels(j).len(),
                beta,
                automatic: s.assignment.automatic_choice(j)?,
                edited: s.assignment.is_edited(j),
                scores: s.assignment.scores().get(&j).cloned().unwrap_or_default(),
                candidates: (0..s.references.len())
                    .map(|i| format!("/api/sessions/{}/segments/{j}/candidates/{i}", s.meta.id))
                    .collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub segment_id: u32,
    pub action: EditAction,
    #[serde(default)]
    pub version: Option<u64>,
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/segments", get(get_segments))
        .route("/api/sessions/{id}/edits", post(post_edit))
        .route("/api/sessions/{id}/recolorize", post(post_recolorize))
        .route("/api/sessions/{id}/input.png", get(get_input))
        .route("/api/sessions/{id}/result.png", get(get_result))
        .route("/api/sessions/{id}/composed.png", get(get_composed))
        .route("/api/sessions/{id}/segmentation.png", get(get_segmentation))
        .route("/api/sessions/{id}/references/{index}", get(get_reference))
        .route("/api/sessions/{id}/segments/{segment}/candidates/{index}", get(get_candidate))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(store)
}

/// Run blocking store work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, SessionError> + Send + 'static,
) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError { code: "internal".into(), stage: Stage::Session, message: e.to_string(), status: 500 }),
    }
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-cache")], bytes).into_response()
}

fn encode(img: &crate::colorspace::RgbImage) -> Result<Vec<u8>, SessionError> {
    encode_png(img).map_err(|e| SessionError::Storage(e.to_string()))
}

async fn create_session(State(store): State<Arc<SessionStore>>, mut multipart: Multipart) -> ApiResult<Response> {
    let mut image = None;
    let mut params = PipelineParams::default();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        let text = || String::from_utf8_lossy(&bytes).trim().to_string();
        match name.as_str() {
            "image" => image = Some(decode_rgb(&bytes).map_err(|e| ApiError::bad_request(e.to_string()))?),
            "n" => params.n = text().parse().map_err(|_| ApiError::bad_request(format!("bad n `{}`", text())))?,
            "seeds" => {
                let seeds = text()
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| ApiError::bad_request(format!("bad seeds `{}`", text())))?;
                params.seeds = Some(seeds);
            }
            "segmenter" => params.segmenter = text(),
            "generator" => params.generator = text(),
            other => return Err(ApiError::bad_request(format!("unknown field `{other}`"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing `image` field"))?;
    if let Some(seeds) = &params.seeds {
        params.n = seeds.len();
    }
    let session = blocking(move || store.create(&image, &params)).await?;
    Ok((StatusCode::CREATED, Json(SessionView::of(&session))).into_response())
}

async fn list_sessions(State(store): State<Arc<SessionStore>>) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(blocking(move || store.list()).await?))
}

async fn get_session(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let s = blocking(move || store.get(&id)).await?;
    Ok(Json(SessionView::of(&s)))
}

async fn get_segments(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<SegmentView>>> {
    let s = blocking(move || store.get(&id)).await?;
    Ok(Json(segment_views(&s)))
}

async fn post_edit(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    Json(req): Json<EditRequest>,
) -> ApiResult<Json<SessionView>> {
    let out = blocking(move || store.apply_edit(&id, req.segment_id, req.action, req.version)).await?;
    let mut view = SessionView::of(&out.session);
    view.conflict = Some(out.conflict);
    Ok(Json(view))
}

async fn post_recolorize(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let s = blocking(move || store.recolorize(&id)).await?;
    Ok(Json(SessionView::of(&s)))
}

async fn get_input(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(png(blocking(move || encode(&store.get(&id)?.input)).await?))
}

async fn get_result(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(png(blocking(move || encode(&store.get(&id)?.result)).await?))
}

async fn get_composed(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let s = store.get(&id)?;
        let composed = assemble_reference(&s.assignment, &s.references, &s.lightness())
            .map_err(|e| SessionError::InvalidEdit(e.to_string()))?;
        encode(&composed.image)
    })
    .await?;
    Ok(png(bytes))
}

async fn get_segmentation(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let s = store.get(&id)?;
        encode_labels_png(s.segmentation().labels()).map_err(|e| SessionError::Storage(e.to_string()))
    })
    .await?;
    Ok(png(bytes))
}

fn not_found(what: String) -> SessionError {
    SessionError::NotFound(what)
}

async fn get_reference(
    State(store): State<Arc<SessionStore>>,
    Path((id, index)): Path<(String, usize)>,
) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let s = store.get(&id)?;
        let r = s.references.references.get(index).ok_or_else(|| not_found(format!("{id}/references/{index}")))?;
        encode(r)
    })
    .await?;
    Ok(png(bytes))
}

async fn get_candidate(
    State(store): State<Arc<SessionStore>>,
    Path((id, segment, index)): Path<(String, u32, usize)>,
) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let s = store.get(&id)?;
        let missing = || not_found(format!("{id}/segments/{segment}/candidates/{index}"));
        let bbox = s.segmentation().bbox(segment).ok_or_else(missing)?;
        let r = s.references.references.get(index).ok_or_else(missing)?;
        encode(&r.crop(bbox.y0, bbox.x0, bbox.height(), bbox.width()))
    })
    .await?;
    Ok(png(bytes))
}

/// Serve until interrupted.
pub async fn serve(store: Arc<SessionStore>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
