use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rotulus::corpus::{parse_pagexml, write_pagexml, PageDocument, Point, TextLine};
use rotulus::correct::{correct_transcription, translate};
use rotulus::lineproc::RasterImage;
use rotulus::pipeline::{reading_order, segment_page};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::store::{Baseline, CropRect, DocumentRecord, Job, JobKind, StoreError};
use crate::AppState;

type AppResult<T> = Result<T, ApiError>;

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError(status, msg.into())
    }
    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no {what} {id}"))
    }
    fn conflict(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, msg)
    }
    fn unprocessable(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, msg)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        tracing::error!("store: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    let v1 = Router::new()
        .route("/openapi.json", get(|| async { Json(crate::openapi()) }))
        .route("/documents", post(upload))
        .route("/documents/{id}", get(get_document))
        .route("/documents/{id}/image", get(get_image))
        .route("/documents/{id}/crop", post(crop))
        .route("/documents/{id}/segment", post(segment))
        .route("/documents/{id}/baselines", get(get_baselines).put(put_baselines))
        .route("/documents/{id}/transcribe", post(transcribe))
        .route("/documents/{id}/correct", post(correct))
        .route("/documents/{id}/translate", post(translate_doc))
        .route("/documents/{id}/export", get(export))
        .route("/jobs/{id}", get(get_job))
        .layer(DefaultBodyLimit::max(limit));
    Router::new().nest("/v1", v1).with_state(state)
}

fn document(state: &AppState, id: &str) -> AppResult<DocumentRecord> {
    state
        .store
        .document(id)
        .ok_or_else(|| ApiError::not_found("document", id))
}

/// Runs `f` on the stored document under the store lock.
fn update<T>(
    state: &AppState,
    id: &str,
    f: impl FnOnce(&mut DocumentRecord) -> AppResult<T>,
) -> AppResult<T> {
    state
        .store
        .update_document(id, f)
        .unwrap_or_else(|| Err(ApiError::not_found("document", id)))
}

fn view(doc: &DocumentRecord) -> Value {
    json!({
        "id": doc.id,
        "stage": doc.stage(),
        "width": doc.width,
        "height": doc.height,
        "crop": doc.crop,
        "baselines": doc.baselines,
        "raw": doc.raw,
        "corrected": doc.corrected,
        "translation": doc.translation,
        "timestamps": doc.timestamps,
    })
}

async fn upload(State(state): State<Arc<AppState>>, req: Request) -> AppResult<Response> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let bytes: Bytes = if multipart {
        let mut mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let field = mp
            .next_field()
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "multipart body has no parts"))?;
        field
            .bytes()
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?
    } else {
        Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?
    };
    if bytes.len() > state.config.max_upload_bytes {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "upload exceeds the size limit"));
    }
    let image = RasterImage::decode(&bytes)
        .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("not a decodable image: {e}")))?;
    let st = state.clone();
    let doc = tokio::task::spawn_blocking(move || st.store.create_document(&bytes, image))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    tracing::info!(id = %doc.id, width = doc.width, height = doc.height, "document uploaded");
    Ok((StatusCode::CREATED, Json(json!({ "id": doc.id }))).into_response())
}

async fn get_document(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<Value>> {
    Ok(Json(view(&document(&state, &id)?)))
}

async fn get_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Response> {
    let doc = document(&state, &id)?;
    let img = state.store.working_image(&doc)?;
    let png = img.to_png(false);
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn crop(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(rect): Json<CropRect>,
) -> AppResult<Json<Value>> {
    let doc = update(&state, &id, |d| {
        if !rect.fits(d.width, d.height) {
            return Err(ApiError::unprocessable(format!(
                "crop {}x{}+{}+{} does not fit a {}x{} image",
                rect.w, rect.h, rect.x, rect.y, d.width, d.height
            )));
        }
        d.crop = Some(rect);
        d.timestamps.cropped = Some(crate::store::now_ms());
        d.clear_from_baselines();
        d.revision += 1;
        Ok(d.clone())
    })?;
    Ok(Json(view(&doc)))
}

/// Validates polylines against the working image, orders them top to bottom
/// and fills in missing ids.
fn prepare_baselines(lines: Vec<(Option<String>, Vec<Point>)>, width: usize, height: usize) -> AppResult<Vec<Baseline>> {
    let order = reading_order(&lines.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>());
    let mut out = Vec::with_capacity(lines.len());
    let mut seen = std::collections::HashSet::new();
    for (k, i) in order.into_iter().enumerate() {
        let (id, points) = &lines[i];
        let id = id.clone().unwrap_or_else(|| format!("l{}", k + 1));
        TextLine::new(id.clone(), points.clone())
            .validate(width as u32, height as u32)
            .map_err(|m| ApiError::unprocessable(format!("baseline {id}: {m}")))?;
        if !seen.insert(id.clone()) {
            return Err(ApiError::unprocessable(format!("duplicate baseline id {id}")));
        }
        out.push(Baseline { id, points: points.clone() });
    }
    Ok(out)
}

fn require_crop(state: &AppState, doc: &DocumentRecord) -> AppResult<()> {
    if state.config.require_crop && doc.crop.is_none() {
        return Err(ApiError::conflict("crop the document before segmenting"));
    }
    Ok(())
}

/// Segments with the network, or takes baselines from a PageXML body whose
/// coordinates refer to the working (cropped) image.
async fn segment(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> AppResult<Response> {
    let doc = document(&state, &id)?;
    require_crop(&state, &doc)?;
    let (w, h) = doc.working_size();
    let uploaded = if body.iter().any(|b| !b.is_ascii_whitespace()) {
        let parsed = parse_pagexml(&body).map_err(|e| ApiError::unprocessable(format!("PageXML: {e}")))?;
        let lines = parsed
            .doc
            .lines
            .into_iter()
            .map(|l| (Some(l.id), l.baseline))
            .collect();
        Some(prepare_baselines(lines, w, h)?)
    } else {
        None
    };
    if uploaded.is_none() && state.engines.segmenter.is_none() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no segmentation model loaded; send baselines as a PageXML body",
        ));
    }
    let job = state.store.create_job(JobKind::Segment, &id)?;
    let st = state.clone();
    let sem = state.compute.clone();
    spawn_job(state, job.clone(), sem, doc.revision, move |doc| {
        let baselines = match uploaded {
            Some(b) => b,
            None => {
                let model = st.engines.segmenter.clone().expect("checked above");
                let img = st.store.working_image(doc).map_err(|e| e.to_string())?;
                let lines = segment_page(&img, &model, &st.config.segment).map_err(|e| e.to_string())?;
                let (w, h) = doc.working_size();
                prepare_baselines(lines.into_iter().map(|p| (None, p)).collect(), w, h).map_err(|e| e.1)?
            }
        };
        Ok(Box::new(move |d: &mut DocumentRecord| {
            d.clear_from_baselines();
            d.baselines = Some(baselines);
            d.timestamps.segmented = Some(crate::store::now_ms());
            d.revision += 1;
        }))
    });
    Ok(accepted(&job))
}

async fn get_baselines(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let doc = document(&state, &id)?;
    Ok(Json(json!({ "baselines": doc.baselines })))
}

#[derive(Deserialize)]
struct BaselineIn {
    #[serde(default)]
    id: Option<String>,
    points: Vec<Point>,
}

#[derive(Deserialize)]
struct BaselinesIn {
    baselines: Vec<BaselineIn>,
}

async fn put_baselines(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<BaselinesIn>,
) -> AppResult<Json<Value>> {
    let doc = update(&state, &id, |d| {
        require_crop(&state, d)?;
        let (w, h) = d.working_size();
        let lines = body.baselines.into_iter().map(|b| (b.id, b.points)).collect();
        let b = prepare_baselines(lines, w, h)?;
        d.clear_from_baselines();
        d.baselines = Some(b);
        d.timestamps.segmented = Some(crate::store::now_ms());
        d.revision += 1;
        Ok(d.clone())
    })?;
    Ok(Json(view(&doc)))
}

async fn transcribe(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Response> {
    let doc = document(&state, &id)?;
    if doc.baselines.as_ref().is_none_or(|b| b.is_empty()) {
        return Err(ApiError::conflict("document has no baselines; segment it first"));
    }
    let Some(t) = state.engines.transcriber.clone() else {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no recognizer weights loaded"));
    };
    let job = state.store.create_job(JobKind::Transcribe, &id)?;
    let st = state.clone();
    let sem = state.compute.clone();
    spawn_job(state, job.clone(), sem, doc.revision, move |doc| {
        let img = st.store.working_image(doc).map_err(|e| e.to_string())?;
        let baselines: Vec<Vec<Point>> = doc
            .baselines
            .as_ref()
            .map(|b| b.iter().map(|l| l.points.clone()).collect())
            .unwrap_or_default();
        let lines = t.transcribe_page(&img, &baselines, 1).map_err(|e| e.to_string())?;
        Ok(Box::new(move |d: &mut DocumentRecord| {
            d.clear_text();
            d.raw = Some(lines);
            d.timestamps.transcribed = Some(crate::store::now_ms());
            d.revision += 1;
        }))
    });
    Ok(accepted(&job))
}

fn llm_job(state: Arc<AppState>, id: String, kind: JobKind) -> AppResult<Response> {
    let doc = document(&state, &id)?;
    if doc.raw.is_none() {
        return Err(ApiError::conflict("document has no transcription yet"));
    }
    let job = state.store.create_job(kind, &id)?;
    let engines = state.engines.clone();
    let sem = state.llm.clone();
    spawn_job(state, job.clone(), sem, doc.revision, move |doc| {
        let provider = engines.provider.clone().ok_or_else(|| {
            format!(
                "language-model provider unavailable: {}",
                engines.provider_error.as_deref().unwrap_or("not configured")
            )
        })?;
        let raw = doc.raw.clone().unwrap_or_default();
        match kind {
            JobKind::Correct => {
                let r = correct_transcription(&raw, provider.as_ref()).map_err(|e| e.to_string())?;
                Ok(Box::new(move |d: &mut DocumentRecord| {
                    d.corrected = Some(r);
                    d.timestamps.corrected = Some(crate::store::now_ms());
                }))
            }
            _ => {
                let text = translate(&raw, provider.as_ref()).map_err(|e| e.to_string())?;
                Ok(Box::new(move |d: &mut DocumentRecord| {
                    d.translation = Some(text);
                    d.timestamps.translated = Some(crate::store::now_ms());
                }))
            }
        }
    });
    Ok(accepted(&job))
}

async fn correct(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Response> {
    llm_job(state, id, JobKind::Correct)
}

async fn translate_doc(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Response> {
    llm_job(state, id, JobKind::Translate)
}

fn accepted(job: &Job) -> Response {
    (
        StatusCode::ACCEPTED,
        [(header::LOCATION, format!("/v1/jobs/{}", job.id))],
        Json(json!({ "job_id": job.id })),
    )
        .into_response()
}

type Apply = Box<dyn FnOnce(&mut DocumentRecord) + Send>;

/// Queues `work` on a worker pool. The work sees the document as it was at
/// submission; its result is applied only if no conflicting change (same
/// `revision`) happened meanwhile, otherwise the job fails.
fn spawn_job<F>(state: Arc<AppState>, job: Job, pool: Arc<Semaphore>, revision: u64, work: F)
where
    F: FnOnce(&DocumentRecord) -> Result<Apply, String> + Send + 'static,
{
    tokio::spawn(async move {
        let _permit = pool.acquire_owned().await;
        if let Err(e) = state.store.start_job(&job.id) {
            tracing::error!("job {}: {e}", job.id);
        }
        let st = state.clone();
        let doc_id = job.document.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let doc = st.store.document(&doc_id).ok_or("document disappeared")?;
            if doc.revision != revision {
                return Err("document changed before the job started".to_string());
            }
            let apply = work(&doc)?;
            st.store
                .update_document(&doc_id, |d| {
                    if d.revision != revision {
                        return Ok(Err("document changed while the job was running".to_string()));
                    }
                    apply(d);
                    Ok::<_, StoreError>(Ok(()))
                })
                .ok_or("document disappeared")?
                .map_err(|e| e.to_string())?
        })
        .await
        .unwrap_or_else(|e| Err(format!("job panicked: {e}")));
        let outcome = outcome.map(|()| Some(format!("/v1/documents/{}", job.document)));
        if let Err(e) = &outcome {
            tracing::warn!(job = %job.id, kind = ?job.kind, "job failed: {e}");
        }
        if let Err(e) = state.store.finish_job(&job.id, outcome) {
            tracing::error!("job {}: {e}", job.id);
        }
    });
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<Job>> {
    state
        .store
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("job", &id))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default = "default_format")]
    format: String,
    #[serde(default)]
    variant: Option<String>,
}

fn default_format() -> String {
    "json".into()
}

async fn export(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> AppResult<Response> {
    let doc = document(&state, &id)?;
    let (Some(raw), Some(baselines)) = (&doc.raw, &doc.baselines) else {
        return Err(ApiError::conflict("nothing to export before transcription"));
    };
    let text: &[String] = match q.variant.as_deref() {
        None | Some("raw") => raw,
        Some("corrected") => match &doc.corrected {
            Some(c) => &c.lines,
            None => return Err(ApiError::conflict("document has no corrected transcription")),
        },
        Some(v) => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown variant {v:?}"))),
    };
    let mut headers = HeaderMap::new();
    let body = match q.format.as_str() {
        "txt" => {
            headers.insert(header::CONTENT_TYPE, "text/plain; charset=utf-8".parse().unwrap());
            let mut s = text.join("\n");
            s.push('\n');
            s.into_bytes()
        }
        "pagexml" => {
            headers.insert(header::CONTENT_TYPE, "application/xml".parse().unwrap());
            let (w, h) = doc.working_size();
            let mut page = PageDocument::new(format!("{}.png", doc.id), w as u32, h as u32);
            for (b, t) in baselines.iter().zip(text) {
                page.lines.push(TextLine::new(b.id.clone(), b.points.clone()).with_text(t));
            }
            write_pagexml(&page).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        }
        "json" => {
            headers.insert(header::CONTENT_TYPE, "application/json".parse().unwrap());
            let lines: Vec<Value> = baselines
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    json!({
                        "id": b.id,
                        "baseline": b.points,
                        "raw": raw.get(i),
                        "corrected": doc.corrected.as_ref().and_then(|c| c.lines.get(i)),
                        "changed": doc.corrected.as_ref().and_then(|c| c.changed.get(i)),
                    })
                })
                .collect();
            let v = json!({
                "id": doc.id,
                "crop": doc.crop,
                "lines": lines,
                "correction": doc.corrected.as_ref().map(|c| json!({ "attempts": c.attempts, "fallback": c.fallback })),
                "translation": doc.translation,
            });
            serde_json::to_vec_pretty(&v).expect("JSON values serialize")
        }
        f => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown format {f:?}"))),
    };
    Ok((headers, body).into_response())
}
