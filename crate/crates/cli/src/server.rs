use std::future::Future;
use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use rap_core::perception::sniff_media_type;
use rap_core::pipeline::GenerationOutcome;
use rap_core::ConceptRecord;
use serde::{Deserialize, Serialize};

use crate::api_error::ApiError;
use crate::engine::{BackendNames, ConceptEdit, ConceptMeta, Engine, HitView, RetrieveQuery};

pub const MAX_BODY_BYTES: usize = 32 << 20;

type Shared = Arc<Engine>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(engine: Shared) -> Router {
    Router::new()
        .route("/concepts", post(create_concept).get(list_concepts))
        .route(
            "/concepts/{id}",
            get(get_concept).patch(update_concept).delete(delete_concept),
        )
        .route("/retrieve", post(retrieve))
        .route("/chat", post(chat))
        .route("/categories", get(categories))
        .route("/health", get(health))
        .route("/images/{*file}", get(image))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            let mut r = ApiError::validation("method not allowed").into_response();
            *r.status_mut() = StatusCode::METHOD_NOT_ALLOWED;
            r
        })
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(engine)
}

/// Serves until `shutdown` resolves, then flushes the store.
pub async fn serve(
    engine: Shared,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::clone(&engine)))
        .with_graceful_shutdown(shutdown)
        .await?;
    tokio::task::spawn_blocking(move || engine.flush())
        .await
        .map_err(std::io::Error::other)?
        .map_err(std::io::Error::other)
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> rap_core::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| {
            ApiError::new(
                crate::api_error::ErrorCode::BackendUnavailable,
                format!("worker failed: {e}"),
            )
        })?
        .map_err(ApiError::from)
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    body.map(|Json(t)| t).map_err(|e| ApiError::validation(e.body_text()))
}

fn decode_b64(field: &str, s: &str) -> ApiResult<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| ApiError::validation(format!("{field} is not valid base64: {e}")))
}

/// Multipart with an `image` file part plus either a `meta` JSON part or
/// separate `name`, `category` and `description` parts.
async fn create_concept(
    State(engine): State<Shared>,
    form: Result<Multipart, MultipartRejection>,
) -> ApiResult<(StatusCode, Json<ConceptRecord>)> {
    let mut form = form.map_err(|e| ApiError::validation(e.body_text()))?;
    let mut meta: Option<ConceptMeta> = None;
    let (mut name, mut category, mut description) = (None, None, None);
    let mut image: Option<Vec<u8>> = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::validation(e.body_text()))?
    {
        let key = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::validation(e.body_text()))?;
        let text =
            || String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::validation(format!("{key} is not UTF-8")));
        match key.as_str() {
            "meta" => {
                meta = Some(serde_json::from_slice(&bytes).map_err(|e| ApiError::validation(format!("meta: {e}")))?)
            }
            "image" => image = Some(bytes.to_vec()),
            "name" => name = Some(text()?),
            "category" => category = Some(text()?),
            "description" => description = Some(text()?),
            _ => {}
        }
    }
    let meta = match (meta, name, category) {
        (Some(m), _, _) => m,
        (None, Some(name), Some(category)) => ConceptMeta {
            name,
            category,
            description: description.unwrap_or_default(),
        },
        _ => return Err(ApiError::validation("missing meta (or name and category) part")),
    };
    let image = image.ok_or_else(|| ApiError::validation("missing image part"))?;
    let rec = blocking(move || engine.add(meta, &image)).await?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn list_concepts(State(engine): State<Shared>) -> Json<Vec<ConceptRecord>> {
    Json(engine.snapshot().records().iter().map(|r| (**r).clone()).collect())
}

async fn get_concept(State(engine): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<ConceptRecord>> {
    let snap = engine.snapshot();
    snap.get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no concept with id {id}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRequest {
    pub name: Option<String>,
    pub description: Option<String>,
    pub category: Option<String>,
    /// Replacement image; the concept is re-embedded.
    pub image_b64: Option<String>,
}

async fn update_concept(
    State(engine): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<PatchRequest>, JsonRejection>,
) -> ApiResult<Json<ConceptRecord>> {
    let req = json_body(body)?;
    let image = req
        .image_b64
        .as_deref()
        .map(|s| decode_b64("image_b64", s))
        .transpose()?;
    let edit = ConceptEdit {
        name: req.name,
        description: req.description,
        category: req.category,
        image,
    };
    Ok(Json(blocking(move || engine.edit(&id, edit)).await?))
}

async fn delete_concept(State(engine): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<ConceptRecord>> {
    Ok(Json(blocking(move || engine.remove(&id)).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub image_b64: Option<String>,
    pub embedding: Option<Vec<f32>>,
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub hits: Vec<HitView>,
}

async fn retrieve(
    State(engine): State<Shared>,
    body: Result<Json<RetrieveRequest>, JsonRejection>,
) -> ApiResult<Json<RetrieveResponse>> {
    let req = json_body(body)?;
    let query = match (req.image_b64, req.embedding) {
        (Some(b64), None) => RetrieveQuery::Image(decode_b64("image_b64", &b64)?),
        (None, Some(v)) => RetrieveQuery::Embedding(v),
        _ => return Err(ApiError::validation("give exactly one of image_b64 and embedding")),
    };
    let hits = blocking(move || engine.retrieve(query, req.k)).await?;
    Ok(Json(RetrieveResponse { hits }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub image_b64: Option<String>,
    #[serde(default)]
    pub text: String,
}

async fn chat(
    State(engine): State<Shared>,
    body: Result<Json<ChatRequest>, JsonRejection>,
) -> ApiResult<Json<GenerationOutcome>> {
    let req = json_body(body)?;
    let image = req
        .image_b64
        .as_deref()
        .map(|s| decode_b64("image_b64", s))
        .transpose()?;
    Ok(Json(blocking(move || engine.chat(image, req.text)).await?))
}

async fn categories(State(engine): State<Shared>) -> Json<Vec<String>> {
    Json(engine.snapshot().list_categories())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub store_size: usize,
    pub backends: BackendNames,
}

async fn health(State(engine): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        store_size: engine.snapshot().len(),
        backends: engine.backends.clone(),
    })
}

async fn image(State(engine): State<Shared>, Path(file): Path<String>) -> ApiResult<Response> {
    let path = engine
        .image_path(&file)
        .ok_or_else(|| ApiError::not_found(format!("no image {file}")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found(format!("no image {file}")))?;
    Ok(([(header::CONTENT_TYPE, sniff_media_type(&bytes))], bytes).into_response())
}
