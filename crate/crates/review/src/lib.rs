//! HTTP+JSON API over a generation run under human review.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/records` | filters `type`, `class`, `accepted`, `unrated_by`, paging `page`, `page_size` |
//! | GET | `/records/{id}` | |
//! | POST | `/ratings` | a rating; `X-Rater-Id` may supply the rater |
//! | GET | `/aggregate` | |
//! | POST | `/export` | |
//!
//! Generated images are served under `/files/` and source images under
//! `/originals/`. Every JSON response carries `schema_version`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use lance_core::model::{PerturbationType, SCHEMA_VERSION};
use lance_core::review::{RatingRecord, RecordFilter, ReviewStore, DEFAULT_PAGE_SIZE};
use lance_core::Error;

/// Header naming the rater of a submitted rating.
pub const RATER_HEADER: &str = "x-rater-id";

pub type Shared = Arc<ReviewStore>;

/// JSON error with the status it maps to.
#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownRecord(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "schema_version": SCHEMA_VERSION, "error": self.1 });
        (self.0, Json(body)).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

/// Wraps a serializable body with the schema version.
fn versioned<T: Serialize>(body: &T) -> Result<Json<Value>, ApiError> {
    let mut v = serde_json::to_value(body).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match &mut v {
        Value::Object(map) => {
            map.insert("schema_version".into(), json!(SCHEMA_VERSION));
            Ok(Json(v))
        }
        _ => Ok(Json(json!({ "schema_version": SCHEMA_VERSION, "data": v }))),
    }
}

/// Query parameters arrive as strings so bad values get a clear message.
#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    #[serde(rename = "type")]
    pub perturbation_type: Option<String>,
    pub class: Option<String>,
    pub accepted: Option<String>,
    pub unrated_by: Option<String>,
    pub page: Option<String>,
    pub page_size: Option<String>,
}

fn parse_query(q: ListQuery) -> Result<(RecordFilter, usize, usize), ApiError> {
    let perturbation_type = q
        .perturbation_type
        .map(|t| t.parse::<PerturbationType>())
        .transpose()
        .map_err(|e| bad_request(e.to_string()))?;
    let accepted = q
        .accepted
        .map(|a| match a.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(bad_request(format!("accepted must be true or false, got `{other}`"))),
        })
        .transpose()?;
    let number = |name: &str, v: Option<String>, default: usize| -> Result<usize, ApiError> {
        match v {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| bad_request(format!("{name} must be a non-negative integer, got `{s}`"))),
        }
    };
    let page = number("page", q.page, 0)?;
    let page_size = number("page_size", q.page_size, DEFAULT_PAGE_SIZE)?;
    if page_size == 0 {
        return Err(bad_request("page_size must be at least 1"));
    }
    let filter = RecordFilter {
        perturbation_type,
        class: q.class,
        accepted,
        unrated_by: q.unrated_by,
    };
    Ok((filter, page, page_size))
}

async fn list_records(State(store): State<Shared>, Query(q): Query<ListQuery>) -> Result<Json<Value>, ApiError> {
    let (filter, page, page_size) = parse_query(q)?;
    versioned(&store.list(&filter, page, page_size)?)
}

async fn get_record(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let detail = store.detail(&id)?;
    let mut v = versioned(&detail)?;
    let urls = json!({
        "image": detail.record.image_path.as_ref().map(|p| format!("/files/{p}")),
        "original": detail.original_image.as_ref().map(|p| format!("/originals/{p}")),
        "reconstruction": detail.reconstruction_image.as_ref().map(|p| format!("/files/{p}")),
    });
    v.0["urls"] = urls;
    Ok(v)
}

async fn submit_rating(
    State(store): State<Shared>,
    headers: HeaderMap,
    Json(mut rating): Json<RatingRecord>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    if let Some(h) = headers.get(RATER_HEADER) {
        let rater = h.to_str().map_err(|_| bad_request("rater header is not text"))?;
        if rating.rater_id.is_empty() {
            rating.rater_id = rater.to_string();
        } else if rating.rater_id != rater {
            return Err(bad_request("rater_id differs from the rater header"));
        }
    }
    if rating.timestamp.is_empty() {
        rating.timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    }
    // The store appends to the manifest file, so keep it off the reactor.
    let id = tokio::task::spawn_blocking(move || store.submit_rating(rating))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, versioned(&json!({ "id": id }))?))
}

async fn aggregate(State(store): State<Shared>) -> Result<Json<Value>, ApiError> {
    let agg = store.aggregate();
    let mut v = versioned(&agg)?;
    v.0["table"] = json!(agg.to_text());
    Ok(v)
}

async fn export(State(store): State<Shared>) -> Result<Json<Value>, ApiError> {
    let suite = store.export()?;
    let excluded: Vec<String> = store.ratings().excluded().into_iter().collect();
    versioned(&json!({ "suite": suite, "excluded": excluded }))
}

pub fn router(store: Shared) -> Router {
    let files = ServeDir::new(store.out_dir());
    let originals = ServeDir::new(store.suite_dir());
    Router::new()
        .route("/records", get(list_records))
        .route("/records/{id}", get(get_record))
        .route("/ratings", post(submit_rating))
        .route("/aggregate", get(aggregate))
        .route("/export", post(export))
        .nest_service("/files", files)
        .nest_service("/originals", originals)
        .with_state(store)
}

/// Serves until the process is stopped.
pub async fn serve(store: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
