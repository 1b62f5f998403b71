//! HTTP API over one or more studies' answer stores.
//!
//! ```text
//! GET  /api/study/{id}/items?annotator=A   all items for A, in order
//! GET  /api/study/{id}/next?annotator=A    first unanswered item
//! POST /api/study/{id}/answers             record one answer
//! GET  /api/study/{id}/results?strict=B    aggregated results
//! ```
//!
//! Anything else is served from the UI directory when one is configured.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forumlm::annotation::{
    compute_results, render_table, AnnotationAnswer, AnswerError, AnswerStore, RecordOutcome, ReportOptions,
    ResultsTable, StatsError,
};
use forumlm::study::{ContextPost, StudyItem};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("missing query parameter {0}")]
    MissingParameter(&'static str),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownStudy(_) => StatusCode::NOT_FOUND,
            ApiError::MissingParameter(_) => StatusCode::BAD_REQUEST,
            ApiError::Answer(e) => match e {
                AnswerError::UnknownItem(_) => StatusCode::NOT_FOUND,
                AnswerError::UnknownAnnotator(_) | AnswerError::WrongGroup { .. } => StatusCode::FORBIDDEN,
                AnswerError::Conflict { .. } => StatusCode::CONFLICT,
                AnswerError::Corrupt { .. } | AnswerError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::Stats(StatsError::Incomplete(_)) => StatusCode::CONFLICT,
            ApiError::Stats(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

/// Shared server state: answer stores keyed by study id.
#[derive(Clone, Default)]
pub struct AppState {
    studies: Arc<HashMap<String, Arc<AnswerStore>>>,
}

impl AppState {
    pub fn new(stores: impl IntoIterator<Item = AnswerStore>) -> Self {
        let studies = stores
            .into_iter()
            .map(|s| (s.study().id().to_owned(), Arc::new(s)))
            .collect();
        AppState {
            studies: Arc::new(studies),
        }
    }

    pub fn store(&self, study_id: &str) -> Result<&Arc<AnswerStore>, ApiError> {
        self.studies
            .get(study_id)
            .ok_or_else(|| ApiError::UnknownStudy(study_id.to_owned()))
    }
}

/// What an annotator sees of an item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub position: usize,
    pub forum: Vec<String>,
    pub title: String,
    pub context: Vec<ContextPost>,
    pub thread_context: String,
    pub response_author: String,
    pub final_response: String,
    pub answered: bool,
}

impl ItemView {
    fn new(position: usize, item: &StudyItem, answered: bool) -> Self {
        ItemView {
            item_id: item.item_id.clone(),
            position,
            forum: item.forum.clone(),
            title: item.title.clone(),
            context: item.context.clone(),
            thread_context: item.thread_context.clone(),
            response_author: item.response_author.clone(),
            final_response: item.final_response.clone(),
            answered,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemsResponse {
    pub study_id: String,
    pub annotator: String,
    pub items: Vec<ItemView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextResponse {
    pub study_id: String,
    pub annotator: String,
    pub answered: usize,
    pub total: usize,
    /// `None` once every item is answered.
    pub item: Option<ItemView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub status: String,
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultsResponse {
    pub study_id: String,
    pub results: ResultsTable,
    pub table: String,
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ResultsQuery {
    #[serde(default)]
    strict: Option<bool>,
}

async fn items(
    State(state): State<AppState>,
    Path(study_id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> Result<Json<ItemsResponse>, ApiError> {
    let store = state.store(&study_id)?;
    let annotator = q.annotator.ok_or(ApiError::MissingParameter("annotator"))?;
    let items = store
        .items_for(&annotator)?
        .into_iter()
        .enumerate()
        .map(|(i, it)| ItemView::new(i, it, store.answer(&it.item_id, &annotator).is_some()))
        .collect();
    Ok(Json(ItemsResponse {
        study_id,
        annotator,
        items,
    }))
}

async fn next(
    State(state): State<AppState>,
    Path(study_id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> Result<Json<NextResponse>, ApiError> {
    let store = state.store(&study_id)?;
    let annotator = q.annotator.ok_or(ApiError::MissingParameter("annotator"))?;
    let total = store.items_for(&annotator)?.len();
    let item = store.next_for(&annotator)?.map(|(i, it)| ItemView::new(i, it, false));
    Ok(Json(NextResponse {
        study_id,
        answered: store.answered_count(&annotator),
        annotator,
        total,
        item,
    }))
}

async fn answers(
    State(state): State<AppState>,
    Path(study_id): Path<String>,
    Json(mut answer): Json<AnnotationAnswer>,
) -> Result<(StatusCode, Json<AnswerResponse>), ApiError> {
    let store = state.store(&study_id)?.clone();
    if answer.timestamp == 0 {
        answer.timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or_default();
    }
    let annotator = answer.annotator_id.clone();
    // the store fsyncs each append
    let outcome = tokio::task::spawn_blocking({
        let store = store.clone();
        move || store.record(answer)
    })
    .await
    .expect("answer task panicked")?;
    let (status, label) = match outcome {
        RecordOutcome::Recorded => (StatusCode::CREATED, "recorded"),
        RecordOutcome::Duplicate => (StatusCode::OK, "duplicate"),
    };
    Ok((
        status,
        Json(AnswerResponse {
            status: label.into(),
            answered: store.answered_count(&annotator),
            total: store.items_for(&annotator)?.len(),
        }),
    ))
}

async fn results(
    State(state): State<AppState>,
    Path(study_id): Path<String>,
    Query(q): Query<ResultsQuery>,
) -> Result<Json<ResultsResponse>, ApiError> {
    let store = state.store(&study_id)?;
    let results = compute_results(store.study(), &store.snapshot(), q.strict.unwrap_or(false))?;
    let table = render_table(&results, &ReportOptions::default());
    Ok(Json(ResultsResponse {
        study_id,
        results,
        table,
    }))
}

async fn placeholder_index() -> Html<&'static str> {
    Html(concat!(
        "<!doctype html><title>forumlm</title>",
        "<p>No annotation UI is installed. The API lives under <code>/api/study/{id}/</code>.</p>"
    ))
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/study/{study_id}/items", get(items))
        .route("/api/study/{study_id}/next", get(next))
        .route("/api/study/{study_id}/answers", post(answers))
        .route("/api/study/{study_id}/results", get(results))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder_index)),
    }
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: AppState, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
