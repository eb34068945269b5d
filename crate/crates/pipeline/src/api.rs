//! Annotation HTTP API over a run directory.
//!
//! Reads are served from memory; each annotation is appended to
//! `annotations.jsonl` under a mutex before it becomes visible.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use factcheck_core::feedback::{resolve_annotations, AnnotationRecord};
use factcheck_core::{CaseRecord, Generation};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::arm;
use crate::error::{Error, Result};
use crate::store::{append_jsonl, RunDir, ANNOTATIONS_FILE};

struct AppState {
    dir: RunDir,
    cases: Vec<CaseRecord>,
    /// Generations shown for annotation, keyed by case, rounds ascending.
    generations: BTreeMap<String, Vec<Generation>>,
    annotations: Mutex<Vec<AnnotationRecord>>,
    token: Option<String>,
}

impl AppState {
    fn case_status(&self, case: &CaseRecord, anns: &[AnnotationRecord]) -> (usize, usize) {
        let mut done = 0;
        let mut total = 0;
        for g in self.generations.get(&case.id).into_iter().flatten() {
            let resolved = resolve_annotations(&case.id, g.round, anns);
            total += g.points.len();
            done += g.points.iter().filter(|p| resolved.contains_key(&p.index)).count();
        }
        (done, total)
    }
}

#[derive(Debug, Serialize)]
struct CaseSummary {
    id: String,
    status: &'static str,
    annotated_points: usize,
    total_points: usize,
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
}

#[derive(Debug, Deserialize)]
struct AnnotationBody {
    hallucinated: u8,
    annotator: String,
}

fn api_error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn list_cases(State(st): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> Response {
    let anns = st.annotations.lock().unwrap();
    let filter = q.status.as_deref().unwrap_or("all");
    if !matches!(filter, "all" | "pending" | "annotated") {
        return api_error(StatusCode::BAD_REQUEST, format!("unknown status filter {filter:?}"));
    }
    let list: Vec<CaseSummary> = st
        .cases
        .iter()
        .map(|c| {
            let (done, total) = st.case_status(c, &anns);
            CaseSummary {
                id: c.id.clone(),
                status: if done == total { "annotated" } else { "pending" },
                annotated_points: done,
                total_points: total,
            }
        })
        .filter(|s| filter == "all" || s.status == filter)
        .collect();
    Json(list).into_response()
}

async fn get_case(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let Some(case) = st.cases.iter().find(|c| c.id == id) else {
        return api_error(StatusCode::NOT_FOUND, format!("no case {id}"));
    };
    let anns = st.annotations.lock().unwrap();
    let rounds: Vec<Value> = st
        .generations
        .get(&id)
        .into_iter()
        .flatten()
        .map(|g| {
            let resolved = resolve_annotations(&id, g.round, &anns);
            let points: Vec<Value> = g
                .points
                .iter()
                .map(|p| {
                    let mut v = json!({ "index": p.index, "text": p.text });
                    if let Some(&h) = resolved.get(&p.index) {
                        v["annotation"] = json!({ "hallucinated": u8::from(h) });
                    }
                    v
                })
                .collect();
            json!({ "round": g.round, "decision": g.decision, "points": points })
        })
        .collect();
    let attributes: Vec<Value> = case.attributes.iter().map(|(k, v)| json!({ "name": k, "value": v })).collect();
    Json(json!({ "id": id, "attributes": attributes, "rounds": rounds })).into_response()
}

async fn post_annotation(
    State(st): State<Arc<AppState>>,
    Path((id, round, index)): Path<(String, u32, usize)>,
    Json(body): Json<AnnotationBody>,
) -> Response {
    let exists = st
        .generations
        .get(&id)
        .and_then(|gs| gs.iter().find(|g| g.round == round))
        .is_some_and(|g| g.point(index).is_some());
    if !exists {
        return api_error(StatusCode::NOT_FOUND, format!("case {id} round {round} has no point {index}"));
    }
    if body.hallucinated > 1 {
        return api_error(StatusCode::UNPROCESSABLE_ENTITY, "hallucinated must be 0 or 1");
    }
    let annotator = body.annotator.trim();
    if annotator.is_empty() {
        return api_error(StatusCode::UNPROCESSABLE_ENTITY, "annotator must be non-empty");
    }
    let record = AnnotationRecord {
        case_id: id,
        round,
        point_index: index,
        hallucinated: body.hallucinated == 1,
        annotator: annotator.to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    let mut anns = st.annotations.lock().unwrap();
    if let Err(e) = append_jsonl(&st.dir.path(ANNOTATIONS_FILE), std::slice::from_ref(&record)) {
        return api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    anns.push(record.clone());
    (
        StatusCode::CREATED,
        Json(json!({
            "case_id": record.case_id,
            "round": record.round,
            "point_index": record.point_index,
            "hallucinated": body.hallucinated,
            "annotator": record.annotator,
            "timestamp": record.timestamp,
        })),
    )
        .into_response()
}

async fn progress(State(st): State<Arc<AppState>>) -> Response {
    let anns = st.annotations.lock().unwrap();
    let (mut cases_done, mut points_done, mut points_total) = (0, 0, 0);
    for c in &st.cases {
        let (done, total) = st.case_status(c, &anns);
        cases_done += usize::from(done == total);
        points_done += done;
        points_total += total;
    }
    Json(json!({
        "annotated": cases_done,
        "total": st.cases.len(),
        "annotated_points": points_done,
        "total_points": points_total,
    }))
    .into_response()
}

async fn require_token(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return api_error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
        }
    }
    next.run(req).await
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/cases", get(list_cases))
        .route("/api/cases/{id}", get(get_case))
        .route("/api/cases/{id}/rounds/{round}/points/{index}/annotation", post(post_annotation))
        .route("/api/progress", get(progress))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// A running annotation server. Dropping it stops the server.
pub struct ApiHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ApiHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Serve until Ctrl-C, then shut down and release the run directory.
    pub fn run_until_interrupted(self) -> Result<()> {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_io()
            .build()
            .map_err(|e| Error::Pipeline(format!("runtime: {e}")))?;
        rt.block_on(tokio::signal::ctrl_c()).map_err(|e| Error::Pipeline(format!("signal handler: {e}")))?;
        log::info!("interrupted; stopping annotation API");
        self.stop();
        Ok(())
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ApiHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Serve the annotation API for the round-0 generations of `dir`. The port
/// is bound before returning, so a busy address fails here.
pub fn serve_annotation_api(dir: RunDir, addr: SocketAddr) -> Result<ApiHandle> {
    let info = dir.info()?;
    let cases = dir.cases()?;
    let generations: BTreeMap<String, Vec<Generation>> = dir
        .generations(arm::INITIAL)?
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().filter(|g| g.round == 0).collect()))
        .collect();
    if generations.is_empty() {
        return Err(Error::Pipeline("no round-0 generations to annotate; run `generate` first".into()));
    }
    let annotations = dir.annotations()?;
    let listener = std::net::TcpListener::bind(addr).map_err(|e| Error::Pipeline(format!("cannot bind {addr}: {e}")))?;
    listener.set_nonblocking(true).map_err(|e| Error::Pipeline(format!("cannot configure {addr}: {e}")))?;
    let local = listener.local_addr().map_err(|e| Error::Pipeline(e.to_string()))?;
    let state = Arc::new(AppState {
        dir,
        cases,
        generations,
        annotations: Mutex::new(annotations),
        token: info.config.api.bearer_token.clone(),
    });
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_io()
        .build()
        .map_err(|e| Error::Pipeline(format!("runtime: {e}")))?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(state);
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("annotation API: {e}");
                    return;
                }
            };
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = serve.await {
                log::error!("annotation API: {e}");
            }
        });
    });
    log::info!("annotation API listening on http://{local}");
    Ok(ApiHandle { addr: local, shutdown: Some(tx), thread: Some(thread) })
}
