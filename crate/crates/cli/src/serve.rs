//! Read-only JSON API over a model and its merged trace.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::{json, Value};

use storetrace::aggregate::read_experiment;
use storetrace::detect::{bus_volume_series, Direction, Finding};
use storetrace::event::TraceEvent;
use storetrace::flows::RequestFlow;
use storetrace::pipeline::{detect_all, replay_file, DetectConfig};
use storetrace::query::{attribute_tree, downsample};
use storetrace::sht::ShtReader;
use storetrace::spans::SpanForest;

use crate::commands::{flows_with_breakdown, span_forest};

struct AppState {
    model: Mutex<ShtReader>,
    events: Vec<TraceEvent>,
    flows: Vec<RequestFlow>,
    forest: SpanForest,
    findings: Vec<Finding>,
}

type Shared = Arc<AppState>;
type Params = Query<HashMap<String, String>>;

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn int(p: &HashMap<String, String>, key: &str) -> Result<Option<i64>, ApiError> {
    p.get(key)
        .map(|v| v.parse::<i64>().map_err(|_| bad(format!("`{key}` must be an integer"))))
        .transpose()
}

fn window(p: &HashMap<String, String>, start: i64, end: i64) -> Result<(i64, i64), ApiError> {
    let t0 = int(p, "t0")?.unwrap_or(start);
    let t1 = int(p, "t1")?.unwrap_or(end);
    if t0 > t1 {
        return Err(bad("t0 must not exceed t1"));
    }
    Ok((t0, t1))
}

async fn tree(State(s): State<Shared>) -> Json<Value> {
    let r = s.model.lock().unwrap();
    Json(json!(attribute_tree(r.paths())))
}

async fn states(State(s): State<Shared>, Query(p): Params) -> Result<Json<Value>, ApiError> {
    let path = p.get("path").ok_or_else(|| bad("missing `path`"))?;
    let r = s.model.lock().unwrap();
    let q = r
        .quark(path)
        .map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("no attribute `{path}`")))?;
    let (t0, t1) = window(&p, r.start(), r.end())?;
    let resolution = int(&p, "resolution")?.unwrap_or(0);
    if resolution < 0 {
        return Err(bad("`resolution` must be non-negative"));
    }
    let ivs = r
        .query_range(q, t0, t1)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let rows = downsample(&ivs, t0, t1, resolution);
    Ok(Json(
        json!({ "path": path, "quark": q, "t0": t0, "t1": t1, "rows": rows }),
    ))
}

async fn series(State(s): State<Shared>, Query(p): Params) -> Result<Json<Value>, ApiError> {
    let dir = match p.get("metric").map(String::as_str) {
        Some("bus_volume_in") => Direction::In,
        Some("bus_volume_out") => Direction::Out,
        Some(m) => return Err(bad(format!("unknown metric `{m}`"))),
        None => return Err(bad("missing `metric`")),
    };
    let width = int(&p, "bucket_ns")?.unwrap_or(storetrace::detect::DEFAULT_BUCKET_NS);
    let series = bus_volume_series(&s.events, width, dir).map_err(|e| bad(e.to_string()))?;
    Ok(Json(json!(series)))
}

async fn spans(State(s): State<Shared>, Query(p): Params) -> Result<Json<Value>, ApiError> {
    let (t0, t1) = window(&p, i64::MIN, i64::MAX)?;
    Ok(Json(json!({
        "spans": s.forest.in_window(t0, t1),
        "unmatched": s.forest.unmatched,
    })))
}

async fn flows(State(s): State<Shared>, Query(p): Params) -> Result<Json<Value>, ApiError> {
    match p.get("id") {
        Some(id) => {
            let f = s
                .flows
                .iter()
                .find(|f| &f.id == id)
                .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no flow `{id}`")))?;
            Ok(Json(flows_with_breakdown(std::slice::from_ref(f)).remove(0)))
        }
        None => Ok(Json(json!(flows_with_breakdown(&s.flows)))),
    }
}

async fn findings(State(s): State<Shared>) -> Json<Value> {
    Json(json!(s.findings))
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no such endpoint".into())
}

fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/tree", get(tree))
        .route("/api/states", get(states))
        .route("/api/series", get(series))
        .route("/api/spans", get(spans))
        .route("/api/flows", get(flows))
        .route("/api/findings", get(findings))
        .fallback(not_found)
        .with_state(state)
}

pub fn run(model: &Path, trace: &Path, host: &str, port: u16) -> Result<()> {
    let reader = ShtReader::open(model).with_context(|| format!("{}", model.display()))?;
    let x = read_experiment(trace)?;
    let replay = replay_file(trace)?;
    let (forest, flows) = span_forest(&x.events, &replay.records);
    let findings = detect_all(&x.events, &replay.records, &DetectConfig::default())?.findings;
    let state = Arc::new(AppState {
        model: Mutex::new(reader),
        events: x.events,
        flows,
        forest,
        findings,
    });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("bind {host}:{port}"))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
