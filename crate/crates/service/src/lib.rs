//! HTTP service: live next-move prediction, the annotation session
//! endpoints and the agreement report.

pub mod config;
pub mod store;

use std::collections::HashMap;
use std::io::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Query, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ftmp_core::model3e::Checkpoint;
use ftmp_core::predictor::{input_vocabulary, Predictor, Registry};
use ftmp_core::study::{agreement_report, read_diagnostic, AnnotationRecord, DiagnosticItem};
use ftmp_core::windowing::{window_from_context, ContextElement, ContextItem, Example, Origin, WindowConfig};
use ftmp_core::TalkMove;

pub use config::ServiceConfig;
pub use store::{Append, AnnotationStore};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("annotation log: {0}")]
    Store(String),
    #[error(transparent)]
    Core(#[from] ftmp_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

struct Model {
    predictor: Box<dyn Predictor>,
    version: String,
}

pub struct AppState {
    model: Option<Model>,
    diagnostic: Option<Vec<DiagnosticItem>>,
    positions: HashMap<String, usize>,
    /// Model predictions on the diagnostic set, computed once at startup.
    diagnostic_preds: Option<Vec<TalkMove>>,
    annotators: Vec<String>,
    store: Mutex<AnnotationStore>,
}

impl AppState {
    /// `version` labels the model in `/predict` responses.
    pub fn new(
        model: Option<(Box<dyn Predictor>, String)>,
        diagnostic: Option<Vec<DiagnosticItem>>,
        annotators: Vec<String>,
        store: AnnotationStore,
    ) -> Result<Self, ServiceError> {
        let positions = diagnostic
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, d)| (d.example_id.clone(), i))
            .collect();
        let diagnostic_preds = match (&model, &diagnostic) {
            (Some((p, _)), Some(items)) => {
                let vocab = input_vocabulary(p.as_ref());
                let examples = items
                    .iter()
                    .map(|d| d.to_example(&vocab))
                    .collect::<ftmp_core::Result<Vec<_>>>()?;
                Some(p.predict(&examples)?)
            }
            _ => None,
        };
        Ok(AppState {
            model: model.map(|(predictor, version)| Model { predictor, version }),
            diagnostic,
            positions,
            diagnostic_preds,
            annotators,
            store: Mutex::new(store),
        })
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let model = cfg
            .checkpoint
            .as_ref()
            .map(|path| -> Result<_, ServiceError> {
                let bytes = std::fs::read(path)?;
                let ckpt = Checkpoint::from_bytes(&bytes)?;
                let crc = bytes.len().checked_sub(4).map_or(0, |i| {
                    u32::from_le_bytes(bytes[i..].try_into().expect("four bytes"))
                });
                let version = format!("{}-{crc:08x}", ckpt.header.model_kind);
                Ok((Registry::builtin().load(&ckpt)?, version))
            })
            .transpose()?;
        let diagnostic = cfg.diagnostic.as_deref().map(read_diagnostic).transpose()?;
        let store = AnnotationStore::open(&cfg.annotation_log)?;
        AppState::new(model, diagnostic, cfg.annotators.clone(), store)
    }

    fn known_annotator(&self, id: &str) -> bool {
        if self.annotators.is_empty() {
            !id.trim().is_empty()
        } else {
            self.annotators.iter().any(|a| a == id)
        }
    }
}

type Shared = Arc<AppState>;

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub context: Vec<ContextItem>,
    /// Return the window the model actually saw.
    #[serde(default)]
    pub echo: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probs: Vec<f64>,
    pub labels: Vec<TalkMove>,
    pub label: TalkMove,
    pub model_version: String,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Vec<ContextElement>>,
}

async fn predict(State(st): State<Shared>, body: Bytes) -> Response {
    let req: PredictRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let Some(model) = &st.model else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded");
    };
    if let Some(e) = req.context.iter().find_map(|c| c.validate().err()) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, e);
    }
    let p = model.predictor.as_ref();
    let vocab = input_vocabulary(p);
    let cfg = match WindowConfig::new(p.window()) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    let (window, truncated) = match window_from_context(&req.context, &vocab, cfg) {
        Ok(w) => w,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    let example = Example {
        window,
        label: TalkMove::None,
        origin: Origin {
            transcript_id: "request".into(),
            position: 0,
        },
    };
    let examples = std::slice::from_ref(&example);
    let (probs, label) = match (p.predict_proba(examples), p.predict(examples)) {
        (Ok(probs), Ok(label)) => (probs[0].to_vec(), label[0]),
        (Err(e), _) | (_, Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    Json(PredictResponse {
        probs,
        labels: TalkMove::ALL.to_vec(),
        label,
        model_version: model.version.clone(),
        truncated,
        window: req.echo.then_some(example.window),
    })
    .into_response()
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

/// What an annotator sees: the context without the gold label.
#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub example_id: String,
    pub window: usize,
    pub padding: usize,
    pub context: Vec<ContextItem>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextResponse {
    pub done: bool,
    pub completed: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<AnnotationTask>,
}

async fn diagnostic_next(State(st): State<Shared>, Query(q): Query<NextQuery>) -> Response {
    if !st.known_annotator(&q.annotator) {
        return error(StatusCode::NOT_FOUND, format!("unknown annotator {:?}", q.annotator));
    }
    let Some(items) = &st.diagnostic else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no diagnostic set loaded");
    };
    let store = st.store.lock().expect("store lock");
    let completed = items.iter().filter(|d| store.contains(&q.annotator, &d.example_id)).count();
    let next = items
        .iter()
        .enumerate()
        .find(|(_, d)| !store.contains(&q.annotator, &d.example_id));
    Json(NextResponse {
        done: next.is_none(),
        completed,
        total: items.len(),
        index: next.map(|(i, _)| i),
        task: next.map(|(_, d)| AnnotationTask {
            example_id: d.example_id.clone(),
            window: d.window,
            padding: d.padding,
            context: d.context.clone(),
        }),
    })
    .into_response()
}

async fn post_annotation(State(st): State<Shared>, body: Bytes) -> Response {
    let mut rec: AnnotationRecord = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if let Err(e) = rec.validate() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, e);
    }
    if !st.known_annotator(&rec.annotator_id) {
        return error(StatusCode::NOT_FOUND, format!("unknown annotator {:?}", rec.annotator_id));
    }
    if st.diagnostic.is_some() && !st.positions.contains_key(&rec.example_id) {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("example {:?} is not in the diagnostic set", rec.example_id),
        );
    }
    if rec.timestamp == 0 {
        rec.timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
    }
    let mut store = st.store.lock().expect("store lock");
    match store.append(rec.clone()) {
        Ok(Append::Written) => {}
        Ok(Append::Duplicate) => {
            return error(
                StatusCode::CONFLICT,
                format!("{} already annotated {}", rec.annotator_id, rec.example_id),
            )
        }
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
    let completed = store.records().iter().filter(|r| r.annotator_id == rec.annotator_id).count();
    (
        StatusCode::CREATED,
        Json(json!({ "ok": true, "record": rec, "completed": completed })),
    )
        .into_response()
}

async fn report(State(st): State<Shared>) -> Response {
    let Some(items) = &st.diagnostic else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no diagnostic set loaded");
    };
    let Some(preds) = &st.diagnostic_preds else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded");
    };
    let records: Vec<AnnotationRecord> = st.store.lock().expect("store lock").records().to_vec();
    let mut by_annotator: Vec<(String, Vec<AnnotationRecord>)> = Vec::new();
    for r in records.into_iter().filter(|r| st.positions.contains_key(&r.example_id)) {
        match by_annotator.iter_mut().find(|(a, _)| *a == r.annotator_id) {
            Some((_, v)) => v.push(r),
            None => by_annotator.push((r.annotator_id.clone(), vec![r])),
        }
    }
    let rank = |a: &str| st.annotators.iter().position(|x| x == a).unwrap_or(usize::MAX);
    by_annotator.sort_by(|(a, _), (b, _)| rank(a).cmp(&rank(b)).then(a.cmp(b)));
    let complete: Vec<&Vec<AnnotationRecord>> = by_annotator
        .iter()
        .filter(|(_, v)| v.len() == items.len())
        .map(|(_, v)| v)
        .collect();
    if complete.is_empty() {
        return error(StatusCode::CONFLICT, "no annotator has completed the diagnostic set");
    }
    let ids: Vec<String> = items.iter().map(|d| d.example_id.clone()).collect();
    let gold: Vec<TalkMove> = items.iter().map(|d| d.label).collect();
    match agreement_report(&ids, &gold, preds, complete[0], complete.get(1).map(|v| v.as_slice())) {
        Ok(r) => Json(json!({ "report": r, "markdown": r.to_markdown() })).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn health(State(st): State<Shared>) -> Response {
    let annotations = st.store.lock().expect("store lock").records().len();
    Json(json!({
        "status": "ok",
        "model": st.model.as_ref().map(|m| m.version.clone()),
        "diagnostic": st.diagnostic.as_ref().map(Vec::len),
        "annotations": annotations,
    }))
    .into_response()
}

async fn log_requests(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let resp = next.run(req).await;
    log::info!(
        "method={method} path={path} status={} ms={:.2}",
        resp.status().as_u16(),
        start.elapsed().as_secs_f64() * 1e3
    );
    resp
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/diagnostic/next", get(diagnostic_next))
        .route("/annotations", post(post_annotation))
        .route("/report", get(report))
        .route("/health", get(health))
        .layer(middleware::from_fn(log_requests))
        .with_state(Arc::new(state))
}

/// Binds, prints `listening on http://ADDR` to stdout and serves until
/// interrupted.
pub async fn serve(cfg: &ServiceConfig) -> Result<(), ServiceError> {
    let app = router(AppState::from_config(cfg)?);
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    std::io::stdout().flush()?;
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
