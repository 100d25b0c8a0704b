//! HTTP generation service over a shared read-only model.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use pmg_core::config::SamplingConfig;
use pmg_core::motion::{motion_from_json, motion_to_json};
use pmg_core::sampler::generate_with_abort;
use pmg_core::{inpaint, KeyframeSpec, Model};

use crate::api::{parse_body, ApiError, FromMotionBody, GenerateBody, InpaintBody, API_VERSION, API_VERSION_HEADER};

pub const CHECKPOINT_ENV: &str = "PMG_CHECKPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub evaluator: Option<PathBuf>,
    pub max_concurrent: usize,
    pub timeout_ms: u64,
    /// Serve the EMA weights rather than the raw ones.
    pub ema: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: PathBuf::from("model.ckpt"),
            evaluator: None,
            max_concurrent: 2,
            timeout_ms: 60_000,
            ema: true,
        }
    }
}

impl ServiceConfig {
    /// Reads a TOML file; `PMG_CHECKPOINT` overrides the checkpoint path.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg: Self = match path {
            Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Some(ckpt) = std::env::var_os(CHECKPOINT_ENV) {
            cfg.checkpoint = PathBuf::from(ckpt);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.max_concurrent > 0, "max_concurrent must be positive");
        anyhow::ensure!(self.timeout_ms > 0, "timeout_ms must be positive");
        Ok(())
    }
}

#[derive(Clone)]
pub struct AppState {
    pub model: Arc<Model>,
    pub defaults: SamplingConfig,
    pub limit: Arc<Semaphore>,
    pub timeout: Duration,
    pub evaluator: Option<PathBuf>,
}

impl AppState {
    pub fn new(model: Model, config: &ServiceConfig) -> Self {
        Self {
            defaults: model.config.sampling,
            model: Arc::new(model),
            limit: Arc::new(Semaphore::new(config.max_concurrent)),
            timeout: Duration::from_millis(config.timeout_ms),
            evaluator: config.evaluator.clone(),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/generate", post(generate_handler))
        .route("/inpaint", post(inpaint_handler))
        .route("/keyframes/from-motion", post(from_motion_handler))
        .route("/health", get(health))
        .route("/model-info", get(model_info))
        .with_state(state)
}

pub async fn serve(config: ServiceConfig, model: Model) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(AppState::new(model, &config))).await?;
    Ok(())
}

fn respond(status: StatusCode, body: Vec<u8>) -> Response {
    let mut res = (status, body).into_response();
    let headers = res.headers_mut();
    headers.insert("content-type", HeaderValue::from_static("application/json"));
    headers.insert(API_VERSION_HEADER, HeaderValue::from_static(API_VERSION));
    res
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = serde_json::to_vec(&json!({ "error": self })).expect("error serializes");
        respond(status, body)
    }
}

fn ok_json(value: &Value) -> Response {
    respond(StatusCode::OK, serde_json::to_vec(value).expect("value serializes"))
}

fn check_version(headers: &HeaderMap) -> Result<(), ApiError> {
    match headers.get(API_VERSION_HEADER) {
        None => Ok(()),
        Some(v) if v.as_bytes() == API_VERSION.as_bytes() => Ok(()),
        Some(v) => Err(ApiError::bad_request(
            API_VERSION_HEADER,
            format!("unsupported version {:?}, expected {API_VERSION}", v),
        )),
    }
}

/// Runs `job` on the blocking pool under the concurrency limit. `job` receives an
/// abort predicate that turns true once the request deadline passes.
async fn run_limited<F>(state: &AppState, job: F) -> Result<Value, ApiError>
where
    F: FnOnce(&Model, &dyn Fn() -> bool) -> Result<Value, ApiError> + Send + 'static,
{
    let permit = state
        .limit
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(503, "$", "concurrency limit reached, retry later"))?;
    let model = state.model.clone();
    let deadline = Instant::now() + state.timeout;
    let out = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let abort = move || Instant::now() >= deadline;
        job(&model, &abort)
    })
    .await
    .map_err(|e| ApiError::new(500, "$", format!("generation task failed: {e}")))?;
    out
}

async fn generate_handler(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let result = async {
        check_version(&headers)?;
        let body: GenerateBody = parse_body(&body)?;
        let req = body.into_request(&state.model, &state.defaults)?;
        run_limited(&state, move |model, abort| {
            let (motion, prov) = generate_with_abort(model, &req, abort).map_err(|e| ApiError::from_core(e, ""))?;
            Ok(json!({ "motion": motion_to_json(&motion), "provenance": prov }))
        })
        .await
    }
    .await;
    match result {
        Ok(v) => ok_json(&v),
        Err(e) => e.into_response(),
    }
}

async fn inpaint_handler(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let result = async {
        check_version(&headers)?;
        let body: InpaintBody = parse_body(&body)?;
        let (motion, req) = body.into_request(&state.model, &state.defaults)?;
        let motion = motion_from_json(&motion).map_err(|e| ApiError::from_core(e, "motion"))?;
        if motion.skeleton != state.model.skeleton {
            return Err(ApiError::bad_request("motion.skeleton", "does not match the served model"));
        }
        if motion.len() > state.model.generator.config.max_len {
            return Err(ApiError::bad_request(
                "motion.frames",
                format!("at most {} frames are supported", state.model.generator.config.max_len),
            ));
        }
        run_limited(&state, move |model, abort| {
            let (out, prov) = inpaint(model, &motion, &req, abort).map_err(|e| ApiError::from_core(e, "motion"))?;
            Ok(json!({ "motion": motion_to_json(&out), "provenance": prov }))
        })
        .await
    }
    .await;
    match result {
        Ok(v) => ok_json(&v),
        Err(e) => e.into_response(),
    }
}

async fn from_motion_handler(headers: HeaderMap, body: Bytes) -> Response {
    let result = (|| {
        check_version(&headers)?;
        let body: FromMotionBody = parse_body(&body)?;
        let motion = motion_from_json(&body.motion).map_err(|e| ApiError::from_core(e, "motion"))?;
        let mut seen = std::collections::BTreeSet::new();
        let mut out: Vec<KeyframeSpec> = Vec::with_capacity(body.indices.len());
        for (i, &p) in body.indices.iter().enumerate() {
            if !seen.insert(p) {
                return Err(ApiError::bad_request(format!("indices[{i}]"), format!("duplicate position {p}")));
            }
            let kf = KeyframeSpec::from_motion(&motion, p)
                .map_err(|_| ApiError::bad_request(format!("indices[{i}]"), format!("must lie in 1..={}", motion.len())))?;
            out.push(kf);
        }
        Ok(json!({ "keyframes": out }))
    })();
    match result {
        Ok(v) => ok_json(&v),
        Err(e) => e.into_response(),
    }
}

async fn health(State(state): State<AppState>) -> Response {
    ok_json(&json!({
        "status": "ok",
        "available_slots": state.limit.available_permits(),
    }))
}

async fn model_info(State(state): State<AppState>) -> Response {
    let m = &state.model;
    ok_json(&json!({
        "api_version": API_VERSION,
        "step": m.step,
        "fps": m.fps,
        "max_len": m.generator.config.max_len,
        "feature_dim": m.skeleton.layout().dim(),
        "keyframe_mask": m.skeleton.layout().keyframe_mask(),
        "skeleton": m.skeleton,
        "vocabulary": m.vocab.words(),
        "schedule": m.schedule.fingerprint(),
        "defaults": state.defaults,
        "config": m.config,
        "evaluator": state.evaluator,
    }))
}
