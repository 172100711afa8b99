//! JSON API under `/api`.
//!
//! Reads run on the blocking pool and never wait for jobs. Training and
//! retraining are validated and locked before the response goes out, then
//! run in the background under a worker limit; clients poll `/status`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use cbdebug_core::cbm::TrainConfig;
use cbdebug_core::retrain::{Strategy, StrategyConfig};
use cbdebug_core::synthdata::DatasetConfig;

use crate::error::ServiceError;
use crate::jobs::{self, FeedbackRequest, ModelChoice};
use crate::store::RunStore;

#[derive(Clone)]
pub struct AppState {
    store: RunStore,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(store: RunStore, workers: usize) -> Self {
        AppState {
            store,
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            e if e.is_validation() => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.to_string() });
        if let ServiceError::Validation {
            concept_id: Some(c), ..
        } = &self
        {
            body["concept_id"] = json!(c);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Runtime(format!("worker panicked: {e}")))?
}

/// Runs `job` on the blocking pool once a worker slot is free.
fn spawn_job<F>(state: &AppState, run_id: String, job: F)
where
    F: FnOnce() -> ApiResult<()> + Send + 'static,
{
    let workers = state.workers.clone();
    tokio::spawn(async move {
        let Ok(_permit) = workers.acquire_owned().await else {
            return;
        };
        match tokio::task::spawn_blocking(job).await {
            Ok(Ok(())) => {}
            Ok(Err(e)) => log::warn!("run {run_id}: job failed: {e}"),
            Err(e) => log::error!("run {run_id}: job panicked: {e}"),
        }
    });
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/concepts", get(get_concepts))
        .route("/runs/{id}/feedback", post(post_feedback))
        .route("/runs/{id}/retrain", post(post_retrain))
        .route("/runs/{id}/status", get(get_status))
        .route("/runs/{id}/metrics", get(get_metrics))
        .route("/runs/{id}/weights/histogram", get(get_histogram));
    Router::new().nest("/api", api).with_state(state)
}

async fn list_runs(State(st): State<AppState>) -> ApiResult<impl IntoResponse> {
    let runs = blocking(move || st.store.list()).await?;
    Ok(Json(runs))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRun {
    #[serde(default)]
    run_id: Option<String>,
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    dataset_config: Option<DatasetConfig>,
    #[serde(default)]
    train_config: Option<TrainConfig>,
}

async fn create_run(State(st): State<AppState>, body: Option<Json<Value>>) -> ApiResult<impl IntoResponse> {
    let body = body.map(|Json(v)| v).unwrap_or_else(|| json!({}));
    let req: CreateRun =
        serde_json::from_value(body).map_err(|e| ServiceError::validation(format!("invalid request: {e}")))?;
    let store = st.store.clone();
    let (record, job) = blocking(move || {
        let seed = req.seed.unwrap_or(0);
        let record = jobs::create_run(&store, req.run_id, req.preset.as_deref(), req.dataset_config, seed)?;
        let cfg = req.train_config.unwrap_or(TrainConfig {
            seed,
            ..TrainConfig::default()
        });
        let job = jobs::prepare_train(&store, &record.run_id, cfg)?;
        let record = store.load(&record.run_id)?;
        Ok((record, job))
    })
    .await?;
    let store = st.store.clone();
    spawn_job(&st, record.run_id.clone(), move || job.run(&store).map(|_| ()));
    Ok((StatusCode::CREATED, Json(record)))
}

async fn get_run(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || st.store.load(&id)).await?))
}

#[derive(Debug, Deserialize)]
struct ConceptQuery {
    #[serde(default)]
    model: ModelChoice,
    #[serde(default)]
    k: Option<usize>,
}

async fn get_concepts(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ConceptQuery>,
) -> ApiResult<impl IntoResponse> {
    let k = q.k.unwrap_or(jobs::DEFAULT_EXEMPLARS);
    Ok(Json(blocking(move || jobs::concept_views(&st.store, &id, q.model, k)).await?))
}

async fn post_feedback(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<Value>,
) -> ApiResult<impl IntoResponse> {
    let req: FeedbackRequest =
        serde_json::from_value(body).map_err(|e| ServiceError::validation(format!("invalid feedback: {e}")))?;
    Ok(Json(blocking(move || jobs::record_feedback(&st.store, &id, &req)).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrainRequest {
    strategy: String,
    /// Merged over the strategy's default configuration.
    #[serde(default)]
    overrides: Option<Value>,
}

/// Recursively overlays `patch` on `base`; `null` leaves are kept as null.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn strategy_config(strategy: &str, overrides: Option<Value>) -> Result<StrategyConfig, ServiceError> {
    let strategy: Strategy = strategy.parse()?;
    let mut value = serde_json::to_value(StrategyConfig::new(strategy))
        .map_err(|e| ServiceError::Runtime(e.to_string()))?;
    if let Some(o) = overrides {
        if !o.is_object() {
            return Err(ServiceError::validation("overrides must be a JSON object"));
        }
        if o.get("strategy").is_some_and(|s| s != &value["strategy"]) {
            return Err(ServiceError::validation("overrides may not change the strategy"));
        }
        merge(&mut value, o);
    }
    let cfg: StrategyConfig =
        serde_json::from_value(value).map_err(|e| ServiceError::validation(format!("invalid overrides: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

async fn post_retrain(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<Value>,
) -> ApiResult<impl IntoResponse> {
    let req: RetrainRequest =
        serde_json::from_value(body).map_err(|e| ServiceError::validation(format!("invalid request: {e}")))?;
    let cfg = strategy_config(&req.strategy, req.overrides)?;
    let store = st.store.clone();
    let (record, job) = blocking(move || {
        let job = jobs::prepare_retrain(&store, &id, cfg)?;
        let record = store.load(job.run_id())?;
        Ok((record, job))
    })
    .await?;
    let store = st.store.clone();
    spawn_job(&st, record.run_id.clone(), move || job.run(&store).map(|_| ()));
    Ok((StatusCode::ACCEPTED, Json(record)))
}

async fn get_status(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || jobs::status(&st.store, &id)).await?))
}

async fn get_metrics(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || jobs::current_metrics(&st.store, &id)).await?))
}

#[derive(Debug, Deserialize)]
struct HistogramQuery {
    #[serde(default)]
    bins: Option<usize>,
}

async fn get_histogram(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HistogramQuery>,
) -> ApiResult<impl IntoResponse> {
    let bins = q.bins.unwrap_or(jobs::HISTOGRAM_BINS);
    if bins == 0 || bins > 10_000 {
        return Err(ServiceError::validation("bins must be in 1..=10000"));
    }
    Ok(Json(blocking(move || jobs::weights_histogram(&st.store, &id, bins)).await?))
}

/// Serves until the process is stopped. Fails if the address is taken.
pub async fn serve(addr: SocketAddr, state: AppState) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Runtime(format!("cannot listen on {addr}: {e}")))?;
    serve_on(listener, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState) -> Result<(), ServiceError> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}/api");
    }
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ServiceError::Runtime(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_into_defaults() {
        let cfg = strategy_config(
            "cbdebug",
            Some(json!({"retrain_epochs": 3, "permweight": {"k_folds": 2}})),
        )
        .unwrap();
        assert_eq!(cfg.retrain_epochs, Some(3));
        assert_eq!(cfg.permweight.k_folds, 2);
        assert_eq!(cfg.permweight.n_permutations, StrategyConfig::new(Strategy::Cbdebug).permweight.n_permutations);
    }

    #[test]
    fn bad_overrides_are_validation_errors() {
        for (s, o) in [
            ("cbdebug", Some(json!({"retrain_epochs": 0}))),
            ("cbdebug", Some(json!({"strategy": "jtt"}))),
            ("cbdebug", Some(json!([1, 2]))),
            ("nope", None),
        ] {
            let e = strategy_config(s, o).unwrap_err();
            assert!(e.is_validation(), "{s}: {e}");
        }
    }
}
