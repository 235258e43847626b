use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use riskfuse_core::explain::ExplainTarget;
use riskfuse_core::{catalog, Demographics, Disease, DiseaseLabels, HorizonRisks, LabPanel, PatientRecord};
use riskfuse_store::{AlertThresholds, PatientQuery, Storage, StoreError, VersionedPatient};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::jobs::{Enqueue, JobState, PredictionJob};
use crate::AppState;

pub const API_PREFIX: &str = "/api/v1";
const MAX_PAGE: usize = 500;

type St = State<Arc<AppState>>;

pub(crate) fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/patients", get(list_patients))
        .route("/patients/{id}", get(get_patient).put(put_patient))
        .route("/patients/{id}/labs", post(submit_labs))
        .route("/patients/{id}/predict", post(submit_prediction))
        .route("/patients/{id}/horizons", get(horizons))
        .route("/jobs/{job_id}", get(get_job))
        .route("/alerts", get(alerts))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_session));
    let api = Router::new()
        .route("/login", post(login))
        .route("/healthz", get(healthz))
        .merge(protected);
    Router::new()
        .nest(API_PREFIX, api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

#[derive(Debug)]
pub(crate) struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fields: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => Self::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            StoreError::Referential(_) => Self::new(StatusCode::CONFLICT, "conflict", e.to_string()),
            StoreError::Invalid(_) => Self::unprocessable(e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Store calls may fsync; keep them off the async threads.
async fn with_store<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&dyn Storage) -> Result<T, StoreError> + Send + 'static,
) -> ApiResult<T> {
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(store.as_ref()))
        .await
        .map_err(|e| ApiError::internal(format!("store task failed: {e}")))?
        .map_err(ApiError::from)
}

type QueryResult<T> = Result<Query<T>, QueryRejection>;

fn query<T>(q: QueryResult<T>) -> ApiResult<T> {
    q.map(|Query(t)| t)
        .map_err(|e| ApiError::unprocessable(format!("bad query string: {}", e.body_text())))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("malformed request body: {e}")))
}

async fn require_session(State(state): St, req: Request, next: Next) -> Response {
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match token.and_then(|t| state.sessions.check(t)) {
        Some(_) => next.run(req).await,
        None => ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing, unknown or expired session token",
        )
        .into_response(),
    }
}

#[derive(Deserialize)]
struct LoginBody {
    user: String,
    pass: String,
}

async fn login(State(state): St, body: Bytes) -> ApiResult<impl IntoResponse> {
    let LoginBody { user, pass } = parse_body(&body)?;
    let session = state
        .sessions
        .login(&user, &pass)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "wrong user or password"))?;
    Ok(Json(json!({ "token": session.token, "expires_at": session.expires_at })))
}

async fn healthz(State(state): St) -> impl IntoResponse {
    let mut body = json!({
        "status": if state.model.version().is_some() { "ok" } else { "degraded" },
        "model_version": state.model.version(),
        "queue": { "len": state.queue.len(), "depth": state.queue.depth() },
    });
    if let crate::ModelSlot::Missing { error } = &state.model {
        body["error"] = json!(error);
    }
    Json(body)
}

#[derive(Deserialize)]
struct ThresholdParams {
    diabetes: Option<f64>,
    heart: Option<f64>,
    hypertension: Option<f64>,
}

impl ThresholdParams {
    fn resolve(&self) -> ApiResult<AlertThresholds> {
        let mut t = AlertThresholds::default();
        let mut bad = Vec::new();
        for (name, given, slot) in [
            ("diabetes", self.diabetes, &mut t.diabetes),
            ("heart", self.heart, &mut t.heart),
            ("hypertension", self.hypertension, &mut t.hypertension),
        ] {
            match given {
                Some(v) if (0.0..=1.0).contains(&v) => *slot = v,
                Some(v) => bad.push(format!("{name}: threshold {v} outside [0, 1]")),
                None => {}
            }
        }
        if bad.is_empty() {
            Ok(t)
        } else {
            let mut e = ApiError::unprocessable("invalid alert thresholds");
            e.fields = bad;
            Err(e)
        }
    }
}

#[derive(Deserialize)]
struct ListParams {
    limit: Option<usize>,
    offset: Option<usize>,
    alert: Option<bool>,
    // Not `#[serde(flatten)]`: flattened query fields lose their types.
    diabetes: Option<f64>,
    heart: Option<f64>,
    hypertension: Option<f64>,
}

async fn list_patients(State(state): St, q: QueryResult<ListParams>) -> ApiResult<impl IntoResponse> {
    let p = query(q)?;
    let limit = p.limit.unwrap_or(PatientQuery::default().limit);
    if !(1..=MAX_PAGE).contains(&limit) {
        return Err(ApiError::unprocessable(format!("limit must be in 1..={MAX_PAGE}")));
    }
    let query = PatientQuery {
        limit,
        offset: p.offset.unwrap_or(0),
        alert: p.alert,
        thresholds: ThresholdParams {
            diabetes: p.diabetes,
            heart: p.heart,
            hypertension: p.hypertension,
        }
        .resolve()?,
    };
    let page = with_store(&state, move |s| s.list_patients(&query)).await?;
    Ok(Json(page))
}

#[derive(Serialize)]
struct PatientView {
    #[serde(flatten)]
    record: PatientRecord,
    version: u64,
    updated_at: DateTime<Utc>,
}

impl From<VersionedPatient> for PatientView {
    fn from(v: VersionedPatient) -> Self {
        PatientView {
            record: v.record,
            version: v.version,
            updated_at: v.updated_at,
        }
    }
}

async fn get_patient(State(state): St, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let v = with_store(&state, move |s| s.get_patient(&id)).await?;
    Ok(Json(PatientView::from(v)))
}

/// Labs arrive either as the catalog-ordered array (nulls for unmeasured)
/// or as an object keyed by analyte name.
#[derive(Deserialize)]
#[serde(untagged)]
enum LabsBody {
    Panel(LabPanel),
    Named(BTreeMap<String, Value>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientBody {
    #[serde(default)]
    patient_id: Option<String>,
    #[serde(default)]
    note: String,
    #[serde(default)]
    labs: Option<LabsBody>,
    demo: Demographics,
    #[serde(default)]
    labels: Option<DiseaseLabels>,
    #[serde(default)]
    onset_day: Option<u32>,
}

/// Validates every entry and reports all offending fields at once.
fn named_panel(entries: &BTreeMap<String, Value>) -> ApiResult<LabPanel> {
    let mut fields = Vec::new();
    let mut good = Vec::new();
    for (name, value) in entries {
        let known = catalog::index_of(name).is_some();
        match value.as_f64().filter(|v| v.is_finite()) {
            _ if !known => fields.push(format!("{name}: unknown analyte")),
            Some(v) => good.push((name.as_str(), v)),
            None => fields.push(format!("{name}: value must be a finite number")),
        }
    }
    if !fields.is_empty() {
        let mut e = ApiError::unprocessable("invalid lab values");
        e.fields = fields;
        return Err(e);
    }
    catalog::panel_from_named(good).map_err(|e| ApiError::unprocessable(e.to_string()))
}

fn check_panel(panel: LabPanel) -> ApiResult<LabPanel> {
    if panel.len() != catalog::N_ANALYTES {
        return Err(ApiError::unprocessable(format!(
            "labs array has {} entries, expected {}",
            panel.len(),
            catalog::N_ANALYTES
        )));
    }
    Ok(panel)
}

async fn put_patient(State(state): St, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let b: PatientBody = parse_body(&body)?;
    if b.patient_id.as_ref().is_some_and(|p| *p != id) {
        return Err(ApiError::unprocessable("patient_id in body does not match the path"));
    }
    let labs = match b.labs {
        None => LabPanel::empty(catalog::N_ANALYTES),
        Some(LabsBody::Panel(p)) => check_panel(p)?,
        Some(LabsBody::Named(m)) => named_panel(&m)?,
    };
    let record = PatientRecord {
        patient_id: id.clone(),
        note: b.note,
        labs,
        demo: b.demo,
        labels: b.labels,
        onset_day: b.onset_day,
    };
    let version = with_store(&state, move |s| s.put_patient(&record)).await?;
    Ok(Json(json!({ "patient_id": id, "version": version })))
}

async fn submit_labs(State(state): St, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let named: BTreeMap<String, Value> = parse_body(&body)?;
    if named.is_empty() {
        return Err(ApiError::unprocessable("no lab values given"));
    }
    let panel = named_panel(&named)?;
    let pid = id.clone();
    let version = with_store(&state, move |s| {
        // Read-merge-write; writes are serialized inside the store but a
        // concurrent PUT can interleave, in which case the later write wins.
        let mut record = s.get_patient(&pid)?.record;
        record
            .labs
            .merge(&panel)
            .map_err(|e| StoreError::Invalid(e.to_string()))?;
        s.put_patient(&record)
    })
    .await?;
    Ok(Json(json!({ "patient_id": id, "version": version })))
}

#[derive(Deserialize)]
struct PredictParams {
    #[serde(default)]
    explain: bool,
    target: Option<String>,
}

async fn submit_prediction(
    State(state): St,
    Path(id): Path<String>,
    q: QueryResult<PredictParams>,
) -> ApiResult<impl IntoResponse> {
    let p = query(q)?;
    let target = match &p.target {
        Some(t) => t.parse::<ExplainTarget>().map_err(|e| ApiError::unprocessable(e.to_string()))?,
        None => ExplainTarget::Disease(Disease::Diabetes),
    };
    let pid = id.clone();
    let patient = with_store(&state, move |s| s.get_patient(&pid)).await?;
    if !patient.record.has_inputs() {
        return Err(ApiError::unprocessable(format!(
            "patient {id} has neither a note nor any lab values"
        )));
    }
    let job = PredictionJob {
        job_id: crate::auth::random_token(),
        patient_id: id,
        state: JobState::Pending,
        explain: p.explain,
        target: p.explain.then_some(target),
        submitted_at: Utc::now(),
        started_at: None,
        finished_at: None,
        result: None,
        error: None,
        prediction: None,
    };
    let job_id = job.job_id.clone();
    // Registered first so a worker never sees an unknown id.
    state.jobs.insert(job);
    match state.queue.try_push(job_id.clone()) {
        Enqueue::Accepted => Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id })))),
        full_or_closed => {
            state.jobs.remove(&job_id);
            let why = if full_or_closed == Enqueue::Full {
                format!("prediction queue is full ({} jobs); retry later", state.queue.depth())
            } else {
                "prediction workers are shut down".to_string()
            };
            Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", why))
        }
    }
}

async fn get_job(State(state): St, Path(job_id): Path<String>) -> ApiResult<impl IntoResponse> {
    state
        .jobs
        .get(&job_id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("job {job_id:?} not found")))
}

#[derive(Serialize)]
struct HorizonView {
    patient_id: String,
    prediction_id: String,
    created_at: DateTime<Utc>,
    model_version: String,
    horizons: HorizonRisks,
}

async fn horizons(State(state): St, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let p = with_store(&state, move |s| {
        s.get_patient(&id)?;
        s.get_latest_prediction(&id)
    })
    .await?;
    Ok(Json(HorizonView {
        patient_id: p.patient_id,
        prediction_id: p.prediction_id,
        created_at: p.created_at,
        model_version: p.model_version,
        horizons: p.horizons,
    }))
}

#[derive(Debug, Serialize)]
struct Alert {
    patient_id: String,
    disease: Disease,
    probability: f64,
    prediction_id: String,
    created_at: DateTime<Utc>,
}

async fn alerts(State(state): St, q: QueryResult<ThresholdParams>) -> ApiResult<impl IntoResponse> {
    let thresholds = query(q)?.resolve()?;
    let latest = with_store(&state, |s| s.latest_predictions()).await?;
    let mut out: Vec<Alert> = latest
        .into_iter()
        .flat_map(|pred| {
            thresholds.flagged(&pred.risks).into_iter().map(move |d| Alert {
                patient_id: pred.patient_id.clone(),
                disease: d,
                probability: pred.risks.get(d),
                prediction_id: pred.prediction_id.clone(),
                created_at: pred.created_at,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.patient_id.cmp(&b.patient_id))
            .then_with(|| a.disease.cmp(&b.disease))
    });
    Ok(Json(out))
}
