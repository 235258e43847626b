//! HTTP service for the risk model.
//!
//! Handlers validate, touch the store and enqueue; inference runs on worker
//! tasks that pull job ids from a bounded queue (see [`jobs`]). Everything
//! except `POST /api/v1/login` and `GET /api/v1/healthz` requires a bearer
//! token from login.

mod api;
pub mod auth;
pub mod config;
pub mod jobs;

use std::future::Future;
use std::path::Path;
use std::sync::Arc;

use chrono::Utc;
use riskfuse_core::explain::{explain_record, ExplainMode};
use riskfuse_core::{checkpoint, Model};
use riskfuse_store::{FileStore, Storage, StoreError, StoredPrediction};
use tokio::task::JoinHandle;

pub use api::API_PREFIX;
pub use auth::{Session, Sessions};
pub use config::Config;
pub use jobs::{JobCounts, JobQueue, JobState, JobTable, PredictionJob};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The model the workers use, or why there is none. A service without a
/// model still starts: records can be managed and every prediction job
/// fails with the load error.
#[derive(Clone)]
pub enum ModelSlot {
    Loaded { model: Arc<Model>, version: String },
    Missing { error: String },
}

impl ModelSlot {
    pub fn load(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref();
        match checkpoint::load(path) {
            Ok((model, version)) => ModelSlot::loaded(model, version),
            Err(e) => ModelSlot::Missing {
                error: format!("model checkpoint {} could not be loaded: {e}", path.display()),
            },
        }
    }

    pub fn loaded(model: Model, version: String) -> Self {
        ModelSlot::Loaded {
            model: Arc::new(model),
            version,
        }
    }

    pub fn version(&self) -> Option<&str> {
        match self {
            ModelSlot::Loaded { version, .. } => Some(version),
            ModelSlot::Missing { .. } => None,
        }
    }
}

pub(crate) struct AppState {
    store: Arc<dyn Storage>,
    model: ModelSlot,
    sessions: Sessions,
    jobs: JobTable,
    queue: JobQueue,
}

#[derive(Clone)]
pub struct Service {
    state: Arc<AppState>,
}

impl Service {
    /// No workers run until [`Service::attach_workers`]; submissions queue
    /// up (and overflow) in the meantime.
    pub fn new(config: &Config, store: Arc<dyn Storage>, model: ModelSlot) -> Self {
        Service {
            state: Arc::new(AppState {
                store,
                model,
                sessions: Sessions::new(&config.user, &config.pass, config.session_ttl_secs),
                jobs: JobTable::default(),
                queue: JobQueue::new(config.queue_depth),
            }),
        }
    }

    /// Opens the file store and loads the checkpoint named in `config`.
    pub fn open(config: &Config) -> Result<Self, ServiceError> {
        let store = FileStore::open(&config.store)?;
        Ok(Self::new(config, Arc::new(store), ModelSlot::load(&config.checkpoint)))
    }

    pub fn router(&self) -> axum::Router {
        api::router(self.state.clone())
    }

    pub fn jobs(&self) -> &JobTable {
        &self.state.jobs
    }

    pub fn queue(&self) -> &JobQueue {
        &self.state.queue
    }

    pub fn store(&self) -> &Arc<dyn Storage> {
        &self.state.store
    }

    pub fn model(&self) -> &ModelSlot {
        &self.state.model
    }

    /// Spawns `n` workers on the current Tokio runtime.
    pub fn attach_workers(&self, n: usize) -> Vec<JoinHandle<()>> {
        (0..n).map(|_| tokio::spawn(worker(self.state.clone()))).collect()
    }
}

async fn worker(state: Arc<AppState>) {
    while let Some(job_id) = state.queue.pop().await {
        let Ok(job) = state.jobs.start(&job_id) else { continue };
        let st = state.clone();
        let outcome = tokio::task::spawn_blocking(move || run_job(&st, &job))
            .await
            .unwrap_or_else(|e| Err(format!("worker crashed while running the job: {e}")));
        // A refused transition is counted by the table; nothing else to do.
        let _ = state.jobs.finish(&job_id, outcome);
    }
}

fn run_job(state: &AppState, job: &PredictionJob) -> Result<StoredPrediction, String> {
    let (model, version) = match &state.model {
        ModelSlot::Loaded { model, version } => (model, version),
        ModelSlot::Missing { error } => return Err(error.clone()),
    };
    let patient = state
        .store
        .get_patient(&job.patient_id)
        .map_err(|e| format!("could not read patient: {e}"))?;
    let prediction = model
        .predict(&patient.record)
        .map_err(|e| format!("inference failed: {e}"))?;
    let explanation = match job.target.filter(|_| job.explain) {
        Some(target) => Some(
            explain_record(model, &patient.record, target, ExplainMode::Auto)
                .map_err(|e| format!("explanation failed: {e}"))?,
        ),
        None => None,
    };
    let stored = StoredPrediction {
        prediction_id: auth::random_token(),
        patient_id: job.patient_id.clone(),
        created_at: Utc::now(),
        model_version: version.clone(),
        risks: prediction.risks,
        horizons: prediction.horizons,
        explanation,
    };
    state
        .store
        .put_prediction(&stored)
        .map_err(|e| format!("could not store prediction: {e}"))
}

/// Runs the service until `shutdown` resolves.
pub async fn serve(config: &Config, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let service = Service::open(config)?;
    if let ModelSlot::Missing { error } = service.model() {
        eprintln!("warning: {error}; prediction jobs will fail");
    }
    service.attach_workers(config.workers);
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    eprintln!("listening on http://{}{API_PREFIX}", listener.local_addr()?);
    axum::serve(listener, service.router())
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

/// Blocking entry point: builds a runtime and serves until Ctrl-C.
pub fn run(config: &Config) -> Result<(), ServiceError> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(serve(config, async {
        let _ = tokio::signal::ctrl_c().await;
    }))
}
