//! Prediction jobs and the bounded queue that feeds the workers.
//!
//! The queue carries only job ids; the [`JobTable`] holds state. A worker
//! can therefore live anywhere that can reach both, and swapping the
//! in-process channel for a remote transport leaves handlers untouched.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use riskfuse_core::explain::ExplainTarget;
use riskfuse_store::StoredPrediction;
use serde::Serialize;
use tokio::sync::mpsc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Pending, JobState::Running) | (JobState::Running, JobState::Done | JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionJob {
    pub job_id: String,
    pub patient_id: String,
    pub state: JobState,
    pub explain: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<ExplainTarget>,
    pub submitted_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    /// Prediction id once done.
    pub result: Option<String>,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<StoredPrediction>,
}

#[derive(Debug, thiserror::Error)]
#[error("job {job_id}: illegal transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub job_id: String,
    pub from: JobState,
    pub to: JobState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct JobCounts {
    pub pending: usize,
    pub running: usize,
    pub done: usize,
    pub failed: usize,
}

#[derive(Default)]
pub struct JobTable {
    jobs: Mutex<HashMap<String, PredictionJob>>,
    rejected_transitions: AtomicUsize,
}

impl JobTable {
    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, PredictionJob>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn insert(&self, job: PredictionJob) {
        self.lock().insert(job.job_id.clone(), job);
    }

    pub fn remove(&self, job_id: &str) {
        self.lock().remove(job_id);
    }

    pub fn get(&self, job_id: &str) -> Option<PredictionJob> {
        self.lock().get(job_id).cloned()
    }

    fn transition(
        &self,
        job_id: &str,
        to: JobState,
        apply: impl FnOnce(&mut PredictionJob),
    ) -> Result<PredictionJob, TransitionError> {
        let mut jobs = self.lock();
        let Some(job) = jobs.get_mut(job_id) else {
            self.rejected_transitions.fetch_add(1, Ordering::Relaxed);
            return Err(TransitionError {
                job_id: job_id.to_string(),
                from: JobState::Failed,
                to,
            });
        };
        if !job.state.can_become(to) {
            self.rejected_transitions.fetch_add(1, Ordering::Relaxed);
            return Err(TransitionError {
                job_id: job_id.to_string(),
                from: job.state,
                to,
            });
        }
        job.state = to;
        apply(job);
        Ok(job.clone())
    }

    pub fn start(&self, job_id: &str) -> Result<PredictionJob, TransitionError> {
        self.transition(job_id, JobState::Running, |j| j.started_at = Some(Utc::now()))
    }

    pub fn finish(
        &self,
        job_id: &str,
        outcome: Result<StoredPrediction, String>,
    ) -> Result<PredictionJob, TransitionError> {
        let to = if outcome.is_ok() { JobState::Done } else { JobState::Failed };
        self.transition(job_id, to, |j| {
            j.finished_at = Some(Utc::now());
            match outcome {
                Ok(p) => {
                    j.result = Some(p.prediction_id.clone());
                    j.prediction = Some(p);
                }
                Err(e) => j.error = Some(e),
            }
        })
    }

    pub fn counts(&self) -> JobCounts {
        let mut c = JobCounts::default();
        for job in self.lock().values() {
            match job.state {
                JobState::Pending => c.pending += 1,
                JobState::Running => c.running += 1,
                JobState::Done => c.done += 1,
                JobState::Failed => c.failed += 1,
            }
        }
        c
    }

    /// Transitions refused because they would skip a state or overwrite a
    /// terminal one. Stays 0 in a healthy service.
    pub fn rejected_transitions(&self) -> usize {
        self.rejected_transitions.load(Ordering::Relaxed)
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Enqueue {
    Accepted,
    Full,
    Closed,
}

pub struct JobQueue {
    tx: mpsc::Sender<String>,
    rx: Arc<tokio::sync::Mutex<mpsc::Receiver<String>>>,
    depth: usize,
}

impl JobQueue {
    pub fn new(depth: usize) -> Self {
        let (tx, rx) = mpsc::channel(depth);
        JobQueue {
            tx,
            rx: Arc::new(tokio::sync::Mutex::new(rx)),
            depth,
        }
    }

    /// Never waits: a full queue is reported immediately.
    pub fn try_push(&self, job_id: String) -> Enqueue {
        match self.tx.try_send(job_id) {
            Ok(()) => Enqueue::Accepted,
            Err(mpsc::error::TrySendError::Full(_)) => Enqueue::Full,
            Err(mpsc::error::TrySendError::Closed(_)) => Enqueue::Closed,
        }
    }

    /// Next job id; shared fairly between any number of workers.
    pub async fn pop(&self) -> Option<String> {
        self.rx.lock().await.recv().await
    }

    pub fn len(&self) -> usize {
        self.depth - self.tx.capacity()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: &str) -> PredictionJob {
        PredictionJob {
            job_id: id.into(),
            patient_id: "p".into(),
            state: JobState::Pending,
            explain: false,
            target: None,
            submitted_at: Utc::now(),
            started_at: None,
            finished_at: None,
            result: None,
            error: None,
            prediction: None,
        }
    }

    #[test]
    fn transitions_are_guarded() {
        let t = JobTable::default();
        t.insert(job("a"));
        assert!(t.finish("a", Err("x".into())).is_err());
        t.start("a").unwrap();
        assert!(t.start("a").is_err());
        let done = t.finish("a", Err("boom".into())).unwrap();
        assert_eq!(done.state, JobState::Failed);
        assert_eq!(done.error.as_deref(), Some("boom"));
        assert!(t.finish("a", Err("again".into())).is_err());
        assert_eq!(t.get("a").unwrap().error.as_deref(), Some("boom"));
        assert_eq!(t.rejected_transitions(), 3);
    }

    #[test]
    fn state_machine_table() {
        use JobState::*;
        let all = [Pending, Running, Done, Failed];
        let allowed: Vec<_> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a.can_become(b))
            .collect();
        assert_eq!(allowed, [(Pending, Running), (Running, Done), (Running, Failed)]);
    }

    #[tokio::test]
    async fn queue_rejects_beyond_depth() {
        let q = JobQueue::new(3);
        let results: Vec<_> = (0..5).map(|i| q.try_push(i.to_string())).collect();
        assert_eq!(results.iter().filter(|r| **r == Enqueue::Full).count(), 2);
        assert_eq!(q.len(), 3);
        assert_eq!(q.pop().await.as_deref(), Some("0"));
        assert_eq!(q.try_push("5".into()), Enqueue::Accepted);
    }
}
