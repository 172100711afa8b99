//! The per-run record kept in `run.json` and its status machine.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use cbdebug_core::io::Artifact;
use cbdebug_core::retrain::StrategyConfig;
use cbdebug_core::synthdata::DatasetConfig;

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Idle,
    Training,
    Retraining,
    Done,
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Idle => "idle",
            RunStatus::Training => "training",
            RunStatus::Retraining => "retraining",
            RunStatus::Done => "done",
            RunStatus::Failed => "failed",
        }
    }

    /// A job is (or was, if its process died) working on the run.
    pub fn in_flight(self) -> bool {
        matches!(self, RunStatus::Training | RunStatus::Retraining)
    }

    /// Allowed edges. Besides the main line idle → training → done and
    /// done → retraining → done/failed, a failed initial training may be
    /// retried from idle, and a failed retrain may be retried.
    pub fn can_move_to(self, next: RunStatus) -> bool {
        use RunStatus::*;
        matches!(
            (self, next),
            (Idle, Training)
                | (Training, Done)
                | (Training, Failed)
                | (Done, Retraining)
                | (Retraining, Done)
                | (Retraining, Failed)
                | (Failed, Retraining)
                | (Failed, Training)
        )
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// File names inside a run directory, relative to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRefs {
    pub dataset: Option<String>,
    pub model_before: Option<String>,
    pub model_after: Option<String>,
    pub feedback: Option<String>,
    pub metrics: Option<String>,
    pub weights: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: RunStatus,
    /// Progress of the current or last job, in `[0, 1]`.
    pub progress: f64,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub dataset_config: DatasetConfig,
    pub artifacts: ArtifactRefs,
    /// Strategy of the last retrain, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyConfig>,
    /// Process running the current job.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_pid: Option<u32>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl Artifact for RunRecord {
    const VERSION: &'static str = "cbdebug-run-1";
}

impl RunRecord {
    pub fn new(run_id: String, preset: Option<String>, dataset_config: DatasetConfig) -> Self {
        let now = Utc::now();
        RunRecord {
            run_id,
            status: RunStatus::Idle,
            progress: 0.0,
            message: "created".into(),
            preset,
            dataset_config,
            artifacts: ArtifactRefs::default(),
            strategy: None,
            job_pid: None,
            created_at: now,
            updated_at: now,
        }
    }

    pub fn transition(&mut self, next: RunStatus, message: impl Into<String>) -> Result<(), ServiceError> {
        if !self.status.can_move_to(next) {
            return Err(ServiceError::Conflict(format!(
                "run {} cannot go from {} to {next}",
                self.run_id, self.status
            )));
        }
        self.status = next;
        self.message = message.into();
        self.progress = if next == RunStatus::Done { 1.0 } else { 0.0 };
        if !next.in_flight() {
            self.job_pid = None;
        }
        self.updated_at = Utc::now();
        Ok(())
    }
}
