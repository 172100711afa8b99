//! Run directories under a common root, one `run.json` each, plus a job lock
//! that serializes mutations across threads and processes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};

use cbdebug_core::cbm::ConceptBottleneck;
use cbdebug_core::feedback::FeedbackSet;
use cbdebug_core::io::Artifact;
use cbdebug_core::permweight::SampleWeights;
use cbdebug_core::retrain::{FEEDBACK_FILE, MODEL_AFTER_FILE, MODEL_BEFORE_FILE, WEIGHTS_FILE};
use cbdebug_core::synthdata::{DatasetConfig, Dataset};

use crate::error::{Result, ServiceError};
use crate::record::{RunRecord, RunStatus};

pub const RUN_FILE: &str = "run.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOCK_FILE: &str = "job.lock";

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

/// Held while a job mutates a run; the lock file goes away on drop.
#[derive(Debug)]
pub struct JobLock {
    path: PathBuf,
}

impl Drop for JobLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Identity of a live process: pid plus its start time, so a recycled pid
/// does not look like the original holder.
fn process_token(pid: u32) -> Option<String> {
    #[cfg(target_os = "linux")]
    {
        let stat = fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
        // The command name may contain spaces; fields restart after ')'.
        let rest = &stat[stat.rfind(')')? + 1..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if matches!(fields.first(), Some(&"Z") | Some(&"X")) {
            return None;
        }
        let start = fields.get(19)?;
        Some(format!("{pid} {start}"))
    }
    #[cfg(all(unix, not(target_os = "linux")))]
    {
        let alive = std::process::Command::new("kill")
            .args(["-0", &pid.to_string()])
            .status()
            .is_ok_and(|s| s.success());
        alive.then(|| pid.to_string())
    }
    #[cfg(not(unix))]
    {
        (pid == std::process::id()).then(|| pid.to_string())
    }
}

fn own_token() -> String {
    let pid = std::process::id();
    process_token(pid).unwrap_or_else(|| pid.to_string())
}

fn holder_alive(token: &str) -> bool {
    let Some(pid) = token.split_whitespace().next().and_then(|p| p.parse::<u32>().ok()) else {
        return false;
    };
    process_token(pid).is_some_and(|t| t == token.trim())
}

pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| ServiceError::Runtime(format!("{}: {e}", root.display())))?;
        Ok(RunStore { root })
    }

    /// `CBDEBUG_RUNS_DIR`, or `./runs`.
    pub fn from_env() -> Result<Self> {
        let root = std::env::var_os("CBDEBUG_RUNS_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        Self::open(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn path(&self, id: &str, file: &str) -> PathBuf {
        self.run_dir(id).join(file)
    }

    fn check_id(&self, id: &str) -> Result<()> {
        if !valid_run_id(id) {
            return Err(ServiceError::validation(format!("invalid run id {id:?}")));
        }
        if !self.path(id, RUN_FILE).exists() {
            return Err(ServiceError::NotFound(format!("run {id}")));
        }
        Ok(())
    }

    /// A fresh id of the form `<prefix>-<timestamp>`, suffixed on collision.
    pub fn new_run_id(&self, prefix: &str) -> String {
        let stamp = Utc::now().format("%Y%m%dT%H%M%S%3f");
        let base = format!("{prefix}-{stamp}");
        let mut id = base.clone();
        let mut n = 1;
        while self.run_dir(&id).exists() {
            id = format!("{base}-{n}");
            n += 1;
        }
        id
    }

    /// Creates the run directory and writes the dataset and the record.
    pub fn create(&self, record: &RunRecord, ds: &Dataset) -> Result<()> {
        if !valid_run_id(&record.run_id) {
            return Err(ServiceError::validation(format!("invalid run id {:?}", record.run_id)));
        }
        let dir = self.run_dir(&record.run_id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(ServiceError::Conflict(format!("run {} already exists", record.run_id)));
            }
            Err(e) => return Err(ServiceError::Runtime(format!("{}: {e}", dir.display()))),
        }
        ds.save(dir.join(DATASET_FILE))?;
        record.save(dir.join(RUN_FILE))?;
        Ok(())
    }

    pub fn save(&self, record: &RunRecord) -> Result<()> {
        record.save(self.path(&record.run_id, RUN_FILE))?;
        Ok(())
    }

    /// Reads a record, first marking an in-flight run whose job process is
    /// gone as failed. An unreadable `run.json` yields a failed placeholder record; the file
    /// itself is left alone and mutations on the run keep failing.
    pub fn load(&self, id: &str) -> Result<RunRecord> {
        self.check_id(id)?;
        let mut record = match RunRecord::load(self.path(id, RUN_FILE)) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("run {id}: {e}");
                return Ok(corrupt_record(id, &self.run_dir(id), &e.into()));
            }
        };
        if record.status.in_flight() && !self.lock_held(id) {
            if let Ok(_lock) = self.try_lock(id) {
                // Re-read under the lock in case the job finished meanwhile.
                record = RunRecord::load(self.path(id, RUN_FILE))?;
                if record.status.in_flight() {
                    log::warn!("run {id}: job process is gone, marking failed");
                    self.mark_interrupted(&mut record)?;
                }
            }
        }
        Ok(record)
    }

    /// Every run, oldest first. Unreadable run directories are reported as
    /// failed records rather than aborting the listing.
    pub fn list(&self) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|e| ServiceError::Runtime(format!("{}: {e}", self.root.display())))?;
        for entry in entries.flatten() {
            let Ok(name) = entry.file_name().into_string() else { continue };
            if !valid_run_id(&name) || !entry.path().is_dir() {
                continue;
            }
            match self.load(&name) {
                Ok(r) => out.push(r),
                Err(ServiceError::NotFound(_)) => {}
                Err(e) => out.push(corrupt_record(&name, &entry.path(), &e)),
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.run_id.cmp(&b.run_id)));
        Ok(out)
    }

    fn lock_held(&self, id: &str) -> bool {
        fs::read_to_string(self.path(id, LOCK_FILE)).is_ok_and(|t| holder_alive(&t))
    }

    fn try_lock(&self, id: &str) -> Result<JobLock> {
        let path = self.path(id, LOCK_FILE);
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(own_token().as_bytes())
                        .map_err(|e| ServiceError::Runtime(format!("{}: {e}", path.display())))?;
                    return Ok(JobLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    if holder_alive(&holder) {
                        return Err(ServiceError::Conflict(format!("a job is already running on run {id}")));
                    }
                    // Stale lock from a dead process.
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(ServiceError::Runtime(format!("{}: {e}", path.display()))),
            }
        }
        Err(ServiceError::Conflict(format!("could not lock run {id}")))
    }

    /// Takes the run's job lock and returns the (recovered) record with it.
    pub fn lock(&self, id: &str) -> Result<(JobLock, RunRecord)> {
        self.check_id(id)?;
        let lock = self.try_lock(id)?;
        let mut record = RunRecord::load(self.path(id, RUN_FILE))?;
        if record.status.in_flight() {
            // We hold the lock, so nobody is working on it any more.
            self.mark_interrupted(&mut record)?;
        }
        Ok((lock, record))
    }

    /// Fails a run whose job died, dropping any temp files it left behind.
    fn mark_interrupted(&self, record: &mut RunRecord) -> Result<()> {
        if let Ok(entries) = fs::read_dir(self.run_dir(&record.run_id)) {
            for e in entries.flatten() {
                let name = e.file_name();
                let name = name.to_string_lossy();
                if name.starts_with('.') && name.contains(".tmp-") {
                    let _ = fs::remove_file(e.path());
                }
            }
        }
        record.status = RunStatus::Failed;
        record.message = format!("{} job interrupted before it finished", record.message_stage());
        record.job_pid = None;
        record.progress = 0.0;
        record.updated_at = Utc::now();
        self.save(record)
    }

    pub fn dataset(&self, id: &str) -> Result<Dataset> {
        Ok(Dataset::load(self.path(id, DATASET_FILE))?)
    }

    pub fn model_before(&self, id: &str) -> Result<ConceptBottleneck> {
        let p = self.path(id, MODEL_BEFORE_FILE);
        if !p.exists() {
            return Err(ServiceError::validation(format!("run {id} has no trained model")));
        }
        Ok(ConceptBottleneck::load(p)?)
    }

    pub fn model_after(&self, id: &str) -> Result<Option<ConceptBottleneck>> {
        let p = self.path(id, MODEL_AFTER_FILE);
        Ok(if p.exists() { Some(ConceptBottleneck::load(p)?) } else { None })
    }

    pub fn feedback(&self, id: &str) -> Result<Option<FeedbackSet>> {
        let p = self.path(id, FEEDBACK_FILE);
        Ok(if p.exists() { Some(FeedbackSet::load(p)?) } else { None })
    }

    pub fn weights(&self, id: &str) -> Result<Option<SampleWeights>> {
        let p = self.path(id, WEIGHTS_FILE);
        Ok(if p.exists() { Some(SampleWeights::load(p)?) } else { None })
    }
}

impl RunRecord {
    fn message_stage(&self) -> &'static str {
        match self.status {
            RunStatus::Training => "training",
            _ => "retraining",
        }
    }
}

/// Timestamps come from the directory's modification time so the placeholder
/// sorts near where the run was made.
fn corrupt_record(id: &str, dir: &Path, e: &ServiceError) -> RunRecord {
    let mut r = RunRecord::new(id.to_string(), None, DatasetConfig::waterbirds(0));
    r.status = RunStatus::Failed;
    r.message = format!("corrupt run directory: {e}");
    if let Ok(t) = fs::metadata(dir).and_then(|m| m.modified()) {
        r.created_at = DateTime::<Utc>::from(t);
    }
    r.updated_at = r.created_at;
    r
}
