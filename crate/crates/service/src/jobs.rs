//! Operations on a run, shared by the CLI and the HTTP API.
//!
//! Mutations take the run's job lock first; a second mutation on the same
//! run gets [`ServiceError::Conflict`] until the first finishes. Long jobs are
//! split into a `prepare_*` step (validation, lock, status change) and a
//! `run` step, so the API can answer before the work is done.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use cbdebug_core::cbm::{explain_concept, train_with_hook, ConceptBottleneck, Exemplar, TrainConfig};
use cbdebug_core::eval::{
    comparison_csv, comparison_text, concept_report, dependence_report, evaluate, ComparisonRow, RunMetrics,
};
use cbdebug_core::feedback::{
    llm_oracle, rule_oracle, task_description, AuxLabels, FeedbackSet, FeedbackSource, LlmEndpoint,
};
use cbdebug_core::io::Artifact;
use cbdebug_core::permweight::{Histogram, SampleWeights};
use cbdebug_core::retrain::{
    run_strategy, RunArtifacts, StrategyConfig, AUX_FILE, FEEDBACK_FILE, MODEL_AFTER_FILE, MODEL_BEFORE_FILE,
    WEIGHTS_FILE,
};
use cbdebug_core::synthdata::{generate_dataset, Dataset, DatasetConfig, Split};
use cbdebug_core::Error as CoreError;

use crate::error::{Result, ServiceError};
use crate::record::{RunRecord, RunStatus};
use crate::store::{JobLock, RunStore, DATASET_FILE, METRICS_FILE};

/// Exemplars shown per concept.
pub const DEFAULT_EXEMPLARS: usize = 10;
/// Length of the before/after top-concept lists.
pub const REPORT_TOP_N: usize = 5;
/// Threshold of the rule oracle when none is given.
pub const DEFAULT_RULE_THRESHOLD: f64 = 0.5;

const PROGRESS_INTERVAL: Duration = Duration::from_millis(200);

/// Unknown concept ids become a validation error naming the id.
fn concept_error(e: CoreError) -> ServiceError {
    match e {
        CoreError::UnknownConcept(id) => ServiceError::Validation {
            message: format!("unknown concept id {id}"),
            concept_id: Some(id),
        },
        e => e.into(),
    }
}

/// Generates the dataset and registers an idle run.
pub fn create_run(
    store: &RunStore,
    run_id: Option<String>,
    preset: Option<&str>,
    config: Option<DatasetConfig>,
    seed: u64,
) -> Result<RunRecord> {
    let (cfg, preset) = match (preset, config) {
        (Some(_), Some(_)) => {
            return Err(ServiceError::validation("give either a preset or a dataset config, not both"));
        }
        (Some(name), None) => {
            let cfg = DatasetConfig::preset(name, seed)
                .ok_or_else(|| ServiceError::validation(format!("unknown preset {name:?}")))?;
            (cfg, Some(name.to_string()))
        }
        (None, Some(cfg)) => (cfg, None),
        (None, None) => (DatasetConfig::waterbirds(seed), Some("waterbirds".to_string())),
    };
    cfg.validate()?;
    let run_id = match run_id {
        Some(id) => id,
        None => store.new_run_id(preset.as_deref().unwrap_or("run")),
    };
    let ds = generate_dataset(&cfg)?;
    let mut record = RunRecord::new(run_id, preset, cfg);
    record.artifacts.dataset = Some(DATASET_FILE.into());
    record.message = "dataset generated".into();
    store.create(&record, &ds)?;
    log::info!("run {}: created", record.run_id);
    Ok(record)
}

/// Saves the record at most every [`PROGRESS_INTERVAL`], always on the last call.
struct ProgressSaver<'a> {
    store: &'a RunStore,
    record: RunRecord,
    last: Instant,
}

impl ProgressSaver<'_> {
    fn update(&mut self, fraction: f64, message: &str, force: bool) {
        self.record.progress = fraction.clamp(0.0, 0.999);
        self.record.message = message.to_string();
        if force || self.last.elapsed() >= PROGRESS_INTERVAL {
            self.record.updated_at = chrono::Utc::now();
            if let Err(e) = self.store.save(&self.record) {
                log::warn!("run {}: could not save progress: {e}", self.record.run_id);
            }
            self.last = Instant::now();
        }
    }
}

/// A locked run in `training`, ready to train.
pub struct TrainJob {
    _lock: JobLock,
    record: RunRecord,
    dataset: Dataset,
    config: TrainConfig,
}

pub fn prepare_train(store: &RunStore, id: &str, config: TrainConfig) -> Result<TrainJob> {
    config.validate()?;
    let (lock, mut record) = store.lock(id)?;
    let dataset = store.dataset(id)?;
    record.transition(RunStatus::Training, "training")?;
    record.job_pid = Some(std::process::id());
    // A retried training replaces everything downstream of the dataset.
    for f in [MODEL_BEFORE_FILE, MODEL_AFTER_FILE, METRICS_FILE] {
        let _ = std::fs::remove_file(store.path(id, f));
    }
    record.artifacts.model_before = None;
    record.artifacts.model_after = None;
    record.artifacts.metrics = None;
    store.save(&record)?;
    Ok(TrainJob {
        _lock: lock,
        record,
        dataset,
        config,
    })
}

impl TrainJob {
    pub fn run_id(&self) -> &str {
        &self.record.run_id
    }

    /// Trains, saves `model_before.json`, and marks the run done (or failed).
    pub fn run(self, store: &RunStore) -> Result<RunRecord> {
        let TrainJob {
            _lock,
            record,
            dataset,
            config,
        } = self;
        let id = record.run_id.clone();
        let epochs = config.epochs.max(1) as f64;
        let mut saver = ProgressSaver {
            store,
            record,
            last: Instant::now(),
        };
        let result = {
            let mut hook = |epoch: usize, loss: f64| {
                saver.update((epoch + 1) as f64 / epochs, &format!("training: epoch {} loss {loss:.4}", epoch + 1), false);
            };
            train_with_hook(&dataset, None, &config, Some(&mut hook)).and_then(|mut model| {
                model.parent_run = Some(id.clone());
                model.save(store.path(&id, MODEL_BEFORE_FILE))?;
                Ok(model)
            })
        };
        let mut record = saver.record;
        match result {
            Ok(model) => {
                let m = evaluate(&model, &dataset, Split::Test)?;
                record.artifacts.model_before = Some(MODEL_BEFORE_FILE.into());
                record.transition(
                    RunStatus::Done,
                    format!(
                        "trained: test average {:.4}, worst group {:.4}",
                        m.sample_average, m.worst_group
                    ),
                )?;
                store.save(&record)?;
                log::info!("run {id}: trained");
                Ok(record)
            }
            Err(e) => {
                record.transition(RunStatus::Failed, format!("training failed: {e}"))?;
                store.save(&record)?;
                Err(e.into())
            }
        }
    }
}

pub fn train_run(store: &RunStore, id: &str, config: TrainConfig) -> Result<RunRecord> {
    prepare_train(store, id, config)?.run(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    #[default]
    Before,
    After,
}

/// One concept as shown to a reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptView {
    pub concept_id: usize,
    pub name: String,
    /// Head weight per class.
    pub head_weights: Vec<f64>,
    pub segments: Vec<usize>,
    pub top_exemplars: Vec<Exemplar>,
    pub active: bool,
}

pub fn load_model(store: &RunStore, id: &str, which: ModelChoice) -> Result<ConceptBottleneck> {
    match which {
        ModelChoice::Before => store.model_before(id),
        ModelChoice::After => store
            .model_after(id)?
            .ok_or_else(|| ServiceError::validation(format!("run {id} has no retrained model"))),
    }
}

pub fn concept_views(store: &RunStore, id: &str, which: ModelChoice, k: usize) -> Result<Vec<ConceptView>> {
    store.load(id)?;
    let model = load_model(store, id, which)?;
    let ds = store.dataset(id)?;
    (0..model.n_concepts())
        .map(|c| {
            let expl = explain_concept(&model, &ds, c, k)?;
            Ok(ConceptView {
                concept_id: c,
                name: display_name(&model, c),
                head_weights: model.head_weights.column(c).to_vec(),
                segments: model.concept_meta[c].segments.clone(),
                top_exemplars: expl.top_exemplars,
                active: model.active_mask[c],
            })
        })
        .collect()
}

fn display_name(model: &ConceptBottleneck, c: usize) -> String {
    model.concept_meta[c].name.clone().unwrap_or_else(|| format!("concept {c}"))
}

/// Body of a feedback submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    #[serde(default)]
    pub c_spur: Vec<usize>,
    #[serde(default = "human")]
    pub source: FeedbackSource,
    /// Rule oracle threshold on the background attribution share.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Built-in task description for the LLM oracle; the run's preset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

fn human() -> FeedbackSource {
    FeedbackSource::Human
}

impl FeedbackRequest {
    pub fn human(c_spur: Vec<usize>) -> Self {
        FeedbackRequest {
            c_spur,
            source: FeedbackSource::Human,
            threshold: None,
            task: None,
        }
    }

    pub fn oracle(source: FeedbackSource) -> Self {
        FeedbackRequest {
            c_spur: Vec::new(),
            source,
            threshold: None,
            task: None,
        }
    }
}

/// Builds the feedback set for `req` against the run's original model and
/// stores it as `feedback.json`.
pub fn record_feedback(store: &RunStore, id: &str, req: &FeedbackRequest) -> Result<FeedbackSet> {
    let (_lock, mut record) = store.lock(id)?;
    let model = store.model_before(id)?;
    let fb = match req.source {
        FeedbackSource::Human => {
            FeedbackSet::from_selection(&model, req.c_spur.iter().copied(), FeedbackSource::Human)
                .map_err(concept_error)?
        }
        FeedbackSource::RuleOracle => {
            if !req.c_spur.is_empty() {
                return Err(ServiceError::validation("c_spur must be empty for an oracle source"));
            }
            let ds = store.dataset(id)?;
            let expl = cbdebug_core::cbm::explain_all(&model, &ds, DEFAULT_EXEMPLARS)?;
            rule_oracle(&model, &ds, &expl, req.threshold.unwrap_or(DEFAULT_RULE_THRESHOLD))?
        }
        FeedbackSource::LlmOracle => {
            if !req.c_spur.is_empty() {
                return Err(ServiceError::validation("c_spur must be empty for an oracle source"));
            }
            let task = req
                .task
                .clone()
                .or_else(|| record.preset.clone())
                .unwrap_or_else(|| "waterbirds".into());
            let description = task_description(&task)
                .ok_or_else(|| ServiceError::validation(format!("no task description for {task:?}")))?;
            let endpoint = LlmEndpoint::from_env()?;
            let concepts: Vec<(usize, String)> = (0..model.n_concepts())
                .filter(|&c| model.active_mask[c])
                .map(|c| (c, display_name(&model, c)))
                .collect();
            llm_oracle(&concepts, description, &endpoint)?
        }
    };
    fb.save(store.path(id, FEEDBACK_FILE))?;
    record.artifacts.feedback = Some(FEEDBACK_FILE.into());
    record.message = format!("feedback recorded: {} concept(s) marked spurious", fb.c_spur.len());
    record.updated_at = chrono::Utc::now();
    store.save(&record)?;
    Ok(fb)
}

/// A locked run in `retraining`, ready to run its strategy.
pub struct RetrainJob {
    _lock: JobLock,
    record: RunRecord,
    dataset: Dataset,
    model: ConceptBottleneck,
    feedback: Option<FeedbackSet>,
    config: StrategyConfig,
}

pub fn prepare_retrain(store: &RunStore, id: &str, config: StrategyConfig) -> Result<RetrainJob> {
    config.validate()?;
    let (lock, mut record) = store.lock(id)?;
    if !matches!(record.status, RunStatus::Done | RunStatus::Failed) {
        return Err(ServiceError::Conflict(format!(
            "run {id} is {}; train it before retraining",
            record.status
        )));
    }
    let model = store.model_before(id)?;
    let feedback = if config.strategy.uses_feedback() {
        let fb = store
            .feedback(id)?
            .ok_or_else(|| ServiceError::validation("no feedback recorded"))?;
        fb.validate_against(&model).map_err(concept_error)?;
        if fb.c_spur.is_empty() {
            return Err(ServiceError::validation("feedback marks no concept as spurious"));
        }
        Some(fb)
    } else {
        None
    };
    let dataset = store.dataset(id)?;
    record.transition(RunStatus::Retraining, format!("retraining with {}", config.strategy))?;
    record.job_pid = Some(std::process::id());
    record.strategy = Some(config.clone());
    // The previous after-model must not outlive a failed retrain.
    for f in [MODEL_AFTER_FILE, METRICS_FILE] {
        let _ = std::fs::remove_file(store.path(id, f));
    }
    record.artifacts.model_after = None;
    record.artifacts.metrics = None;
    store.save(&record)?;
    Ok(RetrainJob {
        _lock: lock,
        record,
        dataset,
        model,
        feedback,
        config,
    })
}

impl RetrainJob {
    pub fn run_id(&self) -> &str {
        &self.record.run_id
    }

    pub fn run(self, store: &RunStore) -> Result<RunRecord> {
        let RetrainJob {
            _lock,
            record,
            dataset,
            model,
            feedback,
            config,
        } = self;
        let id = record.run_id.clone();
        let mut saver = ProgressSaver {
            store,
            record,
            last: Instant::now(),
        };
        let result = {
            let mut progress = |f: f64, msg: &str| saver.update(f, msg, false);
            run_strategy(&model, &dataset, feedback.as_ref(), &config, Some(&mut progress))
        }
        .map_err(ServiceError::from)
        .and_then(|(_, arts)| {
            arts.save(&store.run_dir(&id))?;
            let metrics = build_metrics(&dataset, &arts.model_before, Some(&arts.model_after), arts.aux.as_ref(), arts.weights.as_ref())?;
            metrics.save(store.path(&id, METRICS_FILE))?;
            Ok((arts, metrics))
        });
        let mut record = saver.record;
        match result {
            Ok((arts, metrics)) => {
                set_artifact_refs(&mut record, &arts);
                record.artifacts.metrics = Some(METRICS_FILE.into());
                let after = metrics.after.as_ref().expect("after metrics present");
                record.transition(
                    RunStatus::Done,
                    format!(
                        "{} done: worst group {:.4} -> {:.4}, average {:.4} -> {:.4}",
                        config.strategy,
                        metrics.before.worst_group,
                        after.worst_group,
                        metrics.before.sample_average,
                        after.sample_average
                    ),
                )?;
                store.save(&record)?;
                log::info!("run {id}: {}", record.message);
                Ok(record)
            }
            Err(e) => {
                record.transition(RunStatus::Failed, format!("retrain failed: {e}"))?;
                store.save(&record)?;
                Err(e)
            }
        }
    }
}

fn set_artifact_refs(record: &mut RunRecord, arts: &RunArtifacts) {
    record.artifacts.model_before = Some(MODEL_BEFORE_FILE.into());
    record.artifacts.model_after = Some(MODEL_AFTER_FILE.into());
    record.artifacts.weights = arts.weights.as_ref().map(|_| WEIGHTS_FILE.into());
    if arts.feedback.is_some() {
        record.artifacts.feedback = Some(FEEDBACK_FILE.into());
    }
}

pub fn retrain_run(store: &RunStore, id: &str, config: StrategyConfig) -> Result<RunRecord> {
    prepare_retrain(store, id, config)?.run(store)
}

/// Test-split metrics for `before` (and `after`), the top-concept comparison,
/// and the dependence report when weights were learned.
pub fn build_metrics(
    ds: &Dataset,
    before: &ConceptBottleneck,
    after: Option<&ConceptBottleneck>,
    aux: Option<&AuxLabels>,
    weights: Option<&SampleWeights>,
) -> Result<RunMetrics> {
    let dependence = match (aux, weights) {
        (Some(aux), Some(w)) if w.len() == aux.n_samples() => {
            let y = ds.labels_at(&aux.sample_order);
            Some(dependence_report(aux, &y, ds.n_classes(), Some(w))?)
        }
        _ => None,
    };
    Ok(RunMetrics {
        split: Split::Test,
        before: evaluate(before, ds, Split::Test)?,
        after: after.map(|m| evaluate(m, ds, Split::Test)).transpose()?,
        concept_report: after.map(|m| concept_report(before, m, REPORT_TOP_N)).transpose()?,
        dependence,
    })
}

/// Metrics computed from the models on disk, without writing anything.
pub fn current_metrics(store: &RunStore, id: &str) -> Result<RunMetrics> {
    store.load(id)?;
    let ds = store.dataset(id)?;
    let before = store.model_before(id)?;
    let after = store.model_after(id)?;
    let weights = store.weights(id)?;
    let aux_path = store.path(id, AUX_FILE);
    let aux = if weights.is_some() && aux_path.exists() {
        Some(AuxLabels::load(aux_path)?)
    } else {
        None
    };
    build_metrics(&ds, &before, after.as_ref(), aux.as_ref(), weights.as_ref())
}

/// Writes `metrics.json` for the run's current models.
pub fn evaluate_run(store: &RunStore, id: &str) -> Result<RunMetrics> {
    let (_lock, mut record) = store.lock(id)?;
    let metrics = current_metrics(store, id)?;
    metrics.save(store.path(id, METRICS_FILE))?;
    record.artifacts.metrics = Some(METRICS_FILE.into());
    record.updated_at = chrono::Utc::now();
    store.save(&record)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub status: RunStatus,
    pub progress: f64,
    pub message: String,
}

pub fn status(store: &RunStore, id: &str) -> Result<StatusView> {
    let r = store.load(id)?;
    Ok(StatusView {
        status: r.status,
        progress: r.progress,
        message: r.message,
    })
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn weights_histogram(store: &RunStore, id: &str, bins: usize) -> Result<Histogram> {
    store.load(id)?;
    let w = store
        .weights(id)?
        .ok_or_else(|| ServiceError::NotFound(format!("run {id} has no sample weights")))?;
    Ok(Histogram::auto(&w.u, bins))
}

/// One row per run, from its stored metrics: the retrained model when there
/// is one, the original otherwise.
pub fn comparison_rows(store: &RunStore, ids: &[String]) -> Result<Vec<ComparisonRow>> {
    ids.iter()
        .map(|id| {
            let record = store.load(id)?;
            let path = store.path(id, METRICS_FILE);
            if !path.exists() {
                return Err(ServiceError::validation(format!("run {id} has no metrics; run eval first")));
            }
            let m = RunMetrics::load(path)?;
            let (gm, strategy) = match (&m.after, &record.strategy) {
                (Some(after), Some(cfg)) => (after, cfg.strategy.to_string()),
                (Some(after), None) => (after, "retrained".to_string()),
                (None, _) => (&m.before, "original".to_string()),
            };
            Ok(ComparisonRow {
                run: id.clone(),
                strategy,
                sample_average: gm.sample_average,
                group_mean: gm.group_mean,
                worst_group: gm.worst_group,
            })
        })
        .collect()
}

pub fn compare(store: &RunStore, ids: &[String], csv: bool) -> Result<String> {
    let rows = comparison_rows(store, ids)?;
    Ok(if csv { comparison_csv(&rows) } else { comparison_text(&rows) })
}
