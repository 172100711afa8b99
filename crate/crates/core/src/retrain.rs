//! Retraining strategies behind one entry point.
//!
//! The feedback-driven strategies start from the trained bottleneck and the
//! expert's marked concepts. JTT and LfF are unsupervised comparators: they
//! never see feedback and train new models from scratch.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_plan, AugmentConfig, AugmentationPlan};
use crate::cbm::{
    apply_gradients, end_epoch, explain_concept, fit, loss_and_gradient, predict,
    pretrain_concepts, remove_concepts, ConceptBottleneck, ConceptExplanation, ForgetTerm,
    LossKind, Objective, TrainConfig,
};
use crate::error::{Error, Result};
use crate::feedback::{label_aux, AuxLabels, FeedbackSet};
use crate::io::{write_bytes_atomic, write_json_atomic, Artifact};
use crate::permweight::{compute_weights, PermWeightConfig, SampleWeights};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Remove,
    Retrain,
    Protopdebug,
    ReweightOnly,
    AugmentOnly,
    Cbdebug,
    Jtt,
    Lff,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Remove,
        Strategy::Retrain,
        Strategy::Protopdebug,
        Strategy::ReweightOnly,
        Strategy::AugmentOnly,
        Strategy::Cbdebug,
        Strategy::Jtt,
        Strategy::Lff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Remove => "remove",
            Strategy::Retrain => "retrain",
            Strategy::Protopdebug => "protopdebug",
            Strategy::ReweightOnly => "reweight_only",
            Strategy::AugmentOnly => "augment_only",
            Strategy::Cbdebug => "cbdebug",
            Strategy::Jtt => "jtt",
            Strategy::Lff => "lff",
        }
    }

    /// JTT and LfF work without expert feedback.
    pub fn uses_feedback(self) -> bool {
        !matches!(self, Strategy::Jtt | Strategy::Lff)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoPDebugConfig {
    pub lambda_forget: f64,
    /// Exemplars per marked concept in the forget set.
    pub forget_per_concept: usize,
}

impl Default for ProtoPDebugConfig {
    fn default() -> Self {
        ProtoPDebugConfig {
            lambda_forget: 1.0,
            forget_per_concept: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JttConfig {
    /// Epochs of the identification model.
    pub t: usize,
    pub lambda_up: f64,
}

impl Default for JttConfig {
    fn default() -> Self {
        JttConfig {
            t: 10,
            lambda_up: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LffConfig {
    pub q: f64,
    /// Smoothing of the per-sample loss averages.
    pub ema: f64,
}

impl Default for LffConfig {
    fn default() -> Self {
        LffConfig { q: 0.9, ema: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Fine-tuning epochs; half of the original run when absent.
    #[serde(default)]
    pub retrain_epochs: Option<usize>,
    /// Divides the original extractor learning rate while fine-tuning.
    #[serde(default = "default_lr_divisor")]
    pub extractor_lr_divisor: f64,
    #[serde(default)]
    pub permweight: PermWeightConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protopdebug: Option<ProtoPDebugConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jtt: Option<JttConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lff: Option<LffConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr_divisor() -> f64 {
    50.0
}

impl StrategyConfig {
    /// Defaults for `strategy`, with its own block filled in.
    pub fn new(strategy: Strategy) -> Self {
        StrategyConfig {
            strategy,
            retrain_epochs: None,
            extractor_lr_divisor: default_lr_divisor(),
            permweight: PermWeightConfig::default(),
            augment: AugmentConfig::default(),
            protopdebug: (strategy == Strategy::Protopdebug).then(ProtoPDebugConfig::default),
            jtt: (strategy == Strategy::Jtt).then(JttConfig::default),
            lff: (strategy == Strategy::Lff).then(LffConfig::default),
            seed: 0,
        }
    }

    fn mismatch(&self, reason: impl Into<String>) -> Error {
        Error::Strategy {
            strategy: self.strategy.to_string(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrain_epochs == Some(0) {
            return Err(Error::config("retrain_epochs", "must be at least 1"));
        }
        if !(self.extractor_lr_divisor > 0.0 && self.extractor_lr_divisor.is_finite()) {
            return Err(Error::config("extractor_lr_divisor", "must be > 0"));
        }
        match self.strategy {
            Strategy::Protopdebug => {
                let p = self
                    .protopdebug
                    .as_ref()
                    .ok_or_else(|| self.mismatch("missing protopdebug block"))?;
                if !(p.lambda_forget >= 0.0 && p.lambda_forget.is_finite()) {
                    return Err(Error::config("protopdebug.lambda_forget", "must be >= 0"));
                }
                if p.forget_per_concept == 0 {
                    return Err(Error::config(
                        "protopdebug.forget_per_concept",
                        "must be at least 1",
                    ));
                }
            }
            Strategy::Jtt => {
                let j = self
                    .jtt
                    .as_ref()
                    .ok_or_else(|| self.mismatch("missing jtt block"))?;
                if j.t == 0 {
                    return Err(Error::config("jtt.t", "must be at least 1"));
                }
                if !(j.lambda_up >= 1.0 && j.lambda_up.is_finite()) {
                    return Err(Error::config("jtt.lambda_up", "must be >= 1"));
                }
            }
            Strategy::Lff => {
                let l = self
                    .lff
                    .as_ref()
                    .ok_or_else(|| self.mismatch("missing lff block"))?;
                if !(l.q > 0.0 && l.q < 1.0) {
                    return Err(Error::config("lff.q", "must lie strictly between 0 and 1"));
                }
                if !(0.0..1.0).contains(&l.ema) {
                    return Err(Error::config("lff.ema", "must lie in [0, 1)"));
                }
            }
            _ => {}
        }
        if matches!(
            self.strategy,
            Strategy::ReweightOnly | Strategy::AugmentOnly | Strategy::Cbdebug
        ) {
            self.permweight.validate()?;
        }
        if matches!(self.strategy, Strategy::AugmentOnly | Strategy::Cbdebug) {
            self.augment.validate()?;
        }
        Ok(())
    }
}

/// Everything one strategy run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub config: StrategyConfig,
    pub model_before: ConceptBottleneck,
    pub model_after: ConceptBottleneck,
    pub feedback: Option<FeedbackSet>,
    pub aux: Option<AuxLabels>,
    pub weights: Option<SampleWeights>,
    pub plan: Option<AugmentationPlan>,
    /// ProtoPDebug forget set (sample ids) or JTT error set.
    pub sample_set: Option<SampleSet>,
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSetKind {
    Forget,
    JttErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub kind: SampleSetKind,
    pub sample_ids: Vec<usize>,
}

impl Artifact for SampleSet {
    const VERSION: &'static str = "cbdebug-set-1";
}

pub const MODEL_BEFORE_FILE: &str = "model_before.json";
pub const MODEL_AFTER_FILE: &str = "model_after.json";
pub const FEEDBACK_FILE: &str = "feedback.json";
pub const AUX_FILE: &str = "aux.json";
pub const WEIGHTS_FILE: &str = "weights.json";
pub const PLAN_FILE: &str = "plan.json";
pub const SAMPLE_SET_FILE: &str = "sample_set.json";
pub const STRATEGY_FILE: &str = "strategy.json";
pub const LOG_FILE: &str = "log.txt";

impl RunArtifacts {
    /// Writes every artifact into `dir`. `model_after.json` goes last so a
    /// present after-model implies a complete run.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_json_atomic(dir.join(STRATEGY_FILE), &self.config)?;
        self.model_before.save(dir.join(MODEL_BEFORE_FILE))?;
        // Stale intermediates from an earlier strategy would be misleading.
        for (present, name) in [
            (self.feedback.is_some(), FEEDBACK_FILE),
            (self.aux.is_some(), AUX_FILE),
            (self.weights.is_some(), WEIGHTS_FILE),
            (self.plan.is_some(), PLAN_FILE),
            (self.sample_set.is_some(), SAMPLE_SET_FILE),
        ] {
            if !present && name != FEEDBACK_FILE {
                let _ = std::fs::remove_file(dir.join(name));
            }
        }
        if let Some(fb) = &self.feedback {
            fb.save(dir.join(FEEDBACK_FILE))?;
        }
        if let Some(aux) = &self.aux {
            aux.save(dir.join(AUX_FILE))?;
        }
        if let Some(w) = &self.weights {
            w.save(dir.join(WEIGHTS_FILE))?;
        }
        if let Some(plan) = &self.plan {
            plan.save(dir.join(PLAN_FILE))?;
        }
        if let Some(set) = &self.sample_set {
            set.save(dir.join(SAMPLE_SET_FILE))?;
        }
        let mut log = self.log.join("\n");
        log.push('\n');
        write_bytes_atomic(&dir.join(LOG_FILE), log.as_bytes())?;
        self.model_after.save(dir.join(MODEL_AFTER_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let strategy_path = dir.join(STRATEGY_FILE);
        let text = std::fs::read_to_string(&strategy_path).map_err(|source| Error::Io {
            path: strategy_path.clone(),
            source,
        })?;
        let config: StrategyConfig = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: strategy_path,
            message: e.to_string(),
        })?;
        let feedback = match opt(FEEDBACK_FILE) {
            Some(p) if config.strategy.uses_feedback() => Some(FeedbackSet::load(p)?),
            _ => None,
        };
        let log_path = dir.join(LOG_FILE);
        let log = std::fs::read_to_string(&log_path)
            .map(|s| s.lines().map(str::to_string).collect())
            .unwrap_or_default();
        Ok(RunArtifacts {
            model_before: ConceptBottleneck::load(dir.join(MODEL_BEFORE_FILE))?,
            model_after: ConceptBottleneck::load(dir.join(MODEL_AFTER_FILE))?,
            feedback,
            aux: opt(AUX_FILE).map(AuxLabels::load).transpose()?,
            weights: opt(WEIGHTS_FILE).map(SampleWeights::load).transpose()?,
            plan: opt(PLAN_FILE).map(AugmentationPlan::load).transpose()?,
            sample_set: opt(SAMPLE_SET_FILE).map(SampleSet::load).transpose()?,
            config,
            log,
        })
    }
}

/// Progress callback: `(fraction in [0, 1], message)`.
pub type Progress<'a> = dyn FnMut(f64, &str) + 'a;

struct Reporter<'a, 'b> {
    sink: Option<&'a mut Progress<'b>>,
    log: Vec<String>,
}

impl Reporter<'_, '_> {
    fn say(&mut self, fraction: f64, msg: impl Into<String>) {
        let msg = msg.into();
        log::info!("{msg}");
        if let Some(sink) = self.sink.as_deref_mut() {
            sink(fraction.clamp(0.0, 1.0), &msg);
        }
        self.log.push(msg);
    }
}

/// Settings for fine-tuning from `original`: half its epochs (unless
/// overridden) and a reduced extractor learning rate.
pub fn finetune_config(original: &TrainConfig, cfg: &StrategyConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.retrain_epochs.unwrap_or((original.epochs / 2).max(1)),
        lr_extractor: original.lr_extractor / cfg.extractor_lr_divisor,
        seed: original.seed ^ cfg.seed.wrapping_add(0x5EED),
        ..original.clone()
    }
}

fn original_config(model: &ConceptBottleneck) -> Result<TrainConfig> {
    model
        .train_config
        .clone()
        .ok_or_else(|| Error::config("model", "model has no recorded training configuration"))
}

fn explanations_for(
    model: &ConceptBottleneck,
    ds: &Dataset,
    fb: &FeedbackSet,
    k: usize,
) -> Result<Vec<ConceptExplanation>> {
    fb.c_spur
        .iter()
        .map(|&c| explain_concept(model, ds, c, k))
        .collect()
}

/// Runs one strategy. The input model is never modified.
pub fn run_strategy(
    model: &ConceptBottleneck,
    ds: &Dataset,
    fb: Option<&FeedbackSet>,
    cfg: &StrategyConfig,
    progress: Option<&mut Progress<'_>>,
) -> Result<(ConceptBottleneck, RunArtifacts)> {
    cfg.validate()?;
    let strategy = cfg.strategy;
    let fb = match (strategy.uses_feedback(), fb) {
        (true, Some(fb)) => {
            fb.validate_against(model)?;
            Some(fb)
        }
        (true, None) => return Err(Error::EmptyFeedback),
        (false, Some(_)) => {
            return Err(cfg.mismatch("unsupervised strategy does not accept feedback"));
        }
        (false, None) => None,
    };
    if strategy.uses_feedback() && fb.is_some_and(|f| f.c_spur.is_empty()) {
        return Err(Error::EmptyFeedback);
    }
    let original = original_config(model)?;
    let tune = finetune_config(&original, cfg);
    let mut rep = Reporter {
        sink: progress,
        log: Vec::new(),
    };
    rep.say(0.0, format!("strategy {strategy}"));

    let train_idx = ds.train_indices();
    let y_train = ds.labels_at(&train_idx);
    let mut arts = RunArtifacts {
        config: cfg.clone(),
        model_before: model.clone(),
        model_after: model.clone(),
        feedback: fb.cloned(),
        aux: None,
        weights: None,
        plan: None,
        sample_set: None,
        log: Vec::new(),
    };

    let after = match strategy {
        Strategy::Remove => {
            let fb = fb.expect("checked above");
            remove_concepts(model, fb.c_spur.iter().copied())?
        }
        Strategy::Retrain => {
            let fb = fb.expect("checked above");
            let mut m = remove_concepts(model, fb.c_spur.iter().copied())?;
            finetune(
                &mut m,
                ds,
                None,
                &tune,
                Objective::cross_entropy(tune.lambda_sparse),
                &mut rep,
                0.0,
            )?;
            m
        }
        Strategy::Protopdebug => {
            let fb = fb.expect("checked above");
            let p = cfg.protopdebug.as_ref().expect("validated");
            let expl = explanations_for(model, ds, fb, p.forget_per_concept)?;
            let mut forget: Vec<usize> = expl
                .iter()
                .flat_map(|e| e.top_exemplars.iter().map(|x| x.sample_id))
                .collect();
            forget.sort_unstable();
            forget.dedup();
            rep.say(0.05, format!("forget set: {} samples", forget.len()));
            let objective = Objective {
                loss: LossKind::CrossEntropy,
                lambda_sparse: tune.lambda_sparse,
                forget: Some(ForgetTerm {
                    features: ds.rows(&forget),
                    concepts: fb.c_spur.iter().copied().collect(),
                    lambda: p.lambda_forget,
                }),
            };
            arts.sample_set = Some(SampleSet {
                kind: SampleSetKind::Forget,
                sample_ids: forget,
            });
            let mut m = model.clone();
            finetune(&mut m, ds, None, &tune, objective, &mut rep, 0.05)?;
            m
        }
        Strategy::ReweightOnly | Strategy::AugmentOnly | Strategy::Cbdebug => {
            let fb = fb.expect("checked above");
            let aux = label_aux(model, ds, fb)?;
            rep.say(
                0.05,
                format!(
                    "auxiliary labels: {} x {}",
                    aux.n_samples(),
                    aux.n_columns()
                ),
            );
            let weights = compute_weights(&aux, &y_train, ds.n_classes(), &cfg.permweight)?;
            rep.say(
                0.15,
                format!(
                    "weights: min {:.4}, max {:.4}, {} clipped",
                    weights.u.iter().copied().fold(f64::INFINITY, f64::min),
                    weights.u.iter().copied().fold(0.0, f64::max),
                    weights.provenance.clip_events
                ),
            );
            let (train_ds, plan) = if strategy == Strategy::ReweightOnly {
                (None, None)
            } else {
                let expl = explanations_for(model, ds, fb, cfg.augment.exemplar_pool_size)?;
                let (aug, plan) = build_plan(ds, model, &weights, fb, &expl, &cfg.augment)?;
                rep.say(
                    0.2,
                    format!(
                        "augmented {} of {} samples",
                        plan.n_augmented(),
                        plan.p_aug.len()
                    ),
                );
                (Some(aug), Some(plan))
            };
            let use_weights = strategy != Strategy::AugmentOnly;
            let mut m = remove_concepts(model, fb.c_spur.iter().copied())?;
            finetune(
                &mut m,
                train_ds.as_ref().unwrap_or(ds),
                use_weights.then_some(&weights.u[..]),
                &tune,
                Objective::cross_entropy(tune.lambda_sparse),
                &mut rep,
                0.2,
            )?;
            arts.aux = Some(aux);
            arts.weights = Some(weights);
            arts.plan = plan;
            m
        }
        Strategy::Jtt => {
            let j = cfg.jtt.as_ref().expect("validated");
            let (m, errors) = run_jtt(model, ds, &original, j, &mut rep)?;
            arts.sample_set = Some(SampleSet {
                kind: SampleSetKind::JttErrors,
                sample_ids: errors,
            });
            m
        }
        Strategy::Lff => {
            let l = cfg.lff.as_ref().expect("validated");
            run_lff(model, ds, &original, l, &mut rep)?
        }
    };
    rep.say(1.0, "done");
    arts.model_after = after.clone();
    arts.log = rep.log;
    Ok((after, arts))
}

fn finetune(
    model: &mut ConceptBottleneck,
    ds: &Dataset,
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
    objective: Objective,
    rep: &mut Reporter<'_, '_>,
    start: f64,
) -> Result<()> {
    let idx = ds.train_indices();
    let x = ds.rows(&idx);
    let y = ds.labels_at(&idx);
    let epochs = cfg.epochs as f64;
    let mut hook = |epoch: usize, loss: f64| {
        let frac = start + (1.0 - start) * (epoch + 1) as f64 / epochs;
        rep.say(
            frac,
            format!("epoch {}/{} loss {loss:.5}", epoch + 1, cfg.epochs),
        );
    };
    fit(
        model,
        x.view(),
        &y,
        weights,
        cfg,
        &objective,
        Some(&mut hook),
    )
}

/// Untrained copy of `model`'s architecture with pretrained concept units,
/// the state `train` starts its joint fit from.
fn fresh(model: &ConceptBottleneck, ds: &Dataset, cfg: &TrainConfig) -> Result<ConceptBottleneck> {
    let mut m = ConceptBottleneck::init(ds.feature_dim(), ds.n_classes(), ds.segment_dim(), cfg)?;
    let idx = ds.train_indices();
    pretrain_concepts(&mut m, ds.rows(&idx).view(), &ds.labels_at(&idx), None, cfg)?;
    m.concept_meta = model.concept_meta.clone();
    Ok(m)
}

/// Identification model for `t` epochs, then a from-scratch model with its
/// training errors upweighted by `lambda_up`.
fn run_jtt(
    model: &ConceptBottleneck,
    ds: &Dataset,
    original: &TrainConfig,
    j: &JttConfig,
    rep: &mut Reporter<'_, '_>,
) -> Result<(ConceptBottleneck, Vec<usize>)> {
    let idx = ds.train_indices();
    let x = ds.rows(&idx);
    let y = ds.labels_at(&idx);
    let id_cfg = TrainConfig {
        epochs: j.t,
        ..original.clone()
    };
    let mut ident = fresh(model, ds, &id_cfg)?;
    fit(
        &mut ident,
        x.view(),
        &y,
        None,
        &id_cfg,
        &Objective::cross_entropy(id_cfg.lambda_sparse),
        None,
    )?;
    let (preds, _) = predict(&ident, x.view())?;
    let errors: Vec<usize> = (0..idx.len())
        .filter(|&i| preds[i] != y[i])
        .map(|i| idx[i])
        .collect();
    rep.say(
        0.3,
        format!(
            "identification model misclassifies {} samples",
            errors.len()
        ),
    );
    let weights: Vec<f64> = (0..idx.len())
        .map(|i| if preds[i] != y[i] { j.lambda_up } else { 1.0 })
        .collect();
    let mut m = fresh(model, ds, original)?;
    let n_epochs = original.epochs as f64;
    let mut hook = |epoch: usize, loss: f64| {
        rep.say(
            0.3 + 0.7 * (epoch + 1) as f64 / n_epochs,
            format!("epoch {} loss {loss:.5}", epoch + 1),
        );
    };
    fit(
        &mut m,
        x.view(),
        &y,
        Some(&weights),
        original,
        &Objective::cross_entropy(original.lambda_sparse),
        Some(&mut hook),
    )?;
    Ok((m, errors))
}

fn per_sample_ce(
    model: &ConceptBottleneck,
    x: ndarray::ArrayView2<f64>,
    y: &[usize],
) -> Result<Vec<f64>> {
    let (_, probs) = predict(model, x)?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, &c)| -probs[[i, c]].max(f64::MIN_POSITIVE).ln())
        .collect())
}

/// Bias model trained with generalized cross-entropy next to a debiased model
/// whose samples are weighted by relative difficulty
/// `CE_b / (CE_b + CE_d)`. Both losses are smoothed per sample and scaled by
/// their per-class maximum.
fn run_lff(
    model: &ConceptBottleneck,
    ds: &Dataset,
    original: &TrainConfig,
    l: &LffConfig,
    rep: &mut Reporter<'_, '_>,
) -> Result<ConceptBottleneck> {
    let idx = ds.train_indices();
    let x = ds.rows(&idx);
    let y = ds.labels_at(&idx);
    let n = idx.len();
    let n_classes = ds.n_classes();
    let mut biased = fresh(model, ds, original)?;
    let debiased_cfg = TrainConfig {
        seed: original.seed.wrapping_add(1),
        ..original.clone()
    };
    let mut debiased = fresh(model, ds, &debiased_cfg)?;
    let gce = Objective {
        loss: LossKind::GeneralizedCrossEntropy { q: l.q },
        lambda_sparse: original.lambda_sparse,
        forget: None,
    };
    let ce = Objective::cross_entropy(original.lambda_sparse);
    let mut ema_b = vec![0.0; n];
    let mut ema_d = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(original.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..original.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(original.batch_size).enumerate() {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let lb = per_sample_ce(&biased, xb.view(), &yb)?;
            let ld = per_sample_ce(&debiased, xb.view(), &yb)?;
            for (k, &i) in chunk.iter().enumerate() {
                if seen[i] {
                    ema_b[i] = l.ema * ema_b[i] + (1.0 - l.ema) * lb[k];
                    ema_d[i] = l.ema * ema_d[i] + (1.0 - l.ema) * ld[k];
                } else {
                    ema_b[i] = lb[k];
                    ema_d[i] = ld[k];
                    seen[i] = true;
                }
            }
            // Per-class max normalization keeps one class from starving the
            // other when the bias model fits it early.
            let mut max_b = vec![0.0f64; n_classes];
            let mut max_d = vec![0.0f64; n_classes];
            for i in (0..n).filter(|&i| seen[i]) {
                max_b[y[i]] = max_b[y[i]].max(ema_b[i]);
                max_d[y[i]] = max_d[y[i]].max(ema_d[i]);
            }
            let w: Vec<f64> = chunk
                .iter()
                .map(|&i| {
                    let c = y[i];
                    let b = if max_b[c] > 0.0 {
                        ema_b[i] / max_b[c]
                    } else {
                        0.0
                    };
                    let d = if max_d[c] > 0.0 {
                        ema_d[i] / max_d[c]
                    } else {
                        0.0
                    };
                    if b + d > 1e-12 {
                        b / (b + d)
                    } else {
                        0.5
                    }
                })
                .collect();
            let mut w = w;
            if w.iter().sum::<f64>() <= 0.0 {
                w.fill(1.0);
            }
            let (loss_b, grad_b) = loss_and_gradient(&biased, xb.view(), &yb, None, &gce)?;
            let (loss_d, grad_d) = loss_and_gradient(&debiased, xb.view(), &yb, Some(&w), &ce)?;
            if !loss_b.is_finite() || !loss_d.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            apply_gradients(&mut biased, &grad_b, original);
            apply_gradients(&mut debiased, &grad_d, &debiased_cfg);
            total += loss_d;
            batches += 1;
        }
        end_epoch(&mut biased, original, original.lambda_sparse);
        end_epoch(&mut debiased, &debiased_cfg, original.lambda_sparse);
        rep.say(
            (epoch + 1) as f64 / original.epochs as f64,
            format!(
                "epoch {} debiased loss {:.5}",
                epoch + 1,
                total / batches.max(1) as f64
            ),
        );
    }
    debiased.train_config = Some(debiased_cfg);
    Ok(debiased)
}
