//! Augment step: inject spurious-concept evidence into bias-aligned samples.
//!
//! Samples with low weight (the ones the shortcut already explains) get a
//! high augmentation probability. An augmented sample either receives
//! segments copied from exemplars of the marked concepts (CutMix) or is
//! blended with one such exemplar (Mixup). Labels never change.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cbm::{ConceptBottleneck, ConceptExplanation};
use crate::error::{Error, Result};
use crate::feedback::FeedbackSet;
use crate::io::Artifact;
use crate::permweight::{derive_seed, Histogram, SampleWeights};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Cutmix,
    Mixup,
}

/// Where a CutMix paste lands in the target sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastePlacement {
    /// The slot the segment was taken from.
    Aligned,
    /// A uniformly drawn slot.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub gamma: f64,
    pub mode: AugmentMode,
    pub mixup_keep: f64,
    /// CutMix pastes per augmented sample.
    pub n_patches: usize,
    pub exemplar_pool_size: usize,
    #[serde(default = "default_placement")]
    pub placement: PastePlacement,
    pub seed: u64,
}

fn default_placement() -> PastePlacement {
    PastePlacement::Aligned
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            gamma: 2.0,
            mode: AugmentMode::Cutmix,
            mixup_keep: 0.75,
            n_patches: 5,
            exemplar_pool_size: 10,
            placement: PastePlacement::Aligned,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Sharper skew towards the lowest-weight samples.
    pub fn heavy_skew() -> Self {
        AugmentConfig {
            gamma: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be a finite value >= 0"));
        }
        if !(self.mixup_keep > 0.0 && self.mixup_keep < 1.0) {
            return Err(Error::config(
                "mixup_keep",
                "must lie strictly between 0 and 1",
            ));
        }
        if self.mode == AugmentMode::Cutmix && self.n_patches == 0 {
            return Err(Error::config("n_patches", "must be at least 1"));
        }
        if self.exemplar_pool_size == 0 {
            return Err(Error::config("exemplar_pool_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paste {
    pub concept: usize,
    pub exemplar: usize,
    pub source_segment: usize,
    pub target_segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AugmentDetail {
    Cutmix {
        pastes: Vec<Paste>,
    },
    Mixup {
        concept: usize,
        exemplar: usize,
        keep: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub sample_id: usize,
    pub augmented: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<AugmentDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub gamma: f64,
    pub mode: AugmentMode,
    /// Aligned with the training split order.
    pub p_aug: Vec<f64>,
    pub records: Vec<AugmentRecord>,
}

impl Artifact for AugmentationPlan {
    const VERSION: &'static str = "cbdebug-aug-1";
}

impl AugmentationPlan {
    pub fn n_augmented(&self) -> usize {
        self.records.iter().filter(|r| r.augmented).count()
    }

    /// 100-bin histogram of `p_aug` over `[0, 1]`.
    pub fn histogram(&self) -> Histogram {
        Histogram::build(&self.p_aug, 100, 0.0, 1.0)
    }
}

/// `p_i = ((max u − u_i) / (max u − min u))^γ`, or all zeros when every weight
/// is equal.
pub fn aug_probabilities(weights: &SampleWeights, gamma: f64) -> Result<Vec<f64>> {
    let u = &weights.u;
    if let Some(i) = u.iter().position(|x| !x.is_finite()) {
        return Err(Error::Weights(format!("weight {i} is not finite")));
    }
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inv: Vec<f64> = u.iter().map(|&x| max - x).collect();
    let top = inv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(vec![0.0; u.len()]);
    }
    Ok(inv.iter().map(|&v| (v / top).powf(gamma)).collect())
}

struct Pool<'a> {
    concepts: Vec<usize>,
    exemplars: BTreeMap<usize, &'a [crate::cbm::Exemplar]>,
}

fn exemplar_pools<'a>(
    fb: &FeedbackSet,
    explanations: &'a [ConceptExplanation],
    size: usize,
) -> Result<Pool<'a>> {
    let mut exemplars = BTreeMap::new();
    for &c in &fb.c_spur {
        let found = explanations
            .iter()
            .find(|e| e.concept_id == c)
            .map(|e| &e.top_exemplars[..e.top_exemplars.len().min(size)])
            .unwrap_or(&[]);
        if found.is_empty() {
            return Err(Error::EmptyExemplarPool(c));
        }
        exemplars.insert(c, found);
    }
    Ok(Pool {
        concepts: fb.c_spur.iter().copied().collect(),
        exemplars,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Draws the plan and applies it to a copy of `ds`. Only training rows can
/// change; augmented rows keep their label, attribute and weight.
pub fn build_plan(
    ds: &Dataset,
    model: &ConceptBottleneck,
    weights: &SampleWeights,
    fb: &FeedbackSet,
    explanations: &[ConceptExplanation],
    cfg: &AugmentConfig,
) -> Result<(Dataset, AugmentationPlan)> {
    cfg.validate()?;
    if fb.c_spur.is_empty() {
        return Err(Error::EmptyFeedback);
    }
    for &c in &fb.c_spur {
        model.check_concept(c)?;
    }
    let train = ds.train_indices();
    if weights.len() != train.len() {
        return Err(Error::Dimension {
            what: "weights for training rows",
            expected: train.len(),
            actual: weights.len(),
        });
    }
    let pool = exemplar_pools(fb, explanations, cfg.exemplar_pool_size)?;
    let p_aug = aug_probabilities(weights, cfg.gamma)?;
    let g = ds.n_segments();
    let d = ds.segment_dim();

    let records: Vec<AugmentRecord> = train
        .par_iter()
        .zip(p_aug.par_iter())
        .map(|(&id, &p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, id as u64));
            let augmented = rng.random::<f64>() < p;
            if !augmented {
                return AugmentRecord {
                    sample_id: id,
                    augmented,
                    detail: None,
                };
            }
            let draw = |rng: &mut ChaCha8Rng| {
                let c = pool.concepts[rng.random_range(0..pool.concepts.len())];
                let ex = &pool.exemplars[&c][rng.random_range(0..pool.exemplars[&c].len())];
                (c, ex)
            };
            let detail = match cfg.mode {
                AugmentMode::Cutmix => {
                    let pastes = (0..cfg.n_patches)
                        .map(|_| {
                            let (c, ex) = draw(&mut rng);
                            let source = argmax(&ex.segment_attribution);
                            let target = match cfg.placement {
                                PastePlacement::Aligned => source,
                                PastePlacement::Random => rng.random_range(0..g),
                            };
                            Paste {
                                concept: c,
                                exemplar: ex.sample_id,
                                source_segment: source,
                                target_segment: target,
                            }
                        })
                        .collect();
                    AugmentDetail::Cutmix { pastes }
                }
                AugmentMode::Mixup => {
                    let (c, ex) = draw(&mut rng);
                    AugmentDetail::Mixup {
                        concept: c,
                        exemplar: ex.sample_id,
                        keep: cfg.mixup_keep,
                    }
                }
            };
            AugmentRecord {
                sample_id: id,
                augmented,
                detail: Some(detail),
            }
        })
        .collect();

    let mut out = ds.clone();
    for rec in &records {
        let Some(detail) = &rec.detail else { continue };
        match detail {
            AugmentDetail::Cutmix { pastes } => {
                for p in pastes {
                    let src = ds.row(p.exemplar);
                    let src = src.slice(ndarray::s![
                        p.source_segment * d..(p.source_segment + 1) * d
                    ]);
                    out.features
                        .row_mut(rec.sample_id)
                        .slice_mut(ndarray::s![
                            p.target_segment * d..(p.target_segment + 1) * d
                        ])
                        .assign(&src);
                }
            }
            AugmentDetail::Mixup { exemplar, keep, .. } => {
                let ex = ds.row(*exemplar);
                let mut row = out.features.row_mut(rec.sample_id);
                row.zip_mut_with(&ex, |x, &e| *x = keep * *x + (1.0 - keep) * e);
            }
        }
    }
    Ok((
        out,
        AugmentationPlan {
            gamma: cfg.gamma,
            mode: cfg.mode,
            p_aug,
            records,
        },
    ))
}
