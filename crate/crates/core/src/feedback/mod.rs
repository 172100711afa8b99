//! Removal-step feedback and the Label step.
//!
//! A [`FeedbackSet`] records which concepts an expert (a person, the
//! attribution rule, or an LLM) marked as spurious. [`label_aux`] turns that
//! concept-level verdict into sample-level auxiliary labels: the raw
//! activations of the marked concepts on every training sample.

mod llm;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::cbm::{concept_activations, ConceptBottleneck, ConceptExplanation};
use crate::error::{Error, Result};
use crate::io::{matrix, Artifact};
use crate::synthdata::Dataset;

pub use llm::{
    llm_oracle, parse_reply, system_prompt, task_description, Judgement, LlmEndpoint,
    SYSTEM_PROMPT_TEMPLATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Human,
    RuleOracle,
    LlmOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub spurious: bool,
    /// The source gave no usable answer; `spurious` is then false.
    #[serde(default)]
    pub abstain: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSet {
    pub c_spur: BTreeSet<usize>,
    pub source: FeedbackSource,
    /// One verdict per concept that was presented.
    pub verdicts: BTreeMap<usize, Verdict>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Artifact for FeedbackSet {
    const VERSION: &'static str = "cbdebug-fb-1";
}

impl FeedbackSet {
    /// A manual selection over every active concept of `model`.
    pub fn from_selection(
        model: &ConceptBottleneck,
        c_spur: impl IntoIterator<Item = usize>,
        source: FeedbackSource,
    ) -> Result<Self> {
        let c_spur: BTreeSet<usize> = c_spur.into_iter().collect();
        for &c in &c_spur {
            model.check_concept(c)?;
        }
        let verdicts = (0..model.n_concepts())
            .filter(|c| model.active_mask[*c] || c_spur.contains(c))
            .map(|c| {
                (
                    c,
                    Verdict {
                        spurious: c_spur.contains(&c),
                        abstain: false,
                        justification: None,
                    },
                )
            })
            .collect();
        Ok(FeedbackSet {
            c_spur,
            source,
            verdicts,
            created_at: Utc::now(),
            warnings: Vec::new(),
        })
    }

    pub fn validate_against(&self, model: &ConceptBottleneck) -> Result<()> {
        for &c in self.c_spur.iter().chain(self.verdicts.keys()) {
            model.check_concept(c)?;
        }
        for &c in &self.c_spur {
            if !self.verdicts.get(&c).is_some_and(|v| v.spurious) {
                return Err(Error::config(
                    "verdicts",
                    format!("concept {c} is marked spurious without a matching verdict"),
                ));
            }
        }
        Ok(())
    }

    pub fn abstained(&self) -> Vec<usize> {
        self.verdicts
            .iter()
            .filter(|(_, v)| v.abstain)
            .map(|(&c, _)| c)
            .collect()
    }
}

/// `V̂`: activations of the marked concepts, one row per training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxLabels {
    #[serde(with = "matrix")]
    pub values: Array2<f64>,
    /// Column `j` holds concept `concept_order[j]`.
    pub concept_order: Vec<usize>,
    /// Row `i` holds dataset row `sample_order[i]`.
    pub sample_order: Vec<usize>,
}

impl Artifact for AuxLabels {
    const VERSION: &'static str = "cbdebug-aux-1";
}

impl AuxLabels {
    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.values.ncols()
    }
}

/// Label step: sub-selects the activations of `fb.c_spur` on the training
/// split. Columns follow ascending concept id.
pub fn label_aux(model: &ConceptBottleneck, ds: &Dataset, fb: &FeedbackSet) -> Result<AuxLabels> {
    if fb.c_spur.is_empty() {
        return Err(Error::EmptyFeedback);
    }
    for &c in &fb.c_spur {
        model.check_concept(c)?;
    }
    let sample_order = ds.train_indices();
    let x = ds.rows(&sample_order);
    let acts = concept_activations(model, x.view())?;
    let concept_order: Vec<usize> = fb.c_spur.iter().copied().collect();
    Ok(AuxLabels {
        values: acts.select(Axis(1), &concept_order),
        concept_order,
        sample_order,
    })
}

/// Marks a concept spurious iff the background share of its mean
/// `|attribution|` over the top exemplars is strictly above `threshold`.
pub fn rule_oracle(
    model: &ConceptBottleneck,
    ds: &Dataset,
    explanations: &[ConceptExplanation],
    threshold: f64,
) -> Result<FeedbackSet> {
    if !threshold.is_finite() {
        return Err(Error::config("threshold", "must be finite"));
    }
    let by_id: BTreeMap<usize, &ConceptExplanation> =
        explanations.iter().map(|e| (e.concept_id, e)).collect();
    let mut verdicts = BTreeMap::new();
    let mut c_spur = BTreeSet::new();
    for c in 0..model.n_concepts() {
        if !model.active_mask[c] {
            continue;
        }
        let expl = by_id.get(&c).ok_or_else(|| {
            Error::config(
                "explanations",
                format!("no explanation for active concept {c}"),
            )
        })?;
        let share = expl.background_share(&ds.segment_roles);
        let spurious = share > threshold;
        if spurious {
            c_spur.insert(c);
        }
        verdicts.insert(
            c,
            Verdict {
                spurious,
                abstain: false,
                justification: Some(format!("background attribution share {share:.4}")),
            },
        );
    }
    Ok(FeedbackSet {
        c_spur,
        source: FeedbackSource::RuleOracle,
        verdicts,
        created_at: Utc::now(),
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbm::{explain_all, TrainConfig};
    use crate::synthdata::{generate_dataset, DatasetConfig, GroupCount};

    fn setup() -> (Dataset, ConceptBottleneck) {
        let mut cfg = DatasetConfig::waterbirds(3);
        cfg.group_counts = vec![
            GroupCount {
                y: 0,
                a: 0,
                count: 60,
            },
            GroupCount {
                y: 0,
                a: 1,
                count: 6,
            },
            GroupCount {
                y: 1,
                a: 0,
                count: 6,
            },
            GroupCount {
                y: 1,
                a: 1,
                count: 60,
            },
        ];
        cfg.val_per_group = 2;
        cfg.test_per_group = 2;
        let ds = generate_dataset(&cfg).unwrap();
        let tc = TrainConfig {
            epochs: 5,
            n_concepts: 8,
            ..TrainConfig::default()
        };
        let model = crate::cbm::train(&ds, None, &tc).unwrap();
        (ds, model)
    }

    #[test]
    fn all_concepts_gives_full_activation_matrix() {
        let (ds, model) = setup();
        let fb = FeedbackSet::from_selection(&model, 0..8, FeedbackSource::Human).unwrap();
        let aux = label_aux(&model, &ds, &fb).unwrap();
        let idx = ds.train_indices();
        let acts = concept_activations(&model, ds.rows(&idx).view()).unwrap();
        assert_eq!(aux.values, acts);
        assert_eq!(aux.sample_order, idx);
    }

    #[test]
    fn single_concept_is_its_column() {
        let (ds, model) = setup();
        let fb = FeedbackSet::from_selection(&model, [5], FeedbackSource::Human).unwrap();
        let aux = label_aux(&model, &ds, &fb).unwrap();
        let acts = concept_activations(&model, ds.rows(&ds.train_indices()).view()).unwrap();
        assert_eq!(aux.values.column(0), acts.column(5));
        assert_eq!(aux.concept_order, vec![5]);
    }

    #[test]
    fn empty_feedback_has_nothing_to_debug() {
        let (ds, model) = setup();
        let fb = FeedbackSet::from_selection(&model, [], FeedbackSource::Human).unwrap();
        assert!(matches!(
            label_aux(&model, &ds, &fb),
            Err(Error::EmptyFeedback)
        ));
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let (_, model) = setup();
        assert!(matches!(
            FeedbackSet::from_selection(&model, [42], FeedbackSource::Human),
            Err(Error::UnknownConcept(42))
        ));
    }

    #[test]
    fn insert_then_delete_is_identity() {
        let (ds, model) = setup();
        let base = FeedbackSet::from_selection(&model, [1, 3], FeedbackSource::Human).unwrap();
        let mut grown = base.clone();
        grown.c_spur.insert(6);
        grown.c_spur.remove(&6);
        assert_eq!(
            label_aux(&model, &ds, &base).unwrap(),
            label_aux(&model, &ds, &grown).unwrap()
        );
    }

    #[test]
    fn rule_oracle_threshold_boundaries() {
        let (ds, model) = setup();
        let expl = explain_all(&model, &ds, 10).unwrap();
        let none = rule_oracle(&model, &ds, &expl, 1.0).unwrap();
        assert!(none.c_spur.is_empty());
        assert_eq!(none.verdicts.len(), 8);
        let all = rule_oracle(&model, &ds, &expl, 0.0).unwrap();
        for e in &expl {
            let share = e.background_share(&ds.segment_roles);
            assert_eq!(all.c_spur.contains(&e.concept_id), share > 0.0);
        }
    }

    #[test]
    fn rule_oracle_is_monotone() {
        let (ds, model) = setup();
        let expl = explain_all(&model, &ds, 10).unwrap();
        let mut prev: Option<BTreeSet<usize>> = None;
        for t in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let cur = rule_oracle(&model, &ds, &expl, t).unwrap().c_spur;
            if let Some(p) = &prev {
                assert!(cur.is_subset(p));
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn rule_oracle_needs_every_active_explanation() {
        let (ds, model) = setup();
        let expl = explain_all(&model, &ds, 10).unwrap();
        assert!(rule_oracle(&model, &ds, &expl[1..], 0.5).is_err());
        let pruned = crate::cbm::remove_concepts(&model, [0]).unwrap();
        assert!(rule_oracle(&pruned, &ds, &expl[1..], 0.5).is_ok());
    }
}
