//! Group-structured evaluation and diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::cbm::{predict, ConceptBottleneck};
use crate::error::{Error, Result};
use crate::feedback::AuxLabels;
use crate::io::Artifact;
use crate::permweight::SampleWeights;
use crate::synthdata::{Dataset, SegmentRole, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub y: usize,
    pub a: usize,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Sorted by `(y, a)`.
    pub groups: Vec<GroupAccuracy>,
    pub sample_average: f64,
    pub group_mean: f64,
    pub worst_group: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
}

impl GroupMetrics {
    pub fn group(&self, y: usize, a: usize) -> Option<&GroupAccuracy> {
        self.groups.iter().find(|g| g.y == y && g.a == a)
    }
}

/// Exact per-group counting. `scores` (one row per sample, one column per
/// class) enables AUROC when the labels are binary.
pub fn group_metrics(
    preds: &[usize],
    scores: Option<ArrayView2<f64>>,
    y: &[usize],
    a: &[usize],
) -> Result<GroupMetrics> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Degenerate("no samples to evaluate".into()));
    }
    if preds.len() != n || a.len() != n {
        return Err(Error::Dimension {
            what: "predictions, labels and attributes",
            expected: n,
            actual: preds.len().min(a.len()),
        });
    }
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0;
    for i in 0..n {
        let ok = usize::from(preds[i] == y[i]);
        correct_total += ok;
        let e = cells.entry((y[i], a[i])).or_insert((0, 0));
        e.0 += 1;
        e.1 += ok;
    }
    let groups: Vec<GroupAccuracy> = cells
        .into_iter()
        .map(|((y, a), (n, correct))| GroupAccuracy {
            y,
            a,
            n,
            correct,
            accuracy: correct as f64 / n as f64,
        })
        .collect();
    let group_mean = groups.iter().map(|g| g.accuracy).sum::<f64>() / groups.len() as f64;
    let worst_group = groups
        .iter()
        .map(|g| g.accuracy)
        .fold(f64::INFINITY, f64::min);
    let classes: BTreeSet<usize> = y.iter().copied().collect();
    let auroc = match scores {
        Some(s) if classes.iter().all(|&c| c <= 1) && s.ncols() == 2 => {
            if s.nrows() != n {
                return Err(Error::Dimension {
                    what: "score rows",
                    expected: n,
                    actual: s.nrows(),
                });
            }
            let pos: Vec<f64> = s.column(1).to_vec();
            auroc(&pos, y)
        }
        _ => None,
    };
    Ok(GroupMetrics {
        groups,
        sample_average: correct_total as f64 / n as f64,
        group_mean,
        worst_group,
        auroc,
    })
}

/// Mann–Whitney AUROC of `scores` for label 1 against label 0; ties count
/// one half. `None` when a class is missing.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Average ranks over tie blocks.
    let mut rank = vec![0.0; scores.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            rank[i] = avg;
        }
        start = end;
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.iter().filter(|&&l| l == 0).count() as f64;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Predicts on one split and scores it.
pub fn evaluate(model: &ConceptBottleneck, ds: &Dataset, split: Split) -> Result<GroupMetrics> {
    let idx = ds.indices(split);
    let (preds, scores) = predict(model, ds.rows(&idx).view())?;
    group_metrics(
        &preds,
        Some(scores.view()),
        &ds.labels_at(&idx),
        &ds.attrs_at(&idx),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDependence {
    pub concept_id: usize,
    pub class: usize,
    pub cov_unweighted: f64,
    pub cov_weighted: f64,
    pub corr_unweighted: f64,
    pub corr_weighted: f64,
    /// The column is constant under at least one weighting; its correlation
    /// is reported as 0.
    pub zero_variance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub formula: String,
    pub columns: Vec<ColumnDependence>,
}

impl DependenceReport {
    /// Largest `|weighted cov| / |unweighted cov|` over all entries with a
    /// non-negligible unweighted covariance.
    pub fn max_cov_ratio(&self) -> f64 {
        self.columns
            .iter()
            .filter(|c| c.cov_unweighted.abs() > 1e-12)
            .map(|c| c.cov_weighted.abs() / c.cov_unweighted.abs())
            .fold(0.0, f64::max)
    }
}

const DEPENDENCE_FORMULA: &str = "w_i = u_i / mean(u); m(x) = sum_i w_i x_i / N; \
cov(v, e_k) = sum_i w_i (v_i - m(v)) (e_k,i - m(e_k)) / N with e_k = one-hot(y)_k; \
corr = cov / sqrt(var(v) var(e_k))";

fn moments(v: &[f64], e: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let mv = v.iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / n;
    let me = e.iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_v = 0.0;
    let mut var_e = 0.0;
    for i in 0..v.len() {
        let dv = v[i] - mv;
        let de = e[i] - me;
        cov += w[i] * dv * de;
        var_v += w[i] * dv * dv;
        var_e += w[i] * de * de;
    }
    (cov / n, var_v / n, var_e / n)
}

/// Covariance and correlation of each `V̂` column with each one-hot class
/// indicator, with and without weights.
pub fn dependence_report(
    aux: &AuxLabels,
    y: &[usize],
    n_classes: usize,
    weights: Option<&SampleWeights>,
) -> Result<DependenceReport> {
    let n = aux.n_samples();
    if y.len() != n {
        return Err(Error::Dimension {
            what: "labels for auxiliary rows",
            expected: n,
            actual: y.len(),
        });
    }
    let w: Vec<f64> = match weights {
        Some(sw) => {
            if sw.len() != n {
                return Err(Error::Dimension {
                    what: "weights for auxiliary rows",
                    expected: n,
                    actual: sw.len(),
                });
            }
            let mean = sw.mean();
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(Error::Weights("mean weight must be positive".into()));
            }
            sw.u.iter().map(|u| u / mean).collect()
        }
        None => vec![1.0; n],
    };
    let ones = vec![1.0; n];
    let corr = |cov: f64, vv: f64, ve: f64| {
        if vv > 1e-15 && ve > 1e-15 {
            (cov / (vv * ve).sqrt(), false)
        } else {
            (0.0, true)
        }
    };
    let mut columns = Vec::new();
    for (j, &concept_id) in aux.concept_order.iter().enumerate() {
        let v = aux.values.column(j).to_vec();
        for class in 0..n_classes {
            let e: Vec<f64> = y.iter().map(|&c| f64::from(u8::from(c == class))).collect();
            let (cu, vvu, veu) = moments(&v, &e, &ones);
            let (cw, vvw, vew) = moments(&v, &e, &w);
            let (ru, zu) = corr(cu, vvu, veu);
            let (rw, zw) = corr(cw, vvw, vew);
            columns.push(ColumnDependence {
                concept_id,
                class,
                cov_unweighted: cu,
                cov_weighted: cw,
                corr_unweighted: ru,
                corr_weighted: rw,
                zero_variance: zu || zw,
            });
        }
    }
    Ok(DependenceReport {
        formula: DEPENDENCE_FORMULA.into(),
        columns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConcept {
    pub concept_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Signed head weight.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTopConcepts {
    pub class: usize,
    pub before: Vec<RankedConcept>,
    pub after: Vec<RankedConcept>,
    pub entered: Vec<usize>,
    pub left: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub top_n: usize,
    pub classes: Vec<ClassTopConcepts>,
}

/// Active concepts with a non-zero weight for `class`, by descending
/// `|weight|`, ties to the lower id.
pub fn top_concepts(model: &ConceptBottleneck, class: usize, top_n: usize) -> Vec<RankedConcept> {
    let mut ranked: Vec<RankedConcept> = (0..model.n_concepts())
        .filter(|&c| model.active_mask[c] && model.head_weights[[class, c]] != 0.0)
        .map(|c| RankedConcept {
            concept_id: c,
            name: model.concept_meta[c].name.clone(),
            weight: model.head_weights[[class, c]],
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.weight
            .abs()
            .total_cmp(&a.weight.abs())
            .then(a.concept_id.cmp(&b.concept_id))
    });
    ranked.truncate(top_n);
    ranked
}

pub fn concept_report(
    before: &ConceptBottleneck,
    after: &ConceptBottleneck,
    top_n: usize,
) -> Result<ConceptReport> {
    if before.n_concepts() != after.n_concepts() {
        return Err(Error::Dimension {
            what: "concept ids shared by both models",
            expected: before.n_concepts(),
            actual: after.n_concepts(),
        });
    }
    if before.n_classes() != after.n_classes() {
        return Err(Error::Dimension {
            what: "classes shared by both models",
            expected: before.n_classes(),
            actual: after.n_classes(),
        });
    }
    let classes = (0..before.n_classes())
        .map(|class| {
            let b = top_concepts(before, class, top_n);
            let a = top_concepts(after, class, top_n);
            let bs: BTreeSet<usize> = b.iter().map(|r| r.concept_id).collect();
            let as_: BTreeSet<usize> = a.iter().map(|r| r.concept_id).collect();
            ClassTopConcepts {
                class,
                entered: as_.difference(&bs).copied().collect(),
                left: bs.difference(&as_).copied().collect(),
                before: b,
                after: a,
            }
        })
        .collect();
    Ok(ConceptReport { top_n, classes })
}

/// Fraction of a concept's receptive field that lies on background segments.
pub fn background_fraction(
    model: &ConceptBottleneck,
    concept: usize,
    roles: &[SegmentRole],
) -> f64 {
    let segs = &model.concept_meta[concept].segments;
    if segs.is_empty() {
        return 0.0;
    }
    let bg = segs
        .iter()
        .filter(|&&s| roles[s] == SegmentRole::Background)
        .count();
    bg as f64 / segs.len() as f64
}

/// Mean background fraction over every entry of the before or after lists.
pub fn top_list_background_share(
    report: &ConceptReport,
    model: &ConceptBottleneck,
    roles: &[SegmentRole],
    after: bool,
) -> f64 {
    let entries: Vec<usize> = report
        .classes
        .iter()
        .flat_map(|c| if after { &c.after } else { &c.before })
        .map(|r| r.concept_id)
        .collect();
    if entries.is_empty() {
        return 0.0;
    }
    entries
        .iter()
        .map(|&c| background_fraction(model, c, roles))
        .sum::<f64>()
        / entries.len() as f64
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub split: Split,
    pub before: GroupMetrics,
    pub after: Option<GroupMetrics>,
    pub concept_report: Option<ConceptReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependence: Option<DependenceReport>,
}

impl Artifact for RunMetrics {
    const VERSION: &'static str = "cbdebug-metrics-1";
}

/// Flat CSV, one row per `(run, stage, group)`.
pub fn metrics_csv(runs: &[(String, RunMetrics)]) -> String {
    let mut out = String::from("run,stage,y,a,n,correct,accuracy\n");
    for (name, m) in runs {
        let stages =
            std::iter::once(("before", &m.before)).chain(m.after.as_ref().map(|a| ("after", a)));
        for (stage, gm) in stages {
            for g in &gm.groups {
                let _ = writeln!(
                    out,
                    "{name},{stage},{},{},{},{},{}",
                    g.y, g.a, g.n, g.correct, g.accuracy
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub strategy: String,
    pub sample_average: f64,
    pub group_mean: f64,
    pub worst_group: f64,
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let run_w = rows.iter().map(|r| r.run.len()).max().unwrap_or(0).max(3);
    let strat_w = rows
        .iter()
        .map(|r| r.strategy.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let mut out = format!(
        "{:<run_w$}  {:<strat_w$}  {:>8}  {:>10}  {:>11}\n",
        "run", "strategy", "average", "group_mean", "worst_group"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<run_w$}  {:<strat_w$}  {:>8.4}  {:>10.4}  {:>11.4}",
            r.run, r.strategy, r.sample_average, r.group_mean, r.worst_group
        );
    }
    out
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("run,strategy,average,group_mean,worst_group\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.run, r.strategy, r.sample_average, r.group_mean, r.worst_group
        );
    }
    out
}
