//! Synthetic datasets with a planted spurious attribute.
//!
//! Each sample is a vector of `g` segments of `d` dims. Core segments are
//! drawn around a class-specific mean, background segments around an
//! attribute-specific mean, so the label and the hidden attribute are only
//! linked through the group counts of the training split.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Artifact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentRole {
    Core,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Number of training samples in group `(y, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub y: usize,
    pub a: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_classes: usize,
    /// Number of distinct values of the hidden attribute.
    pub n_spurious_attrs: usize,
    /// Training-split group sizes; groups not listed are empty.
    pub group_counts: Vec<GroupCount>,
    pub segments: usize,
    pub segment_dim: usize,
    /// Role of every segment, `segments` entries.
    pub segment_roles: Vec<SegmentRole>,
    pub core_signal_strength: f64,
    pub spurious_signal_strength: f64,
    pub noise_std: f64,
    /// Validation samples per `(y, a)` group (balanced).
    pub val_per_group: usize,
    /// Test samples per `(y, a)` group (balanced).
    pub test_per_group: usize,
    pub seed: u64,
}

impl DatasetConfig {
    /// Four-group binary benchmark with the group proportions of the
    /// Waterbirds training split: landbirds mostly on land, waterbirds mostly
    /// on water.
    pub fn waterbirds(seed: u64) -> Self {
        DatasetConfig {
            n_classes: 2,
            n_spurious_attrs: 2,
            group_counts: vec![
                GroupCount {
                    y: 0,
                    a: 0,
                    count: 3498,
                },
                GroupCount {
                    y: 0,
                    a: 1,
                    count: 184,
                },
                GroupCount {
                    y: 1,
                    a: 0,
                    count: 56,
                },
                GroupCount {
                    y: 1,
                    a: 1,
                    count: 1057,
                },
            ],
            segments: 4,
            segment_dim: 4,
            segment_roles: vec![
                SegmentRole::Core,
                SegmentRole::Background,
                SegmentRole::Core,
                SegmentRole::Background,
            ],
            core_signal_strength: 2.0,
            spurious_signal_strength: 2.0,
            noise_std: 1.0,
            val_per_group: 100,
            test_per_group: 1000,
            seed,
        }
    }

    /// Same layout as [`DatasetConfig::waterbirds`] with 250 samples per
    /// group, so label and attribute are independent on the training split.
    pub fn balanced(seed: u64) -> Self {
        let mut cfg = Self::waterbirds(seed);
        for g in &mut cfg.group_counts {
            g.count = 250;
        }
        cfg
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "waterbirds" => Some(Self::waterbirds(seed)),
            "balanced" => Some(Self::balanced(seed)),
            _ => None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.segments * self.segment_dim
    }

    pub fn train_size(&self) -> usize {
        self.group_counts.iter().map(|g| g.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::config("n_classes", "must be at least 1"));
        }
        if self.n_spurious_attrs == 0 {
            return Err(Error::config("n_spurious_attrs", "must be at least 1"));
        }
        if self.segments < 2 {
            return Err(Error::config("segments", "need at least 2 segments"));
        }
        if self.segment_dim == 0 {
            return Err(Error::config("segment_dim", "must be at least 1"));
        }
        if self.segment_roles.len() != self.segments {
            return Err(Error::config(
                "segment_roles",
                format!(
                    "expected {} roles, got {}",
                    self.segments,
                    self.segment_roles.len()
                ),
            ));
        }
        if !self.segment_roles.contains(&SegmentRole::Core) {
            return Err(Error::config("segment_roles", "no core segment"));
        }
        if !self.segment_roles.contains(&SegmentRole::Background) {
            return Err(Error::config("segment_roles", "no background segment"));
        }
        for (name, v) in [
            ("core_signal_strength", self.core_signal_strength),
            ("spurious_signal_strength", self.spurious_signal_strength),
        ] {
            if !v.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be finite and >= 0"));
        }
        let mut seen = BTreeMap::new();
        for g in &self.group_counts {
            if g.y >= self.n_classes {
                return Err(Error::config(
                    "group_counts",
                    format!("class {} out of range", g.y),
                ));
            }
            if g.a >= self.n_spurious_attrs {
                return Err(Error::config(
                    "group_counts",
                    format!("attribute {} out of range", g.a),
                ));
            }
            if seen.insert((g.y, g.a), g.count).is_some() {
                return Err(Error::config(
                    "group_counts",
                    format!("duplicate group ({}, {})", g.y, g.a),
                ));
            }
        }
        for y in 0..self.n_classes {
            let total: usize = self
                .group_counts
                .iter()
                .filter(|g| g.y == y)
                .map(|g| g.count)
                .sum();
            if total == 0 {
                return Err(Error::config(
                    "group_counts",
                    format!("class {y} has no training samples"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub segment_roles: Vec<SegmentRole>,
    /// `N × (g·d)` feature matrix.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub attrs: Vec<usize>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn n_segments(&self) -> usize {
        self.segment_roles.len()
    }

    pub fn segment_dim(&self) -> usize {
        self.config.segment_dim
    }

    /// Row indices of one split, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn rows(&self, idx: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), idx)
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn attrs_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.attrs[i]).collect()
    }

    pub fn features_view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Empirical `(y, a)` counts of a split.
    pub fn group_counts(&self, split: Split) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for i in self.indices(split) {
            *counts.entry((self.labels[i], self.attrs[i])).or_insert(0) += 1;
        }
        counts
    }
}

/// Draws `k` unit directions in `R^d`, mutually orthogonal when `k ≤ d`.
fn draw_directions(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if out.len() < d {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        out.push(v);
    }
    out
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let g = config.segments;
    let d = config.segment_dim;
    let p = g * d;

    let mut mean_rng = ChaCha8Rng::seed_from_u64(config.seed);
    // means[segment][value]: class means on core segments, attribute means on
    // background segments.
    let means: Vec<Vec<Vec<f64>>> = config
        .segment_roles
        .iter()
        .map(|role| match role {
            SegmentRole::Core => draw_directions(&mut mean_rng, config.n_classes, d),
            SegmentRole::Background => draw_directions(&mut mean_rng, config.n_spurious_attrs, d),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut plan: Vec<(Split, usize, usize)> = Vec::new();
    let mut train_groups = config.group_counts.clone();
    train_groups.sort_by_key(|g| (g.y, g.a));
    let mut train_part = Vec::new();
    for gc in &train_groups {
        train_part.extend(std::iter::repeat_n((Split::Train, gc.y, gc.a), gc.count));
    }
    train_part.shuffle(&mut rng);
    plan.extend(train_part);
    for (split, per_group) in [
        (Split::Val, config.val_per_group),
        (Split::Test, config.test_per_group),
    ] {
        let mut part = Vec::new();
        for y in 0..config.n_classes {
            for a in 0..config.n_spurious_attrs {
                part.extend(std::iter::repeat_n((split, y, a), per_group));
            }
        }
        part.shuffle(&mut rng);
        plan.extend(part);
    }

    let n = plan.len();
    let mut features = Array2::<f64>::zeros((n, p));
    let mut labels = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for (i, &(s, y, a)) in plan.iter().enumerate() {
        let mut row = features.row_mut(i);
        for (seg, role) in config.segment_roles.iter().enumerate() {
            let (mean, strength) = match role {
                SegmentRole::Core => (&means[seg][y], config.core_signal_strength),
                SegmentRole::Background => (&means[seg][a], config.spurious_signal_strength),
            };
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                row[seg * d + j] = strength * mean[j] + config.noise_std * z;
            }
        }
        labels.push(y);
        attrs.push(a);
        split.push(s);
    }

    Ok(Dataset {
        config: config.clone(),
        segment_roles: config.segment_roles.clone(),
        features,
        labels,
        attrs,
        split,
    })
}

#[derive(Serialize, Deserialize)]
struct Row {
    x: Vec<f64>,
    y: usize,
    a: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    config: DatasetConfig,
    segment_roles: Vec<SegmentRole>,
    rows: Vec<Row>,
}

impl Serialize for Dataset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = (0..self.len())
            .map(|i| Row {
                x: self.features.row(i).to_vec(),
                y: self.labels[i],
                a: self.attrs[i],
                split: self.split[i],
            })
            .collect();
        DatasetFile {
            config: self.config.clone(),
            segment_roles: self.segment_roles.clone(),
            rows,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dataset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = DatasetFile::deserialize(d)?;
        let p = file.config.feature_dim();
        if file.segment_roles.len() != file.config.segments {
            return Err(D::Error::custom(
                "segment_roles length does not match config",
            ));
        }
        let n = file.rows.len();
        let mut flat = Vec::with_capacity(n * p);
        let mut labels = Vec::with_capacity(n);
        let mut attrs = Vec::with_capacity(n);
        let mut split = Vec::with_capacity(n);
        for (i, r) in file.rows.into_iter().enumerate() {
            if r.x.len() != p {
                return Err(D::Error::custom(format!(
                    "row {i}: expected {p} features, got {}",
                    r.x.len()
                )));
            }
            if r.y >= file.config.n_classes || r.a >= file.config.n_spurious_attrs {
                return Err(D::Error::custom(format!(
                    "row {i}: label or attribute out of range"
                )));
            }
            flat.extend(r.x);
            labels.push(r.y);
            attrs.push(r.a);
            split.push(r.split);
        }
        let features = Array2::from_shape_vec((n, p), flat).map_err(D::Error::custom)?;
        Ok(Dataset {
            config: file.config,
            segment_roles: file.segment_roles,
            features,
            labels,
            attrs,
            split,
        })
    }
}

impl Artifact for Dataset {
    const VERSION: &'static str = "cbdebug-ds-1";
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<std::path::Path>) -> Result<()> {
    ds.save(path)
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<Dataset> {
    Dataset::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        let mut cfg = DatasetConfig::waterbirds(seed);
        cfg.group_counts = vec![
            GroupCount {
                y: 0,
                a: 0,
                count: 40,
            },
            GroupCount {
                y: 0,
                a: 1,
                count: 5,
            },
            GroupCount {
                y: 1,
                a: 0,
                count: 3,
            },
            GroupCount {
                y: 1,
                a: 1,
                count: 30,
            },
        ];
        cfg.val_per_group = 4;
        cfg.test_per_group = 6;
        cfg
    }

    #[test]
    fn waterbirds_counts_are_exact() {
        let ds = generate_dataset(&DatasetConfig::waterbirds(7)).unwrap();
        let counts = ds.group_counts(Split::Train);
        assert_eq!(counts[&(0, 0)], 3498);
        assert_eq!(counts[&(0, 1)], 184);
        assert_eq!(counts[&(1, 0)], 56);
        assert_eq!(counts[&(1, 1)], 1057);
        assert_eq!(ds.train_indices().len(), 4795);
        assert!(ds.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_splits_are_balanced() {
        let ds = generate_dataset(&small(1)).unwrap();
        for (_, c) in ds.group_counts(Split::Test) {
            assert_eq!(c, 6);
        }
        for (_, c) in ds.group_counts(Split::Val) {
            assert_eq!(c, 4);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(4)).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn balanced_counts_give_zero_correlation() {
        let ds = generate_dataset(&DatasetConfig::balanced(2)).unwrap();
        let idx = ds.train_indices();
        let n = idx.len() as f64;
        let ys: Vec<f64> = idx.iter().map(|&i| ds.labels[i] as f64).collect();
        let as_: Vec<f64> = idx.iter().map(|&i| ds.attrs[i] as f64).collect();
        let my = ys.iter().sum::<f64>() / n;
        let ma = as_.iter().sum::<f64>() / n;
        let cov: f64 = ys
            .iter()
            .zip(&as_)
            .map(|(y, a)| (y - my) * (a - ma))
            .sum::<f64>()
            / n;
        assert_eq!(cov, 0.0);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = small(0);
        cfg.noise_std = -1.0;
        match generate_dataset(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "noise_std"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = small(0);
        cfg.segments = 1;
        cfg.segment_roles.truncate(1);
        match generate_dataset(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "segments"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = small(0);
        cfg.group_counts.retain(|g| g.y != 1);
        match generate_dataset(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "group_counts"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = small(0);
        cfg.segment_roles = vec![SegmentRole::Core; 4];
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn background_segments_only_depend_on_attribute() {
        let mut cfg = small(5);
        cfg.noise_std = 0.0;
        let ds = generate_dataset(&cfg).unwrap();
        let d = cfg.segment_dim;
        // With no noise every sample sharing `a` has identical background segments.
        let first: BTreeMap<usize, Vec<f64>> = (0..ds.len())
            .rev()
            .map(|i| (ds.attrs[i], ds.row(i).slice(ndarray::s![d..2 * d]).to_vec()))
            .collect();
        for i in 0..ds.len() {
            assert_eq!(
                ds.row(i).slice(ndarray::s![d..2 * d]).to_vec(),
                first[&ds.attrs[i]]
            );
        }
    }
}
