//! Reweight step: permutation weighting over `(V̂, Y)`.
//!
//! A copy of the data with `Y` permuted breaks any dependence between the
//! label and the auxiliary labels. A logistic discriminator learns to tell
//! the permuted rows from the original ones; its odds `η / (1 − η)` on an
//! original row estimate `p(y) p(v) / p(y, v)`. Scores are cross-fitted over
//! K stratified folds and averaged over several permutations.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::AuxLabels;
use crate::io::Artifact;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Damped Newton iterations.
    pub epochs: usize,
    /// Newton step size; 1.0 is a full step.
    pub lr: f64,
    /// L2 penalty on the non-bias coefficients (standardized features).
    pub l2: f64,
    /// Highest power of each activation in the feature map.
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_degree() -> usize {
    1
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            epochs: 30,
            lr: 1.0,
            l2: 5e-3,
            degree: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermWeightConfig {
    pub k_folds: usize,
    pub n_permutations: usize,
    pub classifier: DiscriminatorConfig,
    pub clip_max: f64,
    pub normalize_mean_one: bool,
    pub seed: u64,
}

impl Default for PermWeightConfig {
    fn default() -> Self {
        PermWeightConfig {
            k_folds: 5,
            n_permutations: 5,
            classifier: DiscriminatorConfig::default(),
            clip_max: 100.0,
            normalize_mean_one: true,
            seed: 0,
        }
    }
}

impl PermWeightConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::config("k_folds", "need at least 2 folds"));
        }
        if self.n_permutations == 0 {
            return Err(Error::config(
                "n_permutations",
                "need at least 1 permutation",
            ));
        }
        if !(self.clip_max > 0.0 && self.clip_max.is_finite()) {
            return Err(Error::config("clip_max", "must be > 0"));
        }
        let c = &self.classifier;
        if c.epochs == 0 {
            return Err(Error::config("classifier.epochs", "must be at least 1"));
        }
        if !(c.lr > 0.0 && c.lr.is_finite()) {
            return Err(Error::config("classifier.lr", "must be > 0"));
        }
        if !(c.l2 >= 0.0 && c.l2.is_finite()) {
            return Err(Error::config("classifier.l2", "must be >= 0"));
        }
        if !(1..=4).contains(&c.degree) {
            return Err(Error::config(
                "classifier.degree",
                "must be between 1 and 4",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    Permutation,
    Analytic,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: WeightMethod,
    pub k_folds: usize,
    pub n_permutations: usize,
    pub seed: u64,
    /// Number of raw odds clipped into `[1/clip_max, clip_max]`, summed over
    /// permutations.
    pub clip_events: usize,
}

/// Per-sample weights `U`, aligned with the training split order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub u: Vec<f64>,
    pub provenance: Provenance,
    pub normalized: bool,
}

impl Artifact for SampleWeights {
    const VERSION: &'static str = "cbdebug-w-1";
}

impl SampleWeights {
    pub fn uniform(n: usize) -> Self {
        SampleWeights {
            u: vec![1.0; n],
            provenance: Provenance {
                method: WeightMethod::Uniform,
                k_folds: 0,
                n_permutations: 0,
                seed: 0,
                clip_events: 0,
            },
            normalized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.u.iter().sum::<f64>() / self.u.len().max(1) as f64
    }

    /// Mean weight per key, e.g. per `(y, a)` group.
    pub fn group_means<K: Ord + Copy>(&self, keys: &[K]) -> BTreeMap<K, f64> {
        let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
        for (&k, &u) in keys.iter().zip(&self.u) {
            let e = acc.entry(k).or_insert((0.0, 0));
            e.0 += u;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }
}

/// Seeded uniform shuffle of `y`.
pub fn permute_labels(y: &[usize], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = y.to_vec();
    out.shuffle(&mut rng);
    out
}

/// Independent seed for sub-stream `index` of `seed` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Feature map `[one-hot(y), p, one-hot(y) ⊗ p]` where `p` lists every
/// power `v_j^d` for `d = 1..=degree`.
pub fn discriminator_features(y: usize, v: &[f64], n_classes: usize, degree: usize) -> Vec<f64> {
    let powers: Vec<f64> = (1..=degree as i32)
        .flat_map(|d| v.iter().map(move |x| x.powi(d)))
        .collect();
    let k = powers.len();
    let mut f = vec![0.0; n_classes + k + n_classes * k];
    f[y] = 1.0;
    f[n_classes..n_classes + k].copy_from_slice(&powers);
    let base = n_classes + k + y * k;
    f[base..base + k].copy_from_slice(&powers);
    f
}

/// L2-regularized logistic model on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub coef: Array1<f64>,
    pub bias: f64,
    pub l2: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogisticModel {
    fn standardize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let z = self.standardize(x).dot(&self.coef) + self.bias;
        z.mapv(sigmoid)
    }

    /// Mean log-loss plus `l2/2 · ‖coef‖²` on already standardized inputs,
    /// with its gradient `(d coef, d bias)`.
    pub fn loss_and_gradient(&self, xs: ArrayView2<f64>, t: &[f64]) -> (f64, Array1<f64>, f64) {
        let n = xs.nrows() as f64;
        let z = xs.dot(&self.coef) + self.bias;
        let mut loss = 0.0;
        let mut r = Array1::zeros(xs.nrows());
        for i in 0..xs.nrows() {
            // -[t log σ(z) + (1-t) log(1-σ(z))] = softplus(z) - t z
            loss += softplus(z[i]) - t[i] * z[i];
            r[i] = (sigmoid(z[i]) - t[i]) / n;
        }
        loss = loss / n + 0.5 * self.l2 * self.coef.dot(&self.coef);
        let g = xs.t().dot(&r) + self.l2 * &self.coef;
        (loss, g, r.sum())
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (Cholesky).
fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    Some(x)
}

/// Fits a logistic model to binary targets `t ∈ {0, 1}` by damped Newton
/// iterations on the regularized log-loss.
pub fn fit_logistic(
    x: ArrayView2<f64>,
    t: &[f64],
    cfg: &DiscriminatorConfig,
) -> Result<LogisticModel> {
    let n = x.nrows();
    if t.len() != n {
        return Err(Error::Dimension {
            what: "discriminator targets",
            expected: n,
            actual: t.len(),
        });
    }
    let positives = t.iter().filter(|&&v| v > 0.5).count();
    if positives == 0 || positives == n {
        return Err(Error::Degenerate(
            "discriminator targets contain a single class".into(),
        ));
    }
    let p = x.ncols();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut scale = x.std_axis(Axis(0), 0.0);
    scale.mapv_inplace(|s| if s > 1e-12 { s } else { 1.0 });
    let mut model = LogisticModel {
        mean,
        scale,
        coef: Array1::zeros(p),
        bias: 0.0,
        l2: cfg.l2,
    };
    let xs = model.standardize(x);
    // Augmented design [xs, 1] so the bias shares the Newton step.
    let dim = p + 1;
    for _ in 0..cfg.epochs {
        let (_, g, gb) = model.loss_and_gradient(xs.view(), t);
        let z = xs.dot(&model.coef) + model.bias;
        let mut h = Array2::<f64>::zeros((dim, dim));
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let s = sigmoid(z[i]);
            let w = s * (1.0 - s) * inv_n;
            let row = xs.row(i);
            for a in 0..p {
                let wa = w * row[a];
                for b in 0..=a {
                    h[[a, b]] += wa * row[b];
                }
                h[[p, a]] += wa;
            }
            h[[p, p]] += w;
        }
        for a in 0..dim {
            for b in 0..a {
                h[[b, a]] = h[[a, b]];
            }
        }
        for a in 0..p {
            h[[a, a]] += cfg.l2;
        }
        // Keeps the system positive definite when l2 = 0 and columns collide.
        for a in 0..dim {
            h[[a, a]] += 1e-10;
        }
        let mut grad = Array1::zeros(dim);
        grad.slice_mut(ndarray::s![..p]).assign(&g);
        grad[p] = gb;
        let step = solve_spd(&h, &grad)
            .ok_or_else(|| Error::Degenerate("discriminator Hessian is singular".into()))?;
        model
            .coef
            .scaled_add(-cfg.lr, &step.slice(ndarray::s![..p]));
        model.bias -= cfg.lr * step[p];
        if step.iter().all(|s| s.abs() < 1e-12) {
            break;
        }
    }
    if !model.coef.iter().all(|c| c.is_finite()) || !model.bias.is_finite() {
        return Err(Error::Degenerate("discriminator diverged".into()));
    }
    Ok(model)
}

/// `η(y, v)`: probability that a row belongs to the permuted copy `D′`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub n_classes: usize,
    pub degree: usize,
    pub model: LogisticModel,
}

impl Discriminator {
    pub fn eta(&self, y: &[usize], v: ArrayView2<f64>) -> Array1<f64> {
        let x = design(y, v, self.n_classes, self.degree);
        self.model.predict_proba(x.view())
    }
}

fn design(y: &[usize], v: ArrayView2<f64>, n_classes: usize, degree: usize) -> Array2<f64> {
    let k = v.ncols() * degree;
    let width = n_classes + k + n_classes * k;
    let mut x = Array2::zeros((y.len(), width));
    for (i, &yi) in y.iter().enumerate() {
        let row = v.row(i).to_vec();
        let f = discriminator_features(yi, &row, n_classes, degree);
        x.row_mut(i).assign(&Array1::from(f));
    }
    x
}

/// Fits `η` on `D = {(y_i, v_i)}` (target 0) against `D′ = {(y′_i, v_i)}`
/// (target 1).
pub fn fit_eta(
    v: ArrayView2<f64>,
    y: &[usize],
    y_perm: &[usize],
    n_classes: usize,
    cfg: &DiscriminatorConfig,
) -> Result<Discriminator> {
    let n = v.nrows();
    if y.len() != n || y_perm.len() != n {
        return Err(Error::Dimension {
            what: "discriminator rows",
            expected: n,
            actual: y.len().min(y_perm.len()),
        });
    }
    if n == 0 {
        return Err(Error::Degenerate("no rows to discriminate".into()));
    }
    let labels: Vec<usize> = y.iter().chain(y_perm).copied().collect();
    let v2 = ndarray::concatenate(Axis(0), &[v, v]).expect("same width");
    let x = design(&labels, v2.view(), n_classes, cfg.degree);
    let t: Vec<f64> = (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect();
    let model = fit_logistic(x.view(), &t, cfg)?;
    Ok(Discriminator {
        n_classes,
        degree: cfg.degree,
        model,
    })
}

/// Stratified fold assignment: within each class, a seeded shuffle dealt
/// round-robin over the folds.
pub fn stratified_folds(y: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in y.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut fold = vec![0; y.len()];
    let mut offset = 0;
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            fold[i] = (offset + pos) % k;
        }
        offset += idx.len();
    }
    fold
}

/// Cross-fitted odds for one permutation: `(clipped odds, clip events)`.
fn one_permutation(
    v: ArrayView2<f64>,
    y: &[usize],
    n_classes: usize,
    cfg: &PermWeightConfig,
    index: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = y.len();
    let perm_seed = derive_seed(cfg.seed, 2 * index as u64);
    let fold_seed = derive_seed(cfg.seed, 2 * index as u64 + 1);
    let y_perm = permute_labels(y, perm_seed);
    let folds = stratified_folds(y, cfg.k_folds, fold_seed);
    let mut u = vec![0.0; n];
    let mut clips = 0;
    let (lo, hi) = (1.0 / cfg.clip_max, cfg.clip_max);
    for f in 0..cfg.k_folds {
        let held: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
        let fit_idx: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
        if held.is_empty() || fit_idx.len() < 2 {
            return Err(Error::Degenerate(format!(
                "fold {f} too small: {} held out, {} to fit",
                held.len(),
                fit_idx.len()
            )));
        }
        let pick = |idx: &[usize], src: &[usize]| idx.iter().map(|&i| src[i]).collect::<Vec<_>>();
        let disc = fit_eta(
            v.select(Axis(0), &fit_idx).view(),
            &pick(&fit_idx, y),
            &pick(&fit_idx, &y_perm),
            n_classes,
            &cfg.classifier,
        )?;
        let eta = disc.eta(&pick(&held, y), v.select(Axis(0), &held).view());
        for (&i, &e) in held.iter().zip(eta.iter()) {
            let odds = e / (1.0 - e);
            let clipped = if odds.is_nan() {
                return Err(Error::Degenerate(format!("non-finite η for sample {i}")));
            } else {
                odds.clamp(lo, hi)
            };
            if clipped != odds {
                clips += 1;
            }
            u[i] = clipped;
        }
    }
    Ok((u, clips))
}

/// Permutation weights for every row of `aux`.
///
/// Permutations run in parallel; each draws from its own seed stream and the
/// reduction is in permutation order, so the result matches a sequential run
/// bit for bit.
pub fn compute_weights(
    aux: &AuxLabels,
    y: &[usize],
    n_classes: usize,
    cfg: &PermWeightConfig,
) -> Result<SampleWeights> {
    cfg.validate()?;
    let n = aux.n_samples();
    if y.len() != n {
        return Err(Error::Dimension {
            what: "labels for auxiliary rows",
            expected: n,
            actual: y.len(),
        });
    }
    if n < cfg.k_folds {
        return Err(Error::Degenerate(format!(
            "{n} samples cannot fill {} folds",
            cfg.k_folds
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::config("labels", format!("class {bad} out of range")));
    }
    let v = aux.values.view();
    let runs: Vec<Result<(Vec<f64>, usize)>> = (0..cfg.n_permutations)
        .into_par_iter()
        .map(|p| one_permutation(v, y, n_classes, cfg, p))
        .collect();
    let mut u = vec![0.0; n];
    let mut clip_events = 0;
    for run in runs {
        let (odds, clips) = run?;
        clip_events += clips;
        for (acc, o) in u.iter_mut().zip(odds) {
            *acc += o;
        }
    }
    let np = cfg.n_permutations as f64;
    u.iter_mut().for_each(|x| *x /= np);
    if cfg.normalize_mean_one {
        normalize_mean_one(&mut u);
    }
    Ok(SampleWeights {
        u,
        provenance: Provenance {
            method: WeightMethod::Permutation,
            k_folds: cfg.k_folds,
            n_permutations: cfg.n_permutations,
            seed: cfg.seed,
            clip_events,
        },
        normalized: cfg.normalize_mean_one,
    })
}

fn normalize_mean_one(u: &mut [f64]) {
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    if mean > 0.0 {
        u.iter_mut().for_each(|x| *x /= mean);
    }
}

/// Closed-form weights `p̂(y) p̂(v) / p̂(y, v)` for a discrete `v`.
pub fn analytic_weights(v: &[usize], y: &[usize]) -> Result<SampleWeights> {
    if v.len() != y.len() {
        return Err(Error::Dimension {
            what: "discrete auxiliary labels",
            expected: y.len(),
            actual: v.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::Degenerate("no samples".into()));
    }
    let n = y.len() as f64;
    let mut ny: BTreeMap<usize, f64> = BTreeMap::new();
    let mut nv: BTreeMap<usize, f64> = BTreeMap::new();
    let mut nyv: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&yi, &vi) in y.iter().zip(v) {
        *ny.entry(yi).or_default() += 1.0;
        *nv.entry(vi).or_default() += 1.0;
        *nyv.entry((yi, vi)).or_default() += 1.0;
    }
    for &yc in ny.keys() {
        for &vc in nv.keys() {
            if !nyv.contains_key(&(yc, vc)) {
                return Err(Error::EmptyCell { y: yc, v: vc });
            }
        }
    }
    let u = y
        .iter()
        .zip(v)
        .map(|(yi, vi)| ny[yi] * nv[vi] / (n * nyv[&(*yi, *vi)]))
        .collect();
    Ok(SampleWeights {
        u,
        provenance: Provenance {
            method: WeightMethod::Analytic,
            k_folds: 0,
            n_permutations: 0,
            seed: 0,
            clip_events: 0,
        },
        normalized: false,
    })
}

/// Encodes each row of `V̂` as an integer by thresholding every column.
pub fn discretize(aux: &AuxLabels, threshold: f64) -> Vec<usize> {
    aux.values
        .rows()
        .into_iter()
        .map(|r| {
            r.iter().enumerate().fold(0usize, |code, (j, &x)| {
                code | (usize::from(x > threshold) << j)
            })
        })
        .collect()
}

/// Fixed-width histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub bins: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `n_bins` equal bins over `[lo, hi]`; the last bin is closed.
    pub fn build(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Self {
        let n_bins = n_bins.max(1);
        let width = if hi > lo {
            (hi - lo) / n_bins as f64
        } else {
            1.0
        };
        let bins = (0..=n_bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; n_bins];
        for &v in values {
            if !(v >= lo && v <= hi) {
                continue;
            }
            let b = (((v - lo) / width) as usize).min(n_bins - 1);
            counts[b] += 1;
        }
        Histogram { bins, counts }
    }

    /// Histogram over the observed range of `values`.
    pub fn auto(values: &[f64], n_bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return Self::build(&[], n_bins, 0.0, 1.0);
        }
        let hi = if hi > lo { hi } else { lo + 1.0 };
        Self::build(values, n_bins, lo, hi)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.bins[i], self.bins[i + 1], c));
        }
        out
    }

    pub fn to_text(&self, width: usize) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let bar = "#".repeat(c * width / max);
            out.push_str(&format!(
                "[{:>9.4}, {:>9.4}) {:>7} {}\n",
                self.bins[i],
                self.bins[i + 1],
                c,
                bar
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn aux_from(v: Vec<f64>) -> AuxLabels {
        let n = v.len();
        AuxLabels {
            values: Array2::from_shape_vec((n, 1), v).unwrap(),
            concept_order: vec![0],
            sample_order: (0..n).collect(),
        }
    }

    /// `(y, v)` rows repeated per cell count, order `(0,0), (0,1), (1,0), (1,1)`.
    fn cells(counts: [usize; 4], scale: usize) -> (Vec<usize>, Vec<usize>) {
        let mut y = Vec::new();
        let mut v = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n * scale {
                y.push(c / 2);
                v.push(c % 2);
            }
        }
        (y, v)
    }

    #[test]
    fn feature_map_layout() {
        let f = discriminator_features(1, &[0.5, 2.0], 2, 2);
        // [one-hot(y) | v, v² | block for y = 0 | block for y = 1]
        assert_eq!(
            f,
            vec![0.0, 1.0, 0.5, 2.0, 0.25, 4.0, 0.0, 0.0, 0.0, 0.0, 0.5, 2.0, 0.25, 4.0]
        );
        assert_eq!(discriminator_features(0, &[3.0], 2, 1), vec![1.0, 0.0, 3.0, 3.0, 0.0]);
    }

    proptest! {
        #[test]
        fn permutation_preserves_multiset(y in prop::collection::vec(0usize..4, 1..200), seed in any::<u64>()) {
            let mut p = permute_labels(&y, seed);
            prop_assert_eq!(&p, &permute_labels(&y, seed));
            let mut s = y.clone();
            s.sort();
            p.sort();
            prop_assert_eq!(s, p);
        }
    }

    #[test]
    fn constant_labels_are_fixed_by_permutation() {
        assert_eq!(permute_labels(&[2; 17], 5), vec![2; 17]);
    }

    #[test]
    fn analytic_independent_counts_are_one() {
        let (y, v) = cells([25, 25, 25, 25], 1);
        let w = analytic_weights(&v, &y).unwrap();
        assert!(w.u.iter().all(|&u| (u - 1.0).abs() < 1e-15));
    }

    #[test]
    fn analytic_confounded_counts() {
        let (y, v) = cells([40, 10, 10, 40], 1);
        let w = analytic_weights(&v, &y).unwrap();
        let means = w.group_means(&y.iter().zip(&v).map(|(a, b)| (*a, *b)).collect::<Vec<_>>());
        assert!((means[&(0, 0)] - 0.625).abs() < 1e-12);
        assert!((means[&(0, 1)] - 2.5).abs() < 1e-12);
        assert!((means[&(1, 0)] - 2.5).abs() < 1e-12);
        assert!((means[&(1, 1)] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn analytic_single_value_is_one() {
        let y = vec![0, 1, 1, 0, 1];
        let w = analytic_weights(&[3; 5], &y).unwrap();
        assert!(w.u.iter().all(|&u| u == 1.0));
    }

    #[test]
    fn analytic_empty_cell_is_named() {
        let (y, v) = cells([10, 0, 5, 5], 1);
        assert!(matches!(
            analytic_weights(&v, &y),
            Err(Error::EmptyCell { y: 0, v: 1 })
        ));
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let t: Vec<f64> = (0..40).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
        let model = LogisticModel {
            mean: Array1::zeros(3),
            scale: Array1::ones(3),
            coef: Array1::from(vec![0.3, -0.7, 0.2]),
            bias: 0.1,
            l2: 0.05,
        };
        let (_, g, gb) = model.loss_and_gradient(x.view(), &t);
        let h = 1e-6;
        for j in 0..3 {
            let mut plus = model.clone();
            plus.coef[j] += h;
            let mut minus = model.clone();
            minus.coef[j] -= h;
            let fd = (plus.loss_and_gradient(x.view(), &t).0
                - minus.loss_and_gradient(x.view(), &t).0)
                / (2.0 * h);
            assert!(
                (fd - g[j]).abs() <= 1e-4 * fd.abs().max(1e-8),
                "coef {j}: {fd} vs {}",
                g[j]
            );
        }
        let mut plus = model.clone();
        plus.bias += h;
        let mut minus = model.clone();
        minus.bias -= h;
        let fd = (plus.loss_and_gradient(x.view(), &t).0 - minus.loss_and_gradient(x.view(), &t).0)
            / (2.0 * h);
        assert!((fd - gb).abs() <= 1e-4 * fd.abs().max(1e-8));
    }

    #[test]
    fn single_class_task_is_degenerate() {
        let x = Array2::zeros((4, 2));
        assert!(matches!(
            fit_logistic(x.view(), &[1.0; 4], &DiscriminatorConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn confounded_eta_matches_bayes_optimal() {
        // v = y exactly: D only holds (0,0) and (1,1); D′ holds all four
        // cells at p(y)p(v) = 1/4. Bayes-optimal η per cell is
        // n_D′(cell) / (n_D(cell) + n_D′(cell)), counted on the same rows.
        let n = 400;
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let v = Array2::from_shape_fn((n, 1), |(i, _)| (i % 2) as f64);
        let y_perm = permute_labels(&y, 9);
        let cfg = DiscriminatorConfig {
            l2: 0.0,
            ..Default::default()
        };
        let disc = fit_eta(v.view(), &y, &y_perm, 2, &cfg).unwrap();
        let mut count_d = [[0usize; 2]; 2];
        let mut count_p = [[0usize; 2]; 2];
        for i in 0..n {
            count_d[y[i]][i % 2] += 1;
            count_p[y_perm[i]][i % 2] += 1;
        }
        for yc in 0..2 {
            for vc in 0..2 {
                let denom = count_d[yc][vc] + count_p[yc][vc];
                let bayes = count_p[yc][vc] as f64 / denom as f64;
                let eta = disc.eta(&[yc], Array2::from_elem((1, 1), vc as f64).view())[0];
                assert!(
                    (eta - bayes).abs() < 1e-3,
                    "cell ({yc},{vc}): {eta} vs {bayes}"
                );
            }
        }
        // Aligned pairs in D look confounded: η ≈ 1/3 < 1/2, and the
        // discriminator ranks D′ rows above D rows.
        let eta_d = disc.eta(&y, v.view());
        let eta_p = disc.eta(&y_perm, v.view());
        assert!(eta_d.iter().all(|&e| e < 0.4));
        let mut wins = 0.0;
        for a in eta_p.iter() {
            for b in eta_d.iter() {
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        assert!(wins / (n * n) as f64 > 0.5);
    }

    #[test]
    fn discrete_oracle_agreement() {
        let (y, v) = cells([40, 10, 10, 40], 10);
        let aux = aux_from(v.iter().map(|&x| x as f64).collect());
        let w = compute_weights(&aux, &y, 2, &PermWeightConfig::default()).unwrap();
        let keys: Vec<(usize, usize)> = y.iter().zip(&v).map(|(a, b)| (*a, *b)).collect();
        let means = w.group_means(&keys);
        let expect = analytic_weights(&v, &y).unwrap().group_means(&keys);
        for (k, e) in &expect {
            let rel = (means[k] - e).abs() / e;
            assert!(rel < 0.15, "cell {k:?}: {} vs {e}", means[k]);
        }
        assert!((w.mean() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn parallel_equals_sequential() {
        let (y, v) = cells([40, 10, 10, 40], 3);
        let aux = aux_from(v.iter().map(|&x| x as f64 * 0.8 + 0.1).collect());
        let cfg = PermWeightConfig {
            n_permutations: 4,
            ..Default::default()
        };
        let par = compute_weights(&aux, &y, 2, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let seq = pool.install(|| compute_weights(&aux, &y, 2, &cfg).unwrap());
        assert_eq!(par, seq);
    }

    #[test]
    fn clip_events_are_counted_exactly() {
        let (y, v) = cells([40, 1, 1, 40], 5);
        let aux = aux_from(v.iter().map(|&x| x as f64).collect());
        let cfg = PermWeightConfig {
            clip_max: 2.0,
            normalize_mean_one: false,
            n_permutations: 3,
            ..Default::default()
        };
        let w = compute_weights(&aux, &y, 2, &cfg).unwrap();
        // Recount from the per-permutation odds.
        let mut expected = 0;
        for p in 0..3 {
            let unclipped = PermWeightConfig {
                clip_max: f64::MAX,
                ..cfg.clone()
            };
            let (odds, _) = one_permutation(aux.values.view(), &y, 2, &unclipped, p).unwrap();
            expected += odds.iter().filter(|&&o| !(0.5..=2.0).contains(&o)).count();
        }
        assert_eq!(w.provenance.clip_events, expected);
        assert!(expected > 0);
        assert!(w.u.iter().all(|&u| (0.5..=2.0).contains(&u)));
    }

    #[test]
    fn tiny_folds_are_rejected() {
        let aux = aux_from(vec![0.1, 0.9, 0.2]);
        assert!(compute_weights(&aux, &[0, 1, 0], 2, &PermWeightConfig::default()).is_err());
        let bad = PermWeightConfig {
            k_folds: 1,
            ..Default::default()
        };
        assert!(matches!(
            compute_weights(&aux, &[0, 1, 0], 2, &bad),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let y: Vec<usize> = (0..103).map(|i| usize::from(i % 10 == 0)).collect();
        let folds = stratified_folds(&y, 5, 3);
        for f in 0..5 {
            let pos = (0..103).filter(|&i| folds[i] == f && y[i] == 1).count();
            assert!((2..=3).contains(&pos));
        }
    }

    #[test]
    fn histogram_counts_everything_in_range() {
        let h = Histogram::build(&[0.0, 0.5, 1.0, 0.99, 2.0], 10, 0.0, 1.0);
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert_eq!(h.counts[9], 2);
        assert_eq!(h.bins.len(), 11);
        assert!(h.to_csv().starts_with("bin_start,bin_end,count\n"));
    }
}
