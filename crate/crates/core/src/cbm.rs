//! A toy concept bottleneck `{φ, h}`.
//!
//! The extractor maps an input to `m` sigmoid concept activations, each unit
//! reading a contiguous window of segments (its receptive field, the
//! segment-level analogue of a patch prototype). A linear head maps the
//! masked activations to class logits.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{matrix, Artifact};
use crate::synthdata::{Dataset, SegmentRole};

const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_extractor: f64,
    pub lr_head: f64,
    /// L1 penalty on the head weights.
    pub lambda_sparse: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep the extractor fixed during the joint fit and every fine-tune. The
    /// units are still learned by the probe stage, like a pretrained backbone.
    pub freeze_extractor: bool,
    /// Number of concepts `m`.
    pub n_concepts: usize,
    /// Widest receptive field, in segments.
    pub max_window: usize,
    /// Epochs of per-concept probe training before the joint fit. Each unit
    /// learns to predict the label alone, so narrow units are not starved by
    /// wide ones.
    #[serde(default)]
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr_extractor: 0.5,
            lr_head: 0.5,
            lambda_sparse: 0.02,
            batch_size: 64,
            seed: 0,
            freeze_extractor: false,
            n_concepts: 16,
            max_window: 2,
            pretrain_epochs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr_extractor > 0.0 && self.lr_extractor.is_finite()) {
            return Err(Error::config("lr_extractor", "must be > 0"));
        }
        if !(self.lr_head > 0.0 && self.lr_head.is_finite()) {
            return Err(Error::config("lr_head", "must be > 0"));
        }
        if !(self.lambda_sparse >= 0.0 && self.lambda_sparse.is_finite()) {
            return Err(Error::config("lambda_sparse", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.n_concepts < 2 {
            return Err(Error::config("n_concepts", "need at least 2 concepts"));
        }
        if self.max_window == 0 {
            return Err(Error::config("max_window", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Segments this concept's extractor unit reads.
    pub segments: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_concepts: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub segment_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBottleneck {
    pub dims: ModelDims,
    #[serde(with = "matrix")]
    pub extractor_weights: Array2<f64>,
    pub extractor_bias: Array1<f64>,
    #[serde(with = "matrix")]
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub active_mask: Vec<bool>,
    pub concept_meta: Vec<ConceptMeta>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub parent_run: Option<String>,
}

impl Artifact for ConceptBottleneck {
    const VERSION: &'static str = "cbdebug-model-1";
}

/// Receptive fields for `m` concepts over `g` segments: every circular
/// window of width 1, then width 2, ... up to `max_window`, assigned
/// round-robin.
pub fn receptive_fields(m: usize, g: usize, max_window: usize) -> Vec<Vec<usize>> {
    let widths = max_window.min(g);
    let windows: Vec<Vec<usize>> = (1..=widths)
        .flat_map(|w| (0..g).map(move |start| (0..w).map(|k| (start + k) % g).collect()))
        .collect();
    (0..m).map(|c| windows[c % windows.len()].clone()).collect()
}

impl ConceptBottleneck {
    /// Fresh model with seeded Gaussian weights inside each receptive field.
    pub fn init(
        n_features: usize,
        n_classes: usize,
        segment_dim: usize,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if segment_dim == 0 || !n_features.is_multiple_of(segment_dim) {
            return Err(Error::config(
                "segment_dim",
                format!("{n_features} features do not split into segments of {segment_dim}"),
            ));
        }
        let m = cfg.n_concepts;
        let g = n_features / segment_dim;
        let fields = receptive_fields(m, g, cfg.max_window);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut extractor_weights = Array2::zeros((m, n_features));
        for (c, field) in fields.iter().enumerate() {
            for &seg in field {
                for j in seg * segment_dim..(seg + 1) * segment_dim {
                    extractor_weights[[c, j]] = normal.sample(&mut rng);
                }
            }
        }
        let head_weights = Array2::from_shape_fn((n_classes, m), |_| normal.sample(&mut rng));
        let concept_meta = fields
            .into_iter()
            .enumerate()
            .map(|(id, segments)| ConceptMeta {
                id,
                name: None,
                segments,
            })
            .collect();
        Ok(ConceptBottleneck {
            dims: ModelDims {
                n_concepts: m,
                n_features,
                n_classes,
                segment_dim,
            },
            extractor_weights,
            extractor_bias: Array1::zeros(m),
            head_weights,
            head_bias: Array1::zeros(n_classes),
            active_mask: vec![true; m],
            concept_meta,
            train_config: Some(cfg.clone()),
            parent_run: None,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.dims.n_concepts
    }

    pub fn n_classes(&self) -> usize {
        self.dims.n_classes
    }

    pub fn n_segments(&self) -> usize {
        self.dims.n_features / self.dims.segment_dim
    }

    pub fn concept_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.concept_meta.iter().map(|c| c.id)
    }

    pub fn check_concept(&self, id: usize) -> Result<()> {
        if id < self.n_concepts() {
            Ok(())
        } else {
            Err(Error::UnknownConcept(id))
        }
    }

    /// 0/1 matrix with ones on each concept's receptive field.
    fn field_mask(&self) -> Array2<f64> {
        let d = self.dims.segment_dim;
        let mut mask = Array2::zeros(self.extractor_weights.raw_dim());
        for (c, meta) in self.concept_meta.iter().enumerate() {
            for &seg in &meta.segments {
                mask.slice_mut(s![c, seg * d..(seg + 1) * d]).fill(1.0);
            }
        }
        mask
    }

    fn check_features(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dims.n_features {
            return Err(Error::Dimension {
                what: "feature columns",
                expected: self.dims.n_features,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let ModelDims {
            n_concepts: m,
            n_features: p,
            n_classes: l,
            ..
        } = self.dims;
        let checks = [
            ("extractor_weights rows", m, self.extractor_weights.nrows()),
            (
                "extractor_weights columns",
                p,
                self.extractor_weights.ncols(),
            ),
            ("extractor_bias", m, self.extractor_bias.len()),
            ("head_weights rows", l, self.head_weights.nrows()),
            ("head_weights columns", m, self.head_weights.ncols()),
            ("head_bias", l, self.head_bias.len()),
            ("active_mask", m, self.active_mask.len()),
            ("concept_meta", m, self.concept_meta.len()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(Error::Dimension {
                    what,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Artifact::save(self, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let model = <Self as Artifact>::load(path.as_ref())?;
        model.validate().map_err(|e| Error::Schema {
            path: path.as_ref().to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(model)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn raw_activations(model: &ConceptBottleneck, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut a = x.dot(&model.extractor_weights.t());
    a += &model.extractor_bias;
    a.mapv_inplace(sigmoid);
    a
}

/// `N × m` concept activations; rows follow the input order. Masking does not
/// affect these values.
pub fn concept_activations(model: &ConceptBottleneck, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    model.check_features(&x)?;
    Ok(raw_activations(model, &x))
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn head_logits(model: &ConceptBottleneck, acts: &ArrayView2<f64>) -> Array2<f64> {
    let n = acts.nrows();
    let mut z = Array2::zeros((n, model.n_classes()));
    for (i, mut zi) in z.rows_mut().into_iter().enumerate() {
        for (k, zk) in zi.iter_mut().enumerate() {
            let mut acc = model.head_bias[k];
            for c in 0..model.n_concepts() {
                // Inactive concepts are skipped outright, so their activation
                // value can never reach the output.
                if model.active_mask[c] {
                    acc += model.head_weights[[k, c]] * acts[[i, c]];
                }
            }
            *zk = acc;
        }
    }
    z
}

fn argmax_lowest(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Class probabilities and predicted labels from precomputed activations.
pub fn predict_from_activations(
    model: &ConceptBottleneck,
    acts: ArrayView2<f64>,
) -> Result<(Vec<usize>, Array2<f64>)> {
    if acts.ncols() != model.n_concepts() {
        return Err(Error::Dimension {
            what: "activation columns",
            expected: model.n_concepts(),
            actual: acts.ncols(),
        });
    }
    let mut scores = head_logits(model, &acts);
    softmax_rows(&mut scores);
    let labels = scores.rows().into_iter().map(argmax_lowest).collect();
    Ok((labels, scores))
}

pub fn predict(model: &ConceptBottleneck, x: ArrayView2<f64>) -> Result<(Vec<usize>, Array2<f64>)> {
    let acts = concept_activations(model, x)?;
    predict_from_activations(model, acts.view())
}

/// Parameter-shaped gradient (or update) of a [`ConceptBottleneck`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub extractor_weights: Array2<f64>,
    pub extractor_bias: Array1<f64>,
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// Generalized cross-entropy `(1 − p_y^q) / q`.
    GeneralizedCrossEntropy {
        q: f64,
    },
}

/// Penalty `λ · mean φ_c(x)` over forget-set rows and the listed concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetTerm {
    pub features: Array2<f64>,
    pub concepts: Vec<usize>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: LossKind,
    pub lambda_sparse: f64,
    pub forget: Option<ForgetTerm>,
}

impl Objective {
    pub fn cross_entropy(lambda_sparse: f64) -> Self {
        Objective {
            loss: LossKind::CrossEntropy,
            lambda_sparse,
            forget: None,
        }
    }
}

/// Objective value and its gradient on one batch. The classification part is
/// `Σ w_i ℓ_i / Σ w_i`; omitted weights count as 1.
pub fn loss_and_gradient(
    model: &ConceptBottleneck,
    x: ArrayView2<f64>,
    y: &[usize],
    weights: Option<&[f64]>,
    objective: &Objective,
) -> Result<(f64, Gradients)> {
    model.check_features(&x)?;
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Dimension {
            what: "labels",
            expected: n,
            actual: y.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Dimension {
                what: "sample weights",
                expected: n,
                actual: w.len(),
            });
        }
    }
    let l = model.n_classes();
    let m = model.n_concepts();
    let mask: Array1<f64> = model
        .active_mask
        .iter()
        .map(|&on| if on { 1.0 } else { 0.0 })
        .collect();

    let phi = raw_activations(model, &x);
    let phi_masked = &phi * &mask;
    let mut probs = head_logits(model, &phi.view());
    softmax_rows(&mut probs);

    let total_w: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => n as f64,
    };
    let mut loss = 0.0;
    let mut dz = Array2::<f64>::zeros((n, l));
    if total_w > 0.0 {
        for i in 0..n {
            let wi = weights.map_or(1.0, |w| w[i]);
            let py = probs[[i, y[i]]];
            let (li, scale) = match objective.loss {
                LossKind::CrossEntropy => {
                    // f64::max drops NaN, which would hide a diverged batch.
                    let floor = if py.is_nan() {
                        py
                    } else {
                        py.max(f64::MIN_POSITIVE)
                    };
                    (-floor.ln(), 1.0)
                }
                LossKind::GeneralizedCrossEntropy { q } => {
                    let pq = py.powf(q);
                    ((1.0 - pq) / q, pq)
                }
            };
            loss += wi * li;
            let coef = wi * scale / total_w;
            for k in 0..l {
                let target = if k == y[i] { 1.0 } else { 0.0 };
                dz[[i, k]] = coef * (probs[[i, k]] - target);
            }
        }
        loss /= total_w;
    }

    let mut head_weights = dz.t().dot(&phi_masked);
    let head_bias = dz.sum_axis(Axis(0));
    if objective.lambda_sparse > 0.0 {
        loss += objective.lambda_sparse * model.head_weights.iter().map(|v| v.abs()).sum::<f64>();
        Zip::from(&mut head_weights)
            .and(&model.head_weights)
            .for_each(|g, &h| *g += objective.lambda_sparse * sign(h));
    }

    let mut d_pre = dz.dot(&model.head_weights) * &mask;
    Zip::from(&mut d_pre)
        .and(&phi)
        .for_each(|g, &p| *g *= p * (1.0 - p));
    let mut extractor_weights = d_pre.t().dot(&x);
    let mut extractor_bias = d_pre.sum_axis(Axis(0));

    if let Some(f) = &objective.forget {
        if f.features.nrows() > 0 && !f.concepts.is_empty() && f.lambda != 0.0 {
            for &c in &f.concepts {
                model.check_concept(c)?;
            }
            let fx = f.features.view();
            model.check_features(&fx)?;
            let fphi = raw_activations(model, &fx);
            let scale = f.lambda / (fx.nrows() * f.concepts.len()) as f64;
            for &c in &f.concepts {
                let col = fphi.column(c);
                loss += scale * col.sum();
                let dpre: Array1<f64> = col.mapv(|p| scale * p * (1.0 - p));
                let gw = dpre.dot(&fx);
                let mut row = extractor_weights.row_mut(c);
                row += &gw;
                extractor_bias[c] += dpre.sum();
            }
        }
    }

    extractor_weights *= &model.field_mask();
    debug_assert_eq!(extractor_bias.len(), m);
    Ok((
        loss,
        Gradients {
            extractor_weights,
            extractor_bias,
            head_weights,
            head_bias,
        },
    ))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn soft_threshold(h: &mut Array2<f64>, tau: f64) {
    h.mapv_inplace(|v| sign(v) * (v.abs() - tau).max(0.0));
}

/// One plain SGD step; the extractor is skipped when frozen.
pub(crate) fn apply_gradients(model: &mut ConceptBottleneck, grad: &Gradients, cfg: &TrainConfig) {
    model
        .head_weights
        .scaled_add(-cfg.lr_head, &grad.head_weights);
    model.head_bias.scaled_add(-cfg.lr_head, &grad.head_bias);
    if !cfg.freeze_extractor {
        model
            .extractor_weights
            .scaled_add(-cfg.lr_extractor, &grad.extractor_weights);
        model
            .extractor_bias
            .scaled_add(-cfg.lr_extractor, &grad.extractor_bias);
    }
}

/// Soft-threshold of the head and re-zeroing of removed columns.
pub(crate) fn end_epoch(model: &mut ConceptBottleneck, cfg: &TrainConfig, lambda_sparse: f64) {
    if lambda_sparse > 0.0 {
        soft_threshold(&mut model.head_weights, cfg.lr_head * lambda_sparse);
    }
    for c in 0..model.n_concepts() {
        if !model.active_mask[c] {
            model.head_weights.column_mut(c).fill(0.0);
        }
    }
}

/// Per-epoch hook: `(epoch, mean batch loss)`.
pub type EpochHook<'a> = dyn FnMut(usize, f64) + 'a;

/// Mini-batch SGD on `model` in place.
///
/// The head gets a sign-subgradient L1 step every batch and a soft-threshold
/// by `lr_head · lambda_sparse` after every epoch, which produces exact zeros.
pub fn fit(
    model: &mut ConceptBottleneck,
    x: ArrayView2<f64>,
    y: &[usize],
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
    objective: &Objective,
    mut on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<()> {
    cfg.validate()?;
    model.check_features(&x)?;
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Dimension {
            what: "labels",
            expected: n,
            actual: y.len(),
        });
    }
    if let Some(w) = weights {
        validate_weights(w, n)?;
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= model.n_classes()) {
        return Err(Error::config("labels", format!("class {bad} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let wb: Option<Vec<f64>> = weights.map(|w| chunk.iter().map(|&i| w[i]).collect());
            let (loss, grad) = loss_and_gradient(model, xb.view(), &yb, wb.as_deref(), objective)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += loss;
            batches += 1;
            apply_gradients(model, &grad, cfg);
        }
        end_epoch(model, cfg, objective.lambda_sparse);
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(epoch, epoch_loss / batches.max(1) as f64);
        }
    }
    model.train_config = Some(cfg.clone());
    Ok(())
}

pub(crate) fn validate_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Weights(format!(
            "expected {n} weights, got {}",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Weights("weights must be finite and >= 0".into()));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Weights("weights must have a positive sum".into()));
    }
    Ok(())
}

/// Trains every concept unit against its own private linear probe,
/// `softmax(q_c φ_c + r_c)`, leaving the head untouched.
pub fn pretrain_concepts(
    model: &mut ConceptBottleneck,
    x: ArrayView2<f64>,
    y: &[usize],
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    model.check_features(&x)?;
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Dimension {
            what: "labels",
            expected: n,
            actual: y.len(),
        });
    }
    if let Some(w) = weights {
        validate_weights(w, n)?;
    }
    let l = model.n_classes();
    let m = model.n_concepts();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut q = Array2::from_shape_fn((l, m), |_| normal.sample(&mut rng));
    let mut r = Array2::<f64>::zeros((l, m));
    let field = model.field_mask();
    let mut order: Vec<usize> = (0..n).collect();
    let mut p = vec![0.0; l];
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let phi = raw_activations(model, &xb.view());
            let total: f64 =
                weights.map_or(chunk.len() as f64, |w| chunk.iter().map(|&i| w[i]).sum());
            if total <= 0.0 {
                continue;
            }
            let mut gq = Array2::<f64>::zeros((l, m));
            let mut gr = Array2::<f64>::zeros((l, m));
            let mut d_pre = Array2::<f64>::zeros((chunk.len(), m));
            for (b, &i) in chunk.iter().enumerate() {
                let wi = weights.map_or(1.0, |w| w[i]) / total;
                for c in 0..m {
                    let f = phi[[b, c]];
                    for k in 0..l {
                        p[k] = q[[k, c]] * f + r[[k, c]];
                    }
                    let max = p.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    let sum: f64 = p
                        .iter_mut()
                        .map(|v| {
                            *v = (*v - max).exp();
                            *v
                        })
                        .sum();
                    let mut dphi = 0.0;
                    for k in 0..l {
                        let target = if k == y[i] { 1.0 } else { 0.0 };
                        let dz = wi * (p[k] / sum - target);
                        gq[[k, c]] += dz * f;
                        gr[[k, c]] += dz;
                        dphi += dz * q[[k, c]];
                    }
                    d_pre[[b, c]] = dphi * f * (1.0 - f);
                }
            }
            q.scaled_add(-cfg.lr_head, &gq);
            r.scaled_add(-cfg.lr_head, &gr);
            let gw = d_pre.t().dot(&xb) * &field;
            model.extractor_weights.scaled_add(-cfg.lr_extractor, &gw);
            model
                .extractor_bias
                .scaled_add(-cfg.lr_extractor, &d_pre.sum_axis(Axis(0)));
        }
    }
    Ok(())
}

/// Display name built from a receptive field, e.g. `"core segment 0 and
/// background segment 1"`.
pub fn field_name(segments: &[usize], roles: &[SegmentRole]) -> String {
    segments
        .iter()
        .map(|&s| match roles.get(s) {
            Some(SegmentRole::Core) => format!("core segment {s}"),
            Some(SegmentRole::Background) => format!("background segment {s}"),
            None => format!("segment {s}"),
        })
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Fills every missing concept name from its receptive field.
pub fn name_concepts(model: &mut ConceptBottleneck, roles: &[SegmentRole]) {
    for meta in &mut model.concept_meta {
        if meta.name.is_none() {
            meta.name = Some(field_name(&meta.segments, roles));
        }
    }
}

/// Trains a fresh bottleneck on the training split of `ds`.
///
/// `weights`, when given, align with `ds.train_indices()`.
pub fn train(
    ds: &Dataset,
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<ConceptBottleneck> {
    train_with_hook(ds, weights, cfg, None)
}

/// [`train`] with a per-epoch hook on the joint fit.
pub fn train_with_hook(
    ds: &Dataset,
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
    on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<ConceptBottleneck> {
    let mut model =
        ConceptBottleneck::init(ds.feature_dim(), ds.n_classes(), ds.segment_dim(), cfg)?;
    name_concepts(&mut model, &ds.segment_roles);
    let idx = ds.train_indices();
    let x = ds.rows(&idx);
    let y = ds.labels_at(&idx);
    pretrain_concepts(&mut model, x.view(), &y, weights, cfg)?;
    fit(
        &mut model,
        x.view(),
        &y,
        weights,
        cfg,
        &Objective::cross_entropy(cfg.lambda_sparse),
        on_epoch,
    )?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub sample_id: usize,
    pub activation: f64,
    /// Contribution of each segment to the concept's pre-activation.
    pub segment_attribution: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptExplanation {
    pub concept_id: usize,
    pub top_exemplars: Vec<Exemplar>,
}

impl ConceptExplanation {
    /// Mean `|attribution|` of every segment over the exemplars.
    pub fn mean_abs_attribution(&self) -> Vec<f64> {
        let g = self
            .top_exemplars
            .first()
            .map_or(0, |e| e.segment_attribution.len());
        let mut acc = vec![0.0; g];
        for e in &self.top_exemplars {
            for (a, v) in acc.iter_mut().zip(&e.segment_attribution) {
                *a += v.abs();
            }
        }
        let k = self.top_exemplars.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }

    /// Fraction of mean `|attribution|` that falls on background segments.
    pub fn background_share(&self, roles: &[SegmentRole]) -> f64 {
        let attr = self.mean_abs_attribution();
        let total: f64 = attr.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let bg: f64 = attr
            .iter()
            .zip(roles)
            .filter(|(_, r)| **r == SegmentRole::Background)
            .map(|(a, _)| a)
            .sum();
        bg / total
    }

    /// Segment with the largest mean `|attribution|` (lowest index on ties).
    pub fn dominant_segment(&self) -> Option<usize> {
        let attr = self.mean_abs_attribution();
        let mut best: Option<usize> = None;
        for (j, &v) in attr.iter().enumerate() {
            if best.is_none_or(|b| v > attr[b]) {
                best = Some(j);
            }
        }
        best
    }
}

/// Per-segment attribution `Σ_{dims in j} w_c ⊙ x` of one sample.
pub fn segment_attribution(
    model: &ConceptBottleneck,
    concept: usize,
    x: ndarray::ArrayView1<f64>,
) -> Vec<f64> {
    let d = model.dims.segment_dim;
    let w = model.extractor_weights.row(concept);
    (0..model.n_segments())
        .map(|j| {
            w.slice(s![j * d..(j + 1) * d])
                .dot(&x.slice(s![j * d..(j + 1) * d]))
        })
        .collect()
}

/// The `k` training samples that activate `concept_id` most, ties broken by
/// sample index.
pub fn explain_concept(
    model: &ConceptBottleneck,
    ds: &Dataset,
    concept_id: usize,
    k: usize,
) -> Result<ConceptExplanation> {
    model.check_concept(concept_id)?;
    let idx = ds.train_indices();
    let x = ds.rows(&idx);
    model.check_features(&x.view())?;
    let pre = x.dot(&model.extractor_weights.row(concept_id)) + model.extractor_bias[concept_id];
    // Ranked on the pre-activation, which keeps a strict order where the
    // sigmoid saturates.
    let mut ranked: Vec<(usize, f64)> = idx.iter().copied().zip(pre.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top_exemplars = ranked
        .into_iter()
        .take(k)
        .map(|(i, z)| Exemplar {
            sample_id: i,
            activation: sigmoid(z),
            segment_attribution: segment_attribution(model, concept_id, ds.row(i)),
        })
        .collect();
    Ok(ConceptExplanation {
        concept_id,
        top_exemplars,
    })
}

pub fn explain_all(
    model: &ConceptBottleneck,
    ds: &Dataset,
    k: usize,
) -> Result<Vec<ConceptExplanation>> {
    (0..model.n_concepts())
        .map(|c| explain_concept(model, ds, c, k))
        .collect()
}

/// Zeroes the head columns of `ids` and clears their mask bits.
pub fn remove_concepts(
    model: &ConceptBottleneck,
    ids: impl IntoIterator<Item = usize>,
) -> Result<ConceptBottleneck> {
    let mut out = model.clone();
    for c in ids {
        out.check_concept(c)?;
        out.head_weights.column_mut(c).fill(0.0);
        out.active_mask[c] = false;
    }
    Ok(out)
}
