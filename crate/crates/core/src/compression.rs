//! Compressed variants of an [`FcnModel`]: global L1 pruning, symmetric
//! int8 quantisation (post-training or quantisation-aware) and per-layer
//! k-means weight clustering.
//!
//! Only weight matrices are compressed; biases stay in full precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::nn::{train, train_dpsgd, DpConfig, FcnModel, TrainConfig};

pub const INT8_MAX: f64 = 127.0;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-8;

/// Shared centroid values of one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLayer {
    /// Cluster index of every weight, row-major.
    pub assignments: Vec<u16>,
    pub centroids: Vec<f64>,
}

/// What a compressed model must keep satisfying during fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CompressionConstraint {
    /// Per-layer keep masks (`true` = kept), row-major like the weights.
    PruneMask(Vec<Vec<bool>>),
    /// Per-layer clustering; `None` leaves a layer unconstrained.
    Cluster(Vec<Option<ClusterLayer>>),
    /// Per-layer symmetric int8 scales.
    FakeQuant(Vec<f64>),
}

impl CompressionConstraint {
    pub(crate) fn check_shape(&self, model: &FcnModel) -> Result<()> {
        let layers = model.layers();
        let n = match self {
            Self::PruneMask(m) => m.len(),
            Self::Cluster(c) => c.len(),
            Self::FakeQuant(s) => s.len(),
        };
        if n != layers.len() {
            return Err(Error::Shape(format!(
                "constraint covers {n} layers, model has {}",
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let size = layer.weights.as_slice().len();
            match self {
                Self::PruneMask(m) if m[l].len() != size => {
                    return Err(Error::Shape(format!("mask of layer {l} has wrong length")))
                }
                Self::Cluster(c) => {
                    if let Some(cl) = &c[l] {
                        if cl.assignments.len() != size {
                            return Err(Error::Shape(format!(
                                "assignments of layer {l} have wrong length"
                            )));
                        }
                        if cl.assignments.iter().any(|&a| a as usize >= cl.centroids.len()) {
                            return Err(Error::Input(format!(
                                "assignment of layer {l} exceeds centroid count"
                            )));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Forces `model` onto the constraint. Quantisation recomputes scales from
    /// the current weights.
    pub fn impose(&self, model: &mut FcnModel) {
        for (l, layer) in model.layers_mut().iter_mut().enumerate() {
            let w = layer.weights.as_mut_slice();
            match self {
                Self::PruneMask(masks) => {
                    for (v, &keep) in w.iter_mut().zip(&masks[l]) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
                Self::Cluster(layers) => {
                    if let Some(cl) = &layers[l] {
                        for (v, &a) in w.iter_mut().zip(&cl.assignments) {
                            *v = cl.centroids[a as usize];
                        }
                    }
                }
                Self::FakeQuant(_) => {
                    quantize_layer(w);
                }
            }
        }
    }

    /// Exact check that `model` satisfies this constraint.
    pub fn verify(&self, model: &FcnModel) -> Result<()> {
        self.check_shape(model)?;
        for (l, layer) in model.layers().iter().enumerate() {
            let w = layer.weights.as_slice();
            let violation = match self {
                Self::PruneMask(masks) => w
                    .iter()
                    .zip(&masks[l])
                    .position(|(&v, &keep)| !keep && v != 0.0),
                Self::Cluster(layers) => layers[l].as_ref().and_then(|cl| {
                    w.iter()
                        .zip(&cl.assignments)
                        .position(|(&v, &a)| v != cl.centroids[a as usize])
                }),
                Self::FakeQuant(scales) => {
                    let s = scales[l];
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(Error::Input(format!("layer {l} has invalid scale {s}")));
                    }
                    w.iter().position(|&v| {
                        let q = (v / s).round();
                        q.abs() > INT8_MAX || q * s != v
                    })
                }
            };
            if let Some(i) = violation {
                return Err(Error::Input(format!(
                    "layer {l} weight {i} violates the {} constraint",
                    self.kind_name()
                )));
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::PruneMask(_) => "prune-mask",
            Self::Cluster(_) => "cluster-assignment",
            Self::FakeQuant(_) => "fake-quant",
        }
    }

    /// Fraction of pruned weights (0 for other kinds).
    pub fn sparsity(&self) -> f64 {
        match self {
            Self::PruneMask(masks) => {
                let total: usize = masks.iter().map(Vec::len).sum();
                let pruned = masks.iter().flatten().filter(|&&k| !k).count();
                pruned as f64 / total.max(1) as f64
            }
            _ => 0.0,
        }
    }
}

/// Compression operation together with its strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CompressionKind {
    Prune { sparsity: f64 },
    Int8,
    Cluster { clusters: usize },
}

impl CompressionKind {
    /// Ordinal compression degree within one family: pruning uses the
    /// sparsity percentage, int8 is 8, clustering uses `-N` so that fewer
    /// clusters rank as stronger compression (16 < 8 < 4).
    pub fn degree_tag(&self) -> i64 {
        match *self {
            Self::Prune { sparsity } => (sparsity * 100.0).round() as i64,
            Self::Int8 => 8,
            Self::Cluster { clusters } => -(clusters as i64),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Prune { .. } => "prune",
            Self::Int8 => "int8",
            Self::Cluster { .. } => "cluster",
        }
    }

    /// Short identifier such as `prune60`, `int8`, `cluster8`.
    pub fn tag(&self) -> String {
        match *self {
            Self::Prune { .. } => format!("prune{}", self.degree_tag()),
            Self::Int8 => "int8".into(),
            Self::Cluster { clusters } => format!("cluster{clusters}"),
        }
    }
}

/// A model plus the constraint it satisfies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedModel {
    pub model: FcnModel,
    pub constraint: CompressionConstraint,
    pub kind: CompressionKind,
}

impl CompressedModel {
    pub fn degree_tag(&self) -> i64 {
        self.kind.degree_tag()
    }

    pub fn verify(&self) -> Result<()> {
        self.constraint.verify(&self.model)
    }
}

/// Whether pruning ranks magnitudes across the whole model or per matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    PerLayer,
}

/// Zeroes the `floor(sparsity * P)` smallest-magnitude weights across all
/// weight matrices. Ties are broken by position (layer, then row-major).
pub fn prune_l1(model: &FcnModel, sparsity: f64) -> Result<CompressedModel> {
    prune_l1_with_scope(model, sparsity, PruneScope::Global)
}

pub fn prune_l1_with_scope(
    model: &FcnModel,
    sparsity: f64,
    scope: PruneScope,
) -> Result<CompressedModel> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Input(format!("sparsity {sparsity} outside [0, 1]")));
    }
    if !model.is_finite() {
        return Err(Error::Input("cannot prune non-finite weights".into()));
    }
    let mut masks: Vec<Vec<bool>> = model
        .layers()
        .iter()
        .map(|l| vec![true; l.weights.as_slice().len()])
        .collect();
    let mut drop_smallest = |candidates: &mut Vec<(f64, usize, usize)>| {
        let k = (sparsity * candidates.len() as f64).floor() as usize;
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, l, i) in candidates.iter().take(k) {
            masks[l][i] = false;
        }
    };
    let magnitudes = |l: usize| {
        model.layers()[l]
            .weights
            .as_slice()
            .iter()
            .enumerate()
            .map(move |(i, w)| (w.abs(), l, i))
    };
    match scope {
        PruneScope::Global => {
            let mut all: Vec<_> = (0..model.layers().len()).flat_map(magnitudes).collect();
            drop_smallest(&mut all);
        }
        PruneScope::PerLayer => {
            for l in 0..model.layers().len() {
                let mut layer: Vec<_> = magnitudes(l).collect();
                drop_smallest(&mut layer);
            }
        }
    }
    let constraint = CompressionConstraint::PruneMask(masks);
    let mut pruned = model.clone();
    constraint.impose(&mut pruned);
    Ok(CompressedModel {
        model: pruned,
        constraint,
        kind: CompressionKind::Prune { sparsity },
    })
}

/// Symmetric per-tensor int8 quantisation in place; returns the scale.
///
/// `s = max|w| / 127`, `q = round(w / s)` (half away from zero) clamped to
/// `[-127, 127]`, and every weight becomes `q * s`. An all-zero tensor gets
/// `s = 1` and is left untouched.
pub fn quantize_layer(weights: &mut [f64]) -> f64 {
    let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 {
        return 1.0;
    }
    let s = max / INT8_MAX;
    for w in weights.iter_mut() {
        let q = (*w / s).round().clamp(-INT8_MAX, INT8_MAX);
        *w = q * s;
    }
    s
}

/// Integer codes of a quantised tensor.
pub fn int8_codes(weights: &[f64], scale: f64) -> Vec<i8> {
    weights
        .iter()
        .map(|w| (w / scale).round().clamp(-INT8_MAX, INT8_MAX) as i8)
        .collect()
}

/// How int8 quantisation is obtained.
#[derive(Debug, Clone, Copy)]
pub enum QuantMode<'a> {
    /// Round the trained weights directly.
    PostTraining,
    /// Fine-tune with fake-quantised forward passes and straight-through
    /// gradients, then quantise.
    AwareTraining {
        train_set: &'a TabularDataset,
        valid_set: Option<&'a TabularDataset>,
        config: &'a TrainConfig,
    },
}

pub fn quantize_int8(model: &FcnModel, mode: QuantMode<'_>) -> Result<CompressedModel> {
    if !model.is_finite() {
        return Err(Error::Input("cannot quantise non-finite weights".into()));
    }
    let base = match mode {
        QuantMode::PostTraining => model.clone(),
        QuantMode::AwareTraining {
            train_set,
            valid_set,
            config,
        } => {
            let placeholder = CompressionConstraint::FakeQuant(vec![1.0; model.layers().len()]);
            train(model, train_set, valid_set, config, Some(&placeholder))?
        }
    };
    Ok(finish_quantized(base))
}

fn finish_quantized(mut model: FcnModel) -> CompressedModel {
    let scales = model
        .layers_mut()
        .iter_mut()
        .map(|l| quantize_layer(l.weights.as_mut_slice()))
        .collect();
    CompressedModel {
        model,
        constraint: CompressionConstraint::FakeQuant(scales),
        kind: CompressionKind::Int8,
    }
}

/// Result of one 1-D k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1d {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub objective: Vec<f64>,
}

/// Lloyd's algorithm on scalars with k-means++ seeding.
///
/// `k` is reduced to the number of distinct values when that is smaller.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64) -> Result<KMeans1d> {
    if k == 0 {
        return Err(Error::Input("cluster count must be at least 1".into()));
    }
    if values.is_empty() {
        return Ok(KMeans1d {
            centroids: Vec::new(),
            assignments: Vec::new(),
            objective: Vec::new(),
        });
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k = k.min(distinct.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k);
    centroids.push(values[rng.random_range(0..values.len())]);
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        // `pick` is the last positive-distance point when rounding exhausts `target`
        let c = values[pick.expect("k <= distinct values leaves a point at positive distance")];
        centroids.push(c);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - c).powi(2));
        }
    }
    centroids.sort_by(f64::total_cmp);

    let mut assignments = vec![0usize; values.len()];
    let mut objective = Vec::new();
    assign(values, &centroids, &mut assignments);
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for (&v, &a) in values.iter().zip(&assignments) {
            sum[a] += v;
            count[a] += 1;
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if count[c] == 0 {
                continue;
            }
            let mean = if lo[c] == hi[c] {
                lo[c]
            } else {
                (sum[c] / count[c] as f64).clamp(lo[c], hi[c])
            };
            shift = shift.max((mean - centroids[c]).abs());
            centroids[c] = mean;
        }
        assign(values, &centroids, &mut assignments);
        objective.push(wcss(values, &centroids, &assignments));
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeans1d {
        centroids,
        assignments,
        objective,
    })
}

fn assign(values: &[f64], centroids: &[f64], assignments: &mut [usize]) {
    for (a, &v) in assignments.iter_mut().zip(values) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &m) in centroids.iter().enumerate() {
            let d = (v - m).abs();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *a = best;
    }
}

/// Within-cluster sum of squares.
pub fn wcss(values: &[f64], centroids: &[f64], assignments: &[usize]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(v, &a)| (v - centroids[a]).powi(2))
        .sum()
}

/// Clusters every weight matrix into at most `n_clusters` shared values.
pub fn cluster_weights(model: &FcnModel, n_clusters: usize, seed: u64) -> Result<CompressedModel> {
    if n_clusters == 0 || n_clusters > u16::MAX as usize {
        return Err(Error::Input(format!("unsupported cluster count {n_clusters}")));
    }
    if !model.is_finite() {
        return Err(Error::Input("cannot cluster non-finite weights".into()));
    }
    let mut layers = Vec::with_capacity(model.layers().len());
    for (l, layer) in model.layers().iter().enumerate() {
        let km = kmeans_1d(layer.weights.as_slice(), n_clusters, seed.wrapping_add(l as u64))?;
        layers.push(Some(ClusterLayer {
            assignments: km.assignments.iter().map(|&a| a as u16).collect(),
            centroids: km.centroids,
        }));
    }
    let constraint = CompressionConstraint::Cluster(layers);
    let mut clustered = model.clone();
    constraint.impose(&mut clustered);
    Ok(CompressedModel {
        model: clustered,
        constraint,
        kind: CompressionKind::Cluster {
            clusters: n_clusters,
        },
    })
}

/// Fine-tunes a compressed model while keeping its constraint.
///
/// Pruned weights stay zero, clustered weights move together with the
/// summed gradient of their cluster, and quantised models are trained with
/// fake quantisation and re-quantised at the end. With `dp` the updates use
/// DP-SGD.
pub fn finetune_compressed(
    cm: &CompressedModel,
    train_set: &TabularDataset,
    valid_set: Option<&TabularDataset>,
    config: &TrainConfig,
    dp: Option<&DpConfig>,
) -> Result<CompressedModel> {
    cm.constraint.check_shape(&cm.model)?;
    let tuned = match dp {
        None => train(&cm.model, train_set, valid_set, config, Some(&cm.constraint))?,
        Some(dp) => train_dpsgd(&cm.model, train_set, valid_set, config, dp, Some(&cm.constraint))?,
    };
    let out = match &cm.constraint {
        CompressionConstraint::PruneMask(_) => CompressedModel {
            model: tuned,
            constraint: cm.constraint.clone(),
            kind: cm.kind,
        },
        CompressionConstraint::Cluster(layers) => {
            let refreshed = layers
                .iter()
                .zip(tuned.layers())
                .map(|(cl, layer)| {
                    cl.as_ref().map(|cl| {
                        let w = layer.weights.as_slice();
                        let mut centroids = cl.centroids.clone();
                        for (&a, &v) in cl.assignments.iter().zip(w) {
                            centroids[a as usize] = v;
                        }
                        ClusterLayer {
                            assignments: cl.assignments.clone(),
                            centroids,
                        }
                    })
                })
                .collect();
            CompressedModel {
                model: tuned,
                constraint: CompressionConstraint::Cluster(refreshed),
                kind: cm.kind,
            }
        }
        CompressionConstraint::FakeQuant(_) => {
            let mut out = finish_quantized(tuned);
            out.kind = cm.kind;
            out
        }
    };
    out.verify()?;
    Ok(out)
}
