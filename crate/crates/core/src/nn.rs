//! Dense feed-forward classifier: forward pass, cross-entropy, SGD and
//! DP-SGD training.
//!
//! Hidden layers use ReLU followed by inverted dropout; the output layer is
//! linear and softmax is applied only when posteriors or losses are
//! requested. Weight matrices are stored `out x in`, row-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compression::{quantize_layer, CompressionConstraint};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default hidden widths of the fully connected classifier.
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 128];
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// A class index together with the number of classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    class_index: usize,
    class_count: usize,
}

impl Label {
    pub fn new(class_index: usize, class_count: usize) -> Result<Self> {
        if class_index >= class_count {
            return Err(Error::Input(format!(
                "class {class_index} outside 0..{class_count}"
            )));
        }
        Ok(Self {
            class_index,
            class_count,
        })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.class_count];
        v[self.class_index] = 1.0;
        v
    }
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Fully connected ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnModel {
    layers: Vec<Layer>,
    dropout: Vec<f64>,
}

impl FcnModel {
    /// The default classifier: `input -> 256 -> 128 -> classes`, dropout 0.1.
    pub fn fcn(input_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        let sizes = [input_dim, DEFAULT_HIDDEN[0], DEFAULT_HIDDEN[1], classes];
        Self::with_layers(&sizes, DEFAULT_DROPOUT, seed)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn with_layers(layer_sizes: &[usize], dropout: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes, dropout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.in_dim().max(1) as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut layer.bias {
                *b = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn zeros(layer_sizes: &[usize], dropout: f64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Shape("a model needs at least input and output sizes".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Shape(format!("zero-width layer in {layer_sizes:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Input(format!("dropout rate {dropout} outside [0, 1)")));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer {
                weights: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect::<Vec<_>>();
        let dropout = vec![dropout; layers.len() - 1];
        Ok(Self { layers, dropout })
    }

    /// Assembles a model from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Layer>, dropout: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    l.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        if dropout.len() != layers.len() - 1 {
            return Err(Error::Shape("one dropout rate per hidden layer required".into()));
        }
        if dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Input("dropout rates must lie in [0, 1)".into()));
        }
        let model = Self { layers, dropout };
        if !model.is_finite() {
            return Err(Error::Input("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.dropout
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Layer::out_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::Input("input contains NaN or infinity".into()));
        }
        Ok(())
    }

    /// Posterior rows for `inputs`. Dropout is active only in train mode and
    /// then drawn from `seed`.
    pub fn forward(&self, inputs: &Matrix, train_mode: bool, seed: u64) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = if train_mode { Some(&mut rng) } else { None };
        Ok(forward_cached(&self.layers, &self.dropout, inputs.clone(), rng).probs)
    }

    /// Inference-mode posteriors.
    pub fn predict_proba(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs, false, 0)
    }

    /// Pre-softmax outputs in inference mode.
    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        Ok(forward_cached(&self.layers, &self.dropout, inputs.clone(), None).logits)
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let probs = self.predict_proba(inputs)?;
        Ok(probs.iter_rows().map(argmax).collect())
    }

    pub fn accuracy(&self, dataset: &TabularDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(dataset.features())?;
        let hits = pred
            .iter()
            .zip(dataset.labels())
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / dataset.len() as f64)
    }

    /// Per-sample cross-entropy in inference mode.
    pub fn sample_losses(&self, dataset: &TabularDataset) -> Result<Vec<f64>> {
        let probs = self.predict_proba(dataset.features())?;
        Ok(probs
            .iter_rows()
            .zip(dataset.labels())
            .map(|(p, &y)| cross_entropy_loss(p, y))
            .collect())
    }

    /// Mean cross-entropy over a batch and its exact gradient, with dropout
    /// disabled.
    pub fn loss_and_gradient(&self, inputs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Layer>)> {
        self.check_inputs(inputs)?;
        if labels.len() != inputs.rows() || labels.is_empty() {
            return Err(Error::Shape("one label per input row required".into()));
        }
        if labels.iter().any(|&y| y >= self.output_dim()) {
            return Err(Error::Input("label outside model output range".into()));
        }
        let cache = forward_cached(&self.layers, &self.dropout, inputs.clone(), None);
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut scratch = Scratch::new(&self.layers);
        let scale = 1.0 / labels.len() as f64;
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            loss += cross_entropy_loss(cache.probs.row(b), y);
            backward_sample(&self.layers, &cache, b, y, scale, &mut grads, &mut scratch);
        }
        Ok((loss * scale, grads))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// `-ln(max(p_y, 1e-12))`.
pub fn cross_entropy_loss(posterior: &[f64], label: usize) -> f64 {
    -posterior[label].max(PROB_FLOOR).ln()
}

/// Hyper-parameters of plain mini-batch SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub l2_lambda: f64,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping and the final parameters are returned.
    pub early_stop_patience: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            max_epochs: 50,
            l2_lambda: 0.0,
            early_stop_patience: 0,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return Err(Error::Config("l2 lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// DP-SGD parameters. `delta` is carried for reporting only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            delta: 1e-5,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(Error::Config("noise multiplier must be non-negative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("delta must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Trains with mini-batch SGD on cross-entropy.
///
/// With `early_stop_patience > 0` and a validation set, the snapshot with the
/// best validation accuracy is returned. A constraint is re-imposed after
/// every parameter update.
pub fn train(
    model: &FcnModel,
    train_set: &TabularDataset,
    valid_set: Option<&TabularDataset>,
    config: &TrainConfig,
    constraint: Option<&CompressionConstraint>,
) -> Result<FcnModel> {
    fit(model, train_set, valid_set, config, None, constraint)
}

/// DP-SGD: every per-sample gradient is clipped to `clip_norm`, the clipped
/// gradients are averaged and Gaussian noise of standard deviation
/// `noise_multiplier * clip_norm / batch_size` is added.
pub fn train_dpsgd(
    model: &FcnModel,
    train_set: &TabularDataset,
    valid_set: Option<&TabularDataset>,
    config: &TrainConfig,
    dp: &DpConfig,
    constraint: Option<&CompressionConstraint>,
) -> Result<FcnModel> {
    dp.validate()?;
    fit(model, train_set, valid_set, config, Some(dp), constraint)
}

struct Cache {
    /// Input to each layer (post-dropout activations for hidden layers).
    inputs: Vec<Matrix>,
    /// Pre-activations of hidden layers.
    hidden_pre: Vec<Matrix>,
    /// Inverted-dropout multipliers of hidden layers; `None` when inactive.
    masks: Vec<Option<Matrix>>,
    logits: Matrix,
    probs: Matrix,
}

fn forward_cached(
    layers: &[Layer],
    dropout: &[f64],
    x: Matrix,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Cache {
    let batch = x.rows();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut hidden_pre = Vec::with_capacity(layers.len() - 1);
    let mut masks = Vec::with_capacity(layers.len() - 1);
    let mut current = x;
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let mut z = Matrix::zeros(batch, layer.out_dim());
        for b in 0..batch {
            let xb = current.row(b);
            let zb = z.row_mut(b);
            for (o, zo) in zb.iter_mut().enumerate() {
                *zo = dot(xb, layer.weights.row(o)) + layer.bias[o];
            }
        }
        inputs.push(current);
        if l == last {
            let mut probs = z.clone();
            for b in 0..batch {
                softmax_in_place(probs.row_mut(b));
            }
            return Cache {
                inputs,
                hidden_pre,
                masks,
                logits: z,
                probs,
            };
        }
        let mut a = z.clone();
        for v in a.as_mut_slice() {
            *v = v.max(0.0);
        }
        let p = dropout[l];
        let mask = match rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mut m = Matrix::zeros(batch, layer.out_dim());
                for (mv, av) in m.as_mut_slice().iter_mut().zip(a.as_mut_slice()) {
                    *mv = if rng.random::<f64>() < p { 0.0 } else { keep };
                    *av *= *mv;
                }
                Some(m)
            }
            _ => None,
        };
        hidden_pre.push(z);
        masks.push(mask);
        current = a;
    }
    unreachable!("loop returns at the output layer")
}

struct Scratch {
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(layers: &[Layer]) -> Self {
        Self {
            deltas: layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }
}

/// Accumulates `scale * d loss_b / d theta` for sample `b` into `grads`.
fn backward_sample(
    layers: &[Layer],
    cache: &Cache,
    b: usize,
    label: usize,
    scale: f64,
    grads: &mut [Layer],
    scratch: &mut Scratch,
) {
    let last = layers.len() - 1;
    {
        let delta = &mut scratch.deltas[last];
        delta.copy_from_slice(cache.probs.row(b));
        delta[label] -= 1.0;
    }
    for l in (0..layers.len()).rev() {
        let (lower, upper) = scratch.deltas.split_at_mut(l);
        let delta = &upper[0];
        let input = cache.inputs[l].row(b);
        let g = &mut grads[l];
        for (o, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                axpy(scale * d, input, g.weights.row_mut(o));
                g.bias[o] += scale * d;
            }
        }
        if l == 0 {
            break;
        }
        let prev = &mut lower[l - 1];
        prev.iter_mut().for_each(|v| *v = 0.0);
        for (o, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                axpy(d, layers[l].weights.row(o), prev);
            }
        }
        let pre = cache.hidden_pre[l - 1].row(b);
        match &cache.masks[l - 1] {
            Some(mask) => {
                for ((v, &z), &m) in prev.iter_mut().zip(pre).zip(mask.row(b)) {
                    *v = if z > 0.0 { *v * m } else { 0.0 };
                }
            }
            None => {
                for (v, &z) in prev.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Constraint bookkeeping used inside the training loop.
enum ActiveConstraint<'a> {
    None,
    Prune(&'a [Vec<bool>]),
    Cluster(Vec<Option<ClusterIndex>>),
    FakeQuant,
}

struct ClusterIndex {
    assignments: Vec<usize>,
    /// One representative weight index per cluster (`None` if empty).
    representative: Vec<Option<usize>>,
}

impl<'a> ActiveConstraint<'a> {
    fn new(model: &FcnModel, constraint: Option<&'a CompressionConstraint>) -> Result<Self> {
        let Some(c) = constraint else {
            return Ok(Self::None);
        };
        c.check_shape(model)?;
        Ok(match c {
            CompressionConstraint::PruneMask(masks) => Self::Prune(masks),
            CompressionConstraint::Cluster(layers) => Self::Cluster(
                layers
                    .iter()
                    .map(|cl| {
                        cl.as_ref().map(|cl| {
                            let mut representative = vec![None; cl.centroids.len()];
                            for (i, &a) in cl.assignments.iter().enumerate() {
                                representative[a as usize].get_or_insert(i);
                            }
                            ClusterIndex {
                                assignments: cl.assignments.iter().map(|&a| a as usize).collect(),
                                representative,
                            }
                        })
                    })
                    .collect(),
            ),
            CompressionConstraint::FakeQuant(_) => Self::FakeQuant,
        })
    }
}

struct Velocity {
    layers: Vec<Layer>,
    /// Per-layer centroid velocities for clustered layers.
    centroids: Vec<Vec<f64>>,
}

fn apply_update(
    model: &mut FcnModel,
    grads: &[Layer],
    velocity: &mut Velocity,
    config: &TrainConfig,
    constraint: &ActiveConstraint<'_>,
) {
    let lr = config.learning_rate;
    let mu = config.momentum;
    for (l, (layer, g)) in model.layers.iter_mut().zip(grads).enumerate() {
        let vel = &mut velocity.layers[l];
        for ((b, &gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut vel.bias) {
            *vb = mu * *vb + gb;
            *b -= lr * *vb;
        }
        if let ActiveConstraint::Cluster(index) = constraint {
            if let Some(ci) = &index[l] {
                let k = ci.representative.len();
                let mut centroid_grad = vec![0.0; k];
                for (&a, &gw) in ci.assignments.iter().zip(g.weights.as_slice()) {
                    centroid_grad[a] += gw;
                }
                let weights = layer.weights.as_mut_slice();
                let cv = &mut velocity.centroids[l];
                let mut centroids = vec![0.0; k];
                for c in 0..k {
                    if let Some(rep) = ci.representative[c] {
                        cv[c] = mu * cv[c] + centroid_grad[c];
                        centroids[c] = weights[rep] - lr * cv[c];
                    }
                }
                for (w, &a) in weights.iter_mut().zip(&ci.assignments) {
                    *w = centroids[a];
                }
                continue;
            }
        }
        for ((w, &gw), vw) in layer
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(g.weights.as_slice())
            .zip(vel.weights.as_mut_slice())
        {
            *vw = mu * *vw + gw;
            *w -= lr * *vw;
        }
        if let ActiveConstraint::Prune(masks) = constraint {
            for (w, &keep) in layer.weights.as_mut_slice().iter_mut().zip(&masks[l]) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
}

fn impose(model: &mut FcnModel, constraint: Option<&CompressionConstraint>) {
    if let Some(c) = constraint {
        c.impose(model);
    }
}

/// Weights the forward pass actually sees: fake-quantised under QAT.
fn effective_layers(model: &FcnModel, constraint: &ActiveConstraint<'_>) -> Option<Vec<Layer>> {
    match constraint {
        ActiveConstraint::FakeQuant => Some(
            model
                .layers
                .iter()
                .map(|l| {
                    let mut q = l.clone();
                    quantize_layer(q.weights.as_mut_slice());
                    q
                })
                .collect(),
        ),
        _ => None,
    }
}

fn validation_accuracy(
    model: &FcnModel,
    constraint: &ActiveConstraint<'_>,
    valid: &TabularDataset,
) -> Result<f64> {
    match effective_layers(model, constraint) {
        Some(layers) => FcnModel {
            layers,
            dropout: model.dropout.clone(),
        }
        .accuracy(valid),
        None => model.accuracy(valid),
    }
}

fn fit(
    model: &FcnModel,
    train_set: &TabularDataset,
    valid_set: Option<&TabularDataset>,
    config: &TrainConfig,
    dp: Option<&DpConfig>,
    constraint: Option<&CompressionConstraint>,
) -> Result<FcnModel> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if train_set.feature_dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            train_set.feature_dim(),
            model.input_dim()
        )));
    }
    if train_set.labels().iter().any(|&y| y >= model.output_dim()) {
        return Err(Error::Input("label outside model output range".into()));
    }
    if let Some(v) = valid_set {
        if v.feature_dim() != model.input_dim() {
            return Err(Error::Shape("validation feature dimension mismatch".into()));
        }
    }

    let active = ActiveConstraint::new(model, constraint)?;
    let mut current = model.clone();
    if !matches!(active, ActiveConstraint::FakeQuant) {
        impose(&mut current, constraint);
    }
    if config.max_epochs == 0 {
        impose(&mut current, constraint);
        return Ok(current);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut velocity = Velocity {
        layers: current.layers.iter().map(Layer::zeros_like).collect(),
        centroids: match &active {
            ActiveConstraint::Cluster(index) => index
                .iter()
                .map(|ci| ci.as_ref().map_or(Vec::new(), |ci| vec![0.0; ci.representative.len()]))
                .collect(),
            _ => vec![Vec::new(); current.layers.len()],
        },
    };
    let mut grads: Vec<Layer> = current.layers.iter().map(Layer::zeros_like).collect();
    let mut sample_grads: Vec<Layer> = grads.clone();
    let mut scratch = Scratch::new(&current.layers);

    let early_stopping = config.early_stop_patience > 0 && valid_set.is_some_and(|v| !v.is_empty());
    let mut best: Option<(f64, FcnModel)> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        shuffle(&mut order, &mut rng);
        for batch_idx in order.chunks(config.batch_size) {
            let x = train_set.features().select_rows(batch_idx);
            let effective = effective_layers(&current, &active);
            let layers = effective.as_deref().unwrap_or(&current.layers);
            let cache = forward_cached(layers, &current.dropout, x, Some(&mut rng));

            for g in grads.iter_mut() {
                zero_layer(g);
            }
            let inv_batch = 1.0 / batch_idx.len() as f64;
            let mut batch_loss = 0.0;
            for (b, &i) in batch_idx.iter().enumerate() {
                let y = train_set.labels()[i];
                batch_loss += cross_entropy_loss(cache.probs.row(b), y);
                match dp {
                    None => backward_sample(layers, &cache, b, y, inv_batch, &mut grads, &mut scratch),
                    Some(dp) => {
                        for g in sample_grads.iter_mut() {
                            zero_layer(g);
                        }
                        backward_sample(layers, &cache, b, y, 1.0, &mut sample_grads, &mut scratch);
                        if let ActiveConstraint::Prune(masks) = &active {
                            mask_gradient(&mut sample_grads, masks);
                        }
                        let norm = grad_norm(&sample_grads);
                        let factor = if norm > dp.clip_norm { dp.clip_norm / norm } else { 1.0 };
                        for (g, s) in grads.iter_mut().zip(&sample_grads) {
                            axpy(factor * inv_batch, s.weights.as_slice(), g.weights.as_mut_slice());
                            axpy(factor * inv_batch, &s.bias, &mut g.bias);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite loss".into(),
                });
            }
            if let Some(dp) = dp {
                if dp.noise_multiplier > 0.0 {
                    let std = dp.noise_multiplier * dp.clip_norm * inv_batch;
                    for g in grads.iter_mut() {
                        for v in g.weights.as_mut_slice().iter_mut().chain(g.bias.iter_mut()) {
                            *v += std * noise_rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                }
            }
            if config.l2_lambda > 0.0 {
                for (g, layer) in grads.iter_mut().zip(&current.layers) {
                    axpy(config.l2_lambda, layer.weights.as_slice(), g.weights.as_mut_slice());
                }
            }
            apply_update(&mut current, &grads, &mut velocity, config, &active);
        }
        if !current.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite parameters".into(),
            });
        }
        if early_stopping {
            let acc = validation_accuracy(&current, &active, valid_set.unwrap())?;
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, current.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.early_stop_patience {
                    break;
                }
            }
        }
    }

    let mut result = best.map_or(current, |(_, m)| m);
    // clustered weights already sit on their (moved) centroids
    if !matches!(active, ActiveConstraint::Cluster(_)) {
        impose(&mut result, constraint);
    }
    Ok(result)
}

fn zero_layer(g: &mut Layer) {
    g.weights.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    g.bias.iter_mut().for_each(|v| *v = 0.0);
}

fn mask_gradient(grads: &mut [Layer], masks: &[Vec<bool>]) {
    for (g, mask) in grads.iter_mut().zip(masks) {
        for (v, &keep) in g.weights.as_mut_slice().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

fn grad_norm(grads: &[Layer]) -> f64 {
    grads
        .iter()
        .map(|g| dot(g.weights.as_slice(), g.weights.as_slice()) + dot(&g.bias, &g.bias))
        .sum::<f64>()
        .sqrt()
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::ClusterLayer;
    use crate::data::{synth_generate, SynthParams};

    fn toy_model(seed: u64) -> FcnModel {
        FcnModel::with_layers(&[5, 4, 3], 0.0, seed).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_posterior() {
        let model = FcnModel::zeros(&[3, 4, 5], 0.1).unwrap();
        let x = Matrix::from_rows(&[[0.3, -2.0, 7.0]]).unwrap();
        let p = model.forward(&x, false, 0).unwrap();
        for &v in p.row(0) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_zero_and_ln3() {
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_identical_posteriors() {
        let model = FcnModel::with_layers(&[3, 8, 4], 0.1, 1).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]).unwrap();
        let p = model.forward(&x, false, 0).unwrap();
        assert_eq!(p.row(0), p.row(1));
    }

    #[test]
    fn forward_shape_and_finiteness_errors() {
        let model = toy_model(0);
        let bad = Matrix::zeros(1, 4);
        assert!(matches!(model.forward(&bad, false, 0), Err(Error::Shape(_))));
        let nan = Matrix::from_rows(&[[f64::NAN, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(model.forward(&nan, false, 0), Err(Error::Input(_))));
    }

    #[test]
    fn dropout_is_seeded() {
        let model = FcnModel::with_layers(&[3, 16, 4], 0.5, 2).unwrap();
        let x = Matrix::from_rows(&[[0.5, -0.5, 1.0]]).unwrap();
        let a = model.forward(&x, true, 7).unwrap();
        let b = model.forward(&x, true, 7).unwrap();
        assert_eq!(a, b);
        let eval = model.forward(&x, false, 7).unwrap();
        assert_ne!(a, eval);
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy_loss(&[0.0, 1.0], 1), 0.0);
        assert!((cross_entropy_loss(&[0.25, 0.5, 0.25], 1) - 0.5f64.ln().abs()).abs() < 1e-15);
        let clamped = cross_entropy_loss(&[1.0, 0.0], 1);
        assert!((clamped - 27.631_021_115_928_547).abs() < 1e-9);
    }

    #[test]
    fn label_one_hot() {
        let l = Label::new(2, 4).unwrap();
        assert_eq!(l.one_hot(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(Label::new(4, 4).is_err());
    }

    fn numeric_loss(model: &FcnModel, x: &Matrix, y: &[usize]) -> f64 {
        model.loss_and_gradient(x, y).unwrap().0
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = toy_model(3);
        let x = Matrix::from_rows(&[
            [0.5, -1.0, 0.3, 0.8, -0.2],
            [-0.7, 0.4, 1.2, -0.1, 0.9],
            [0.2, 0.2, -0.6, 0.5, 0.1],
        ])
        .unwrap();
        let y = [0, 2, 1];
        let (_, grads) = model.loss_and_gradient(&x, &y).unwrap();
        let h = 1e-4;
        for (l, g) in grads.iter().enumerate() {
            let n_w = g.weights.as_slice().len();
            for i in 0..n_w + g.bias.len() {
                let bump = |delta: f64| {
                    let mut m = model.clone();
                    if i < n_w {
                        m.layers[l].weights.as_mut_slice()[i] += delta;
                    } else {
                        m.layers[l].bias[i - n_w] += delta;
                    }
                    numeric_loss(&m, &x, &y)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = if i < n_w {
                    g.weights.as_slice()[i]
                } else {
                    g.bias[i - n_w]
                };
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - an).abs() < 1e-9, "layer {l} param {i}: {fd} vs {an}");
            }
        }
    }

    fn separable(seed: u64) -> TabularDataset {
        synth_generate(&SynthParams {
            samples: 80,
            features: 4,
            classes: 2,
            cluster_spread: 0.05,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn fits_separable_data() {
        let ds = separable(1);
        let model = FcnModel::with_layers(&[4, 16, 8, 2], 0.1, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 50,
            learning_rate: 0.1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let trained = train(&model, &ds, None, &cfg, None).unwrap();
        assert!(trained.accuracy(&ds).unwrap() >= 0.99);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = separable(2);
        let model = FcnModel::with_layers(&[4, 8, 2], 0.0, 4).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train(&model, &ds, None, &cfg, None).unwrap(), model);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = separable(3);
        let model = FcnModel::with_layers(&[4, 8, 2], 0.2, 4).unwrap();
        let cfg = TrainConfig {
            max_epochs: 5,
            seed: 99,
            momentum: 0.5,
            l2_lambda: 1e-3,
            ..TrainConfig::default()
        };
        let a = train(&model, &ds, None, &cfg, None).unwrap();
        let b = train(&model, &ds, None, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_first_layer_mask_stays_zero() {
        let ds = separable(4);
        let model = FcnModel::with_layers(&[4, 8, 2], 0.0, 5).unwrap();
        let masks = vec![vec![false; 32], vec![true; 16]];
        let constraint = CompressionConstraint::PruneMask(masks);
        let cfg = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let trained = train(&model, &ds, None, &cfg, Some(&constraint)).unwrap();
        assert!(trained.layers[0].weights.as_slice().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn divergence_reports_epoch() {
        let ds = separable(5);
        let model = FcnModel::with_layers(&[4, 8, 2], 0.0, 6).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        match train(&model, &ds, None, &cfg, None) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn early_stopping_returns_best_snapshot() {
        let ds = separable(6);
        let valid = separable(7);
        let model = FcnModel::with_layers(&[4, 8, 2], 0.0, 6).unwrap();
        let cfg = TrainConfig {
            max_epochs: 30,
            early_stop_patience: 2,
            ..TrainConfig::default()
        };
        let trained = train(&model, &ds, Some(&valid), &cfg, None).unwrap();
        assert!(trained.accuracy(&valid).unwrap() >= model.accuracy(&valid).unwrap());
    }

    #[test]
    fn degenerate_dp_matches_sgd() {
        let ds = separable(8);
        let model = FcnModel::with_layers(&[4, 8, 6, 2], 0.1, 7).unwrap();
        let dp = DpConfig {
            clip_norm: 1e9,
            noise_multiplier: 0.0,
            delta: 1e-5,
        };
        for epochs in 1..=3 {
            let cfg = TrainConfig {
                max_epochs: epochs,
                batch_size: 8,
                momentum: 0.3,
                ..TrainConfig::default()
            };
            let plain = train(&model, &ds, None, &cfg, None).unwrap();
            let private = train_dpsgd(&model, &ds, None, &cfg, &dp, None).unwrap();
            for (a, b) in plain.layers.iter().zip(&private.layers) {
                for (x, y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_sample_gradient_is_clipped() {
        // One sample, a model whose gradient norm is large; with lr = 1 the
        // parameter displacement equals the applied gradient.
        let mut model = FcnModel::zeros(&[1, 2], 0.0).unwrap();
        model.layers[0].weights.set(0, 0, 5.0);
        let x = Matrix::from_rows(&[[20.0]]).unwrap();
        let ds = TabularDataset::new(x.clone(), vec![1], 2, "t").unwrap();
        let (_, raw) = model.loss_and_gradient(&x, &[1]).unwrap();
        assert!(grad_norm(&raw) > 10.0);
        let cfg = TrainConfig {
            learning_rate: 1.0,
            batch_size: 1,
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let dp = DpConfig {
            clip_norm: 1.0,
            ..DpConfig::default()
        };
        let after = train_dpsgd(&model, &ds, None, &cfg, &dp, None).unwrap();
        let mut sq = 0.0;
        for (a, b) in after.layers.iter().zip(&model.layers) {
            for (x, y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
                sq += (x - y).powi(2);
            }
            for (x, y) in a.bias.iter().zip(&b.bias) {
                sq += (x - y).powi(2);
            }
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_multiplier_changes_parameters() {
        let ds = separable(9);
        let model = FcnModel::with_layers(&[4, 8, 2], 0.0, 8).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: ds.len(),
            ..TrainConfig::default()
        };
        let run = |sigma| {
            let dp = DpConfig {
                noise_multiplier: sigma,
                ..DpConfig::default()
            };
            train_dpsgd(&model, &ds, None, &cfg, &dp, None).unwrap()
        };
        let a = run(0.5);
        let b = run(0.2);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.weights.as_slice().iter().zip(lb.weights.as_slice()) {
                assert_ne!(x, y);
            }
        }
    }

    #[test]
    fn cluster_constraint_shares_updates() {
        let ds = separable(10);
        let mut model = FcnModel::with_layers(&[4, 3, 2], 0.0, 9).unwrap();
        let assignments: Vec<u16> = (0..12).map(|i| (i % 2) as u16).collect();
        let constraint = CompressionConstraint::Cluster(vec![
            Some(ClusterLayer {
                assignments,
                centroids: vec![0.2, -0.3],
            }),
            None,
        ]);
        constraint.impose(&mut model);
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: ds.len(),
            ..TrainConfig::default()
        };
        let (_, g) = model.loss_and_gradient(ds.features(), ds.labels()).unwrap();
        let trained = train(&model, &ds, None, &cfg, Some(&constraint)).unwrap();
        let w = trained.layers[0].weights.as_slice();
        let g0: f64 = g[0].weights.as_slice().iter().step_by(2).sum();
        let g1: f64 = g[0].weights.as_slice().iter().skip(1).step_by(2).sum();
        assert!((w[0] - (0.2 - cfg.learning_rate * g0)).abs() < 1e-12);
        assert!((w[1] - (-0.3 - cfg.learning_rate * g1)).abs() < 1e-12);
        let mut distinct: Vec<f64> = w.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert!(distinct.len() <= 2);
    }
}
