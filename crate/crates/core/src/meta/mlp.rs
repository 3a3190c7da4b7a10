use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, MetaHyper, MetaRecord, Standardizer};
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot};

/// Parameters of a one-hidden-layer ReLU network with a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// `hidden x input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub input: usize,
}

impl MlpParams {
    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let b_in = 1.0 / (input as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: (0..hidden * input).map(|_| rng.random_range(-b_in..b_in)).collect(),
            b1: (0..hidden).map(|_| rng.random_range(-b_in..b_in)).collect(),
            w2: (0..hidden).map(|_| rng.random_range(-b_hid..b_hid)).collect(),
            b2: 0.0,
            input,
        }
    }

    fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: 0.0,
            input: self.input,
        }
    }

    fn logit(&self, x: &[f64], hidden: &mut [f64]) -> f64 {
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * self.input..(j + 1) * self.input];
            *h = (dot(row, x) + self.b1[j]).max(0.0);
        }
        dot(hidden, &self.w2) + self.b2
    }

    fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(std::iter::once(&mut self.b2))
    }

    fn flat(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(std::iter::once(&self.b2))
    }
}

/// Mean binary cross-entropy of the network on `(xs, ys)` plus
/// `l2/2 * (|w1|^2 + |w2|^2)`, and its gradient.
pub fn mlp_loss_and_gradient(params: &MlpParams, xs: &[&[f64]], ys: &[f64], l2: f64) -> (f64, MlpParams) {
    let mut grad = params.zeros_like();
    let mut hidden = vec![0.0; params.hidden()];
    let n = xs.len() as f64;
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = params.logit(x, &mut hidden);
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        let d = (sigmoid(z) - y) / n;
        grad.b2 += d;
        for (j, &h) in hidden.iter().enumerate() {
            grad.w2[j] += d * h;
            if h > 0.0 {
                let dh = d * params.w2[j];
                grad.b1[j] += dh;
                axpy(dh, x, &mut grad.w1[j * params.input..(j + 1) * params.input]);
            }
        }
    }
    let mut reg = 0.0;
    for (g, w) in grad.w1.iter_mut().zip(&params.w1).chain(grad.w2.iter_mut().zip(&params.w2)) {
        *g += l2 * w;
        reg += w * w;
    }
    (loss / n + 0.5 * l2 * reg, grad)
}

/// One-hidden-layer MLP trained with Adam on binary cross-entropy over
/// standardised features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    params: MlpParams,
    standardizer: Standardizer,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl MlpClassifier {
    pub(super) fn fit(records: &[MetaRecord], dim: usize, hyper: &MetaHyper, seed: u64) -> Result<Self> {
        if hyper.mlp_hidden == 0 || hyper.mlp_batch_size == 0 {
            return Err(Error::Config("MLP needs positive hidden width and batch size".into()));
        }
        if !(0.0..0.5).contains(&hyper.mlp_validation_fraction) {
            return Err(Error::Config("MLP validation fraction must lie in [0, 0.5)".into()));
        }
        let standardizer = Standardizer::fit(records, dim);
        let xs: Vec<Vec<f64>> = records.iter().map(|r| standardizer.apply(&r.features)).collect();
        let ys: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.member))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = MlpParams::init(dim, hyper.mlp_hidden, &mut rng);

        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut held_out = Vec::new();
        if hyper.mlp_validation_fraction > 0.0 {
            // stratified so both classes stay in each part
            order.shuffle(&mut rng);
            let (mut train, mut valid) = (Vec::new(), Vec::new());
            for class in [true, false] {
                let idx: Vec<usize> = order.iter().copied().filter(|&i| records[i].member == class).collect();
                let k = (hyper.mlp_validation_fraction * idx.len() as f64).round() as usize;
                let k = k.min(idx.len() - 1);
                valid.extend_from_slice(&idx[..k]);
                train.extend_from_slice(&idx[k..]);
            }
            train.sort_unstable();
            valid.sort_unstable();
            order = train;
            held_out = valid;
        }
        let vx: Vec<&[f64]> = held_out.iter().map(|&i| xs[i].as_slice()).collect();
        let vy: Vec<f64> = held_out.iter().map(|&i| ys[i]).collect();

        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        let mut step = 0i32;
        let mut best = (f64::INFINITY, params.clone());
        let mut stale = 0;
        for _ in 0..hyper.mlp_epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(hyper.mlp_batch_size) {
                let bx: Vec<&[f64]> = batch.iter().map(|&i| xs[i].as_slice()).collect();
                let by: Vec<f64> = batch.iter().map(|&i| ys[i]).collect();
                let (_, g) = mlp_loss_and_gradient(&params, &bx, &by, hyper.mlp_l2);
                step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(step);
                let c2 = 1.0 - ADAM_BETA2.powi(step);
                for (((p, gi), mi), vi) in params
                    .flat_mut()
                    .zip(g.flat())
                    .zip(m.flat_mut())
                    .zip(v.flat_mut())
                {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                    *p -= hyper.mlp_learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                }
            }
            if held_out.is_empty() {
                continue;
            }
            let (val_loss, _) = mlp_loss_and_gradient(&params, &vx, &vy, 0.0);
            if val_loss < best.0 {
                best = (val_loss, params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale > hyper.mlp_patience {
                    break;
                }
            }
        }
        if !held_out.is_empty() {
            params = best.1;
        }
        Ok(Self { params, standardizer })
    }

    pub fn feature_dim(&self) -> usize {
        self.params.input
    }

    pub(super) fn score(&self, features: &[f64]) -> f64 {
        let x = self.standardizer.apply(features);
        let mut hidden = vec![0.0; self.params.hidden()];
        sigmoid(self.params.logit(&x, &mut hidden))
    }
}
