use serde::{Deserialize, Serialize};

use super::{sigmoid, MetaHyper, MetaRecord, Standardizer};
use crate::error::Result;
use crate::matrix::dot;

/// L2-regularised logistic regression fitted by full-batch gradient descent
/// on standardised features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    weights: Vec<f64>,
    bias: f64,
    standardizer: Standardizer,
}

impl LogisticRegression {
    pub(super) fn fit(records: &[MetaRecord], dim: usize, hyper: &MetaHyper) -> Result<Self> {
        let standardizer = Standardizer::fit(records, dim);
        let xs: Vec<Vec<f64>> = records.iter().map(|r| standardizer.apply(&r.features)).collect();
        let ys: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.member))).collect();
        let mut weights = vec![0.0; dim];
        let mut bias = 0.0;
        for _ in 0..hyper.lr_iterations {
            let (_, gw, gb) = bce_loss_and_gradient(&weights, bias, &xs, &ys, hyper.lr_l2);
            for (w, g) in weights.iter_mut().zip(&gw) {
                *w -= hyper.lr_learning_rate * g;
            }
            bias -= hyper.lr_learning_rate * gb;
        }
        Ok(Self {
            weights,
            bias,
            standardizer,
        })
    }

    /// A classifier with explicit parameters and no feature scaling.
    pub fn from_parameters(weights: Vec<f64>, bias: f64) -> Self {
        let dim = weights.len();
        Self {
            weights,
            bias,
            standardizer: Standardizer {
                mean: vec![0.0; dim],
                scale: vec![1.0; dim],
            },
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    pub(super) fn score(&self, features: &[f64]) -> f64 {
        let x = self.standardizer.apply(features);
        sigmoid(dot(&x, &self.weights) + self.bias)
    }
}

/// Mean binary cross-entropy plus `l2/2 * |w|^2`, with its gradient in
/// `(weights, bias)`.
pub fn bce_loss_and_gradient(
    weights: &[f64],
    bias: f64,
    xs: &[Vec<f64>],
    ys: &[f64],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(x, weights) + bias;
        let p = sigmoid(z);
        // log(1 + e^z) - y z, computed stably
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        let d = p - y;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += d * xi;
        }
        gb += d;
    }
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    let reg = 0.5 * l2 * dot(weights, weights);
    (loss / n + reg, gw, gb / n)
}
