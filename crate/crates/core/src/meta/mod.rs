//! Binary membership classifiers trained on attack features.
//!
//! Every classifier maps a feature vector to a membership probability in
//! `[0, 1]`; a score of exactly 0.5 is predicted member.

mod forest;
mod logistic;
mod mlp;

use serde::{Deserialize, Serialize};

pub use forest::{DecisionTree, RandomForest};
pub use logistic::{bce_loss_and_gradient, LogisticRegression};
pub use mlp::{mlp_loss_and_gradient, MlpClassifier, MlpParams};

use crate::error::{Error, Result};

/// Decision threshold on membership probabilities.
pub const MEMBER_THRESHOLD: f64 = 0.5;

/// One attack training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub features: Vec<f64>,
    /// `true` for members.
    pub member: bool,
}

impl MetaRecord {
    pub fn new(features: Vec<f64>, member: bool) -> Self {
        Self { features, member }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Lr,
    Rf,
    Mlp,
}

impl ClassifierKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lr => "lr",
            Self::Rf => "rf",
            Self::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(Self::Lr),
            "rf" => Ok(Self::Rf),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!("unknown classifier `{other}`"))),
        }
    }
}

/// Hyper-parameters for all three classifier families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaHyper {
    pub lr_iterations: usize,
    pub lr_learning_rate: f64,
    pub lr_l2: f64,

    pub rf_trees: usize,
    pub rf_max_depth: usize,
    pub rf_min_samples_leaf: usize,
    pub rf_bootstrap: bool,

    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_learning_rate: f64,
    pub mlp_batch_size: usize,
    pub mlp_l2: f64,
    /// Share of the records held out to pick the best epoch; 0 trains on
    /// everything for `mlp_epochs`.
    pub mlp_validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub mlp_patience: usize,
}

impl Default for MetaHyper {
    fn default() -> Self {
        Self {
            lr_iterations: 500,
            lr_learning_rate: 0.5,
            lr_l2: 1e-4,
            rf_trees: 100,
            rf_max_depth: 12,
            rf_min_samples_leaf: 1,
            rf_bootstrap: true,
            mlp_hidden: 64,
            mlp_epochs: 100,
            mlp_learning_rate: 1e-3,
            mlp_batch_size: 32,
            mlp_l2: 1e-4,
            mlp_validation_fraction: 0.2,
            mlp_patience: 10,
        }
    }
}

/// A fitted membership classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetaClassifier {
    Lr(LogisticRegression),
    Rf(RandomForest),
    Mlp(MlpClassifier),
}

impl MetaClassifier {
    pub fn fit(kind: ClassifierKind, records: &[MetaRecord], hyper: &MetaHyper, seed: u64) -> Result<Self> {
        let dim = check_records(records)?;
        Ok(match kind {
            ClassifierKind::Lr => Self::Lr(LogisticRegression::fit(records, dim, hyper)?),
            ClassifierKind::Rf => Self::Rf(RandomForest::fit(records, dim, hyper, seed)?),
            ClassifierKind::Mlp => Self::Mlp(MlpClassifier::fit(records, dim, hyper, seed)?),
        })
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Self::Lr(_) => ClassifierKind::Lr,
            Self::Rf(_) => ClassifierKind::Rf,
            Self::Mlp(_) => ClassifierKind::Mlp,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Lr(m) => m.feature_dim(),
            Self::Rf(m) => m.feature_dim(),
            Self::Mlp(m) => m.feature_dim(),
        }
    }

    /// Membership probability of one feature vector.
    pub fn score_proba(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "classifier expects {} features, got {}",
                self.feature_dim(),
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite attack feature".into()));
        }
        let p = match self {
            Self::Lr(m) => m.score(features),
            Self::Rf(m) => m.score(features),
            Self::Mlp(m) => m.score(features),
        };
        Ok(p.clamp(0.0, 1.0))
    }

    pub fn score_many(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.score_proba(r)).collect()
    }

    pub fn predict(&self, features: &[f64]) -> Result<bool> {
        Ok(self.score_proba(features)? >= MEMBER_THRESHOLD)
    }
}

fn check_records(records: &[MetaRecord]) -> Result<usize> {
    let dim = records
        .first()
        .map(|r| r.features.len())
        .ok_or_else(|| Error::DegenerateData("no training records".into()))?;
    if records.iter().any(|r| r.features.len() != dim) {
        return Err(Error::Shape("records have differing feature lengths".into()));
    }
    if records.iter().any(|r| r.features.iter().any(|v| !v.is_finite())) {
        return Err(Error::Input("non-finite attack feature".into()));
    }
    let members = records.iter().filter(|r| r.member).count();
    if members == 0 || members == records.len() {
        return Err(Error::DegenerateData(
            "attack training data must contain both members and non-members".into(),
        ));
    }
    Ok(dim)
}

/// Per-feature standardisation fitted on the training records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub(crate) fn fit(records: &[MetaRecord], dim: usize) -> Self {
        let n = records.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in records {
            for (m, v) in mean.iter_mut().zip(&r.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in records {
            for ((s, v), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_records() -> Vec<MetaRecord> {
        let mut v = Vec::new();
        for i in 0..10 {
            let jitter = i as f64 * 0.01;
            v.push(MetaRecord::new(vec![1.0 + jitter], true));
            v.push(MetaRecord::new(vec![-1.0 - jitter], false));
        }
        v
    }

    #[test]
    fn separable_line_all_kinds() {
        let recs = line_records();
        for kind in [ClassifierKind::Lr, ClassifierKind::Rf, ClassifierKind::Mlp] {
            let clf = MetaClassifier::fit(kind, &recs, &MetaHyper::default(), 1).unwrap();
            for r in &recs {
                assert_eq!(clf.predict(&r.features).unwrap(), r.member, "{kind:?}");
            }
        }
    }

    #[test]
    fn single_class_is_degenerate() {
        let recs = vec![MetaRecord::new(vec![0.0], true); 3];
        assert!(matches!(
            MetaClassifier::fit(ClassifierKind::Lr, &recs, &MetaHyper::default(), 0),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn ragged_records_rejected() {
        let recs = vec![MetaRecord::new(vec![0.0], true), MetaRecord::new(vec![0.0, 1.0], false)];
        assert!(matches!(
            MetaClassifier::fit(ClassifierKind::Rf, &recs, &MetaHyper::default(), 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn score_length_mismatch() {
        let clf = MetaClassifier::fit(ClassifierKind::Lr, &line_records(), &MetaHyper::default(), 0).unwrap();
        assert!(matches!(clf.score_proba(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn serde_round_trip_preserves_scores() {
        let recs = line_records();
        for kind in [ClassifierKind::Lr, ClassifierKind::Rf, ClassifierKind::Mlp] {
            let clf = MetaClassifier::fit(kind, &recs, &MetaHyper::default(), 3).unwrap();
            let json = serde_json::to_string(&clf).unwrap();
            let back: MetaClassifier = serde_json::from_str(&json).unwrap();
            assert_eq!(back, clf);
        }
    }

    #[test]
    fn seeded_refit_is_identical() {
        let recs = line_records();
        for kind in [ClassifierKind::Lr, ClassifierKind::Rf, ClassifierKind::Mlp] {
            let a = MetaClassifier::fit(kind, &recs, &MetaHyper::default(), 42).unwrap();
            let b = MetaClassifier::fit(kind, &recs, &MetaHyper::default(), 42).unwrap();
            assert_eq!(a, b);
        }
    }
}
