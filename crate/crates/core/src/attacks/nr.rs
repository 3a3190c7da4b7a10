//! Single-model attacks: metric thresholds (cross-entropy loss, modified
//! entropy) and shadow-trained meta-classifiers over sorted posteriors.

use serde::{Deserialize, Serialize};

use super::{fit_and_score, posteriors, AttackOutcome, Population};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::meta::{ClassifierKind, MetaClassifier, MetaHyper};
use crate::metrics::AttackScoreSet;
use crate::nn::{cross_entropy_loss, FcnModel, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NrMetric {
    Loss,
    #[serde(rename = "mentr")]
    ModifiedEntropy,
}

impl NrMetric {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Loss => "loss",
            Self::ModifiedEntropy => "mentr",
        }
    }

    pub fn value(&self, posterior: &[f64], label: usize) -> f64 {
        match self {
            Self::Loss => cross_entropy_loss(posterior, label),
            Self::ModifiedEntropy => modified_entropy(posterior, label),
        }
    }

    fn values(&self, posteriors: &Matrix, labels: &[usize]) -> Vec<f64> {
        posteriors
            .iter_rows()
            .zip(labels)
            .map(|(p, &y)| self.value(p, y))
            .collect()
    }
}

/// `-(1 - p_y) ln p_y - sum_{k != y} p_k ln(1 - p_k)`, logs clamped at 1e-12.
pub fn modified_entropy(posterior: &[f64], label: usize) -> f64 {
    let py = posterior[label];
    let mut m = -(1.0 - py) * py.max(PROB_FLOOR).ln();
    for (k, &pk) in posterior.iter().enumerate() {
        if k != label {
            m -= pk * (1.0 - pk).max(PROB_FLOOR).ln();
        }
    }
    m
}

/// Member iff cross-entropy loss `< tau` (ties are non-members).
pub fn nr_metric_loss(posteriors: &Matrix, labels: &[usize], tau: f64) -> Vec<bool> {
    NrMetric::Loss
        .values(posteriors, labels)
        .into_iter()
        .map(|v| v < tau)
        .collect()
}

/// Member iff modified entropy `< tau` (ties are non-members).
pub fn nr_metric_modified_entropy(posteriors: &Matrix, labels: &[usize], tau: f64) -> Vec<bool> {
    NrMetric::ModifiedEntropy
        .values(posteriors, labels)
        .into_iter()
        .map(|v| v < tau)
        .collect()
}

/// A calibrated metric threshold and the balanced accuracy it reaches on
/// the calibration populations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub calibration_accuracy: f64,
}

/// Chooses `tau` maximising balanced accuracy of the rule `value < tau`.
///
/// Candidates are the midpoints between consecutive distinct values plus one
/// point below the minimum and one above the maximum; the smallest maximiser
/// wins.
pub fn calibrate_threshold(member_values: &[f64], nonmember_values: &[f64]) -> Result<Threshold> {
    if member_values.is_empty() || nonmember_values.is_empty() {
        return Err(Error::Input("threshold calibration needs both populations".into()));
    }
    if member_values.iter().chain(nonmember_values).any(|v| !v.is_finite()) {
        return Err(Error::Input("metric values must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = member_values
        .iter()
        .map(|&v| (v, true))
        .chain(nonmember_values.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m = member_values.len() as f64;
    let n = nonmember_values.len() as f64;
    let lowest = all[0].0;
    let highest = all[all.len() - 1].0;

    // tau below everything: nobody is a member
    let mut best = Threshold {
        tau: lowest - 1.0,
        calibration_accuracy: 0.5,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tau = if i < all.len() {
            0.5 * (v + all[i].0)
        } else {
            highest + 1.0
        };
        let ba = 0.5 * (tp as f64 / m + (n - fp as f64) / n);
        if ba > best.calibration_accuracy {
            best = Threshold {
                tau,
                calibration_accuracy: ba,
            };
        }
    }
    Ok(best)
}

/// Threshold attack: calibrate on the shadow model, apply to the victim.
///
/// Scores are `exp(-metric)`, so larger means more member-like and the
/// AUC equals that of `-metric`.
pub fn run_nr_metric(
    metric: NrMetric,
    shadow_model: &FcnModel,
    shadow: Population<'_>,
    victim_model: &FcnModel,
    victim: Population<'_>,
) -> Result<(Threshold, AttackOutcome)> {
    let values = |model: &FcnModel, ds: &crate::data::TabularDataset| -> Result<Vec<f64>> {
        Ok(metric.values(&posteriors(model, ds)?, ds.labels()))
    };
    let threshold = calibrate_threshold(
        &values(shadow_model, shadow.members)?,
        &values(shadow_model, shadow.nonmembers)?,
    )?;
    let vm = values(victim_model, victim.members)?;
    let vn = values(victim_model, victim.nonmembers)?;
    let outcome = AttackOutcome {
        member_predictions: vm.iter().map(|&v| v < threshold.tau).collect(),
        nonmember_predictions: vn.iter().map(|&v| v < threshold.tau).collect(),
        scores: AttackScoreSet::new(
            vm.iter().map(|v| (-v).exp()).collect(),
            vn.iter().map(|v| (-v).exp()).collect(),
        )?,
    };
    Ok((threshold, outcome))
}

/// Posterior sorted in descending order, optionally followed by the one-hot
/// label.
pub fn build_nr_metadata(posterior: &[f64], label: usize, with_label: bool) -> Vec<f64> {
    let mut out = posterior.to_vec();
    out.sort_by(|a, b| b.total_cmp(a));
    if with_label {
        let mut onehot = vec![0.0; posterior.len()];
        onehot[label] = 1.0;
        out.extend(onehot);
    }
    out
}

fn nr_rows(model: &FcnModel, ds: &crate::data::TabularDataset, with_label: bool) -> Result<Vec<Vec<f64>>> {
    let p = posteriors(model, ds)?;
    Ok(p.iter_rows()
        .zip(ds.labels())
        .map(|(row, &y)| build_nr_metadata(row, y, with_label))
        .collect())
}

/// Shadow-trained meta-classifier over sorted posteriors (with the one-hot
/// label appended when `with_label`).
#[allow(clippy::too_many_arguments)]
pub fn run_nr_training(
    with_label: bool,
    kind: ClassifierKind,
    hyper: &MetaHyper,
    seed: u64,
    shadow_model: &FcnModel,
    shadow: Population<'_>,
    victim_model: &FcnModel,
    victim: Population<'_>,
) -> Result<(MetaClassifier, AttackOutcome)> {
    fit_and_score(
        nr_rows(shadow_model, shadow.members, with_label)?,
        nr_rows(shadow_model, shadow.nonmembers, with_label)?,
        &nr_rows(victim_model, victim.members, with_label)?,
        &nr_rows(victim_model, victim.nonmembers, with_label)?,
        kind,
        hyper,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn loss_rule_and_tie() {
        let p = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(nr_metric_loss(&p, &[1], 0.5), vec![true]);
        let q = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let tau = cross_entropy_loss(&[0.5, 0.5], 0);
        assert_eq!(nr_metric_loss(&q, &[0], tau), vec![false]);
    }

    #[test]
    fn mixed_batch_is_per_sample() {
        let p = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]).unwrap();
        let labels = [0, 0, 1, 1];
        let tau = 0.7;
        let batch = nr_metric_loss(&p, &labels, tau);
        let single: Vec<bool> = (0..4)
            .map(|i| cross_entropy_loss(p.row(i), labels[i]) < tau)
            .collect();
        assert_eq!(batch, single);
        let batch = nr_metric_modified_entropy(&p, &labels, tau);
        let single: Vec<bool> = (0..4)
            .map(|i| modified_entropy(p.row(i), labels[i]) < tau)
            .collect();
        assert_eq!(batch, single);
    }

    #[test]
    fn modified_entropy_cases() {
        assert_eq!(modified_entropy(&[0.0, 1.0, 0.0], 1), 0.0);
        assert!((modified_entropy(&[0.5, 0.5], 0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn calibrate_separable() {
        let t = calibrate_threshold(&[0.0, 0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(t.tau, 0.5);
        assert_eq!(t.calibration_accuracy, 1.0);
    }

    #[test]
    fn calibrate_identical_populations() {
        let t = calibrate_threshold(&[0.3, 0.7, 0.1], &[0.7, 0.1, 0.3]).unwrap();
        assert_eq!(t.calibration_accuracy, 0.5);
        let t = calibrate_threshold(&[2.0], &[2.0]).unwrap();
        assert_eq!(t.calibration_accuracy, 0.5);
    }

    #[test]
    fn nr_metadata_cases() {
        assert_eq!(build_nr_metadata(&[0.1, 0.7, 0.2], 1, false), vec![0.7, 0.2, 0.1]);
        assert_eq!(
            build_nr_metadata(&[0.1, 0.7, 0.2], 1, true),
            vec![0.7, 0.2, 0.1, 0.0, 1.0, 0.0]
        );
        let u = [1.0 / 3.0; 3];
        assert_eq!(build_nr_metadata(&u, 0, false), u.to_vec());
    }

    /// Brute force: every candidate in ascending order, first maximiser.
    fn brute_force(m: &[f64], n: &[f64]) -> (f64, f64) {
        let mut vals: Vec<f64> = m.iter().chain(n).copied().collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let mut candidates = vec![vals[0] - 1.0];
        candidates.extend(vals.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        candidates.push(vals[vals.len() - 1] + 1.0);
        let ba = |t: f64| {
            let tp = m.iter().filter(|&&v| v < t).count() as f64 / m.len() as f64;
            let tn = n.iter().filter(|&&v| v >= t).count() as f64 / n.len() as f64;
            0.5 * (tp + tn)
        };
        let mut best = (candidates[0], ba(candidates[0]));
        for &c in &candidates[1..] {
            let b = ba(c);
            if b > best.1 {
                best = (c, b);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn calibration_matches_brute_force(
            m in prop::collection::vec(0u8..20, 1..30),
            n in prop::collection::vec(0u8..20, 1..30),
        ) {
            let m: Vec<f64> = m.into_iter().map(|v| v as f64 * 0.1).collect();
            let n: Vec<f64> = n.into_iter().map(|v| v as f64 * 0.1).collect();
            let t = calibrate_threshold(&m, &n).unwrap();
            let (tau, ba) = brute_force(&m, &n);
            prop_assert_eq!(t.tau, tau);
            prop_assert!((t.calibration_accuracy - ba).abs() < 1e-12);
        }

        #[test]
        fn modified_entropy_non_negative(raw in prop::collection::vec(0.0f64..1.0, 2..10), y in 0usize..10) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / total).collect();
            let y = y % p.len();
            prop_assert!(modified_entropy(&p, y) >= 0.0);
        }
    }
}
