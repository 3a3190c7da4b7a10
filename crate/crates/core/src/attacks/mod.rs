//! Membership inference attacks against an original model and its
//! compressed variants.
//!
//! * [`nr`]: attacks that observe a single model (metric thresholds and
//!   shadow-trained meta-classifiers).
//! * [`sr`]: attacks that pair the original model with one compressed model.
//! * [`mr`]: attacks that aggregate several compressed models.
//!
//! Every attack is trained on a shadow side (models the adversary trained
//! on its own member/non-member split) and evaluated on the victim side.

pub mod mr;
pub mod nr;
pub mod sr;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::meta::{ClassifierKind, MetaClassifier, MetaHyper, MetaRecord, MEMBER_THRESHOLD};
use crate::metrics::{
    balanced_accuracy_from_predictions, kl_divergence, roc_auc, tpr_at_fpr, AttackScoreSet,
    MetricSummary,
};
use crate::nn::FcnModel;

pub use mr::{
    mr_loss_concat, mr_posterior_concat, run_mr, Adversary, MrConfig, MrInput, MrRun, MrSide, RankedModel,
};
pub use nr::{
    build_nr_metadata, calibrate_threshold, modified_entropy, nr_metric_loss,
    nr_metric_modified_entropy, run_nr_metric, run_nr_training, NrMetric, Threshold,
};
pub use sr::{build_sr_metadata, run_sr, ModelPair, SrConstruction};

/// Members and non-members of one side of an attack.
#[derive(Debug, Clone, Copy)]
pub struct Population<'a> {
    pub members: &'a TabularDataset,
    pub nonmembers: &'a TabularDataset,
}

/// Scores and hard decisions of an attack on the victim population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub scores: AttackScoreSet,
    pub member_predictions: Vec<bool>,
    pub nonmember_predictions: Vec<bool>,
}

impl AttackOutcome {
    /// Decisions taken as `score >= 0.5`.
    pub fn from_probabilities(scores: AttackScoreSet) -> Result<Self> {
        scores.validate()?;
        if scores
            .member_scores
            .iter()
            .chain(&scores.nonmember_scores)
            .any(|s| !(0.0..=1.0).contains(s))
        {
            return Err(Error::Input("attack probabilities must lie in [0, 1]".into()));
        }
        Ok(Self {
            member_predictions: scores.member_scores.iter().map(|&s| s >= MEMBER_THRESHOLD).collect(),
            nonmember_predictions: scores
                .nonmember_scores
                .iter()
                .map(|&s| s >= MEMBER_THRESHOLD)
                .collect(),
            scores,
        })
    }

    pub fn balanced_accuracy(&self) -> f64 {
        balanced_accuracy_from_predictions(&self.member_predictions, &self.nonmember_predictions)
    }

    pub fn summary(&self, fpr_caps: &[f64]) -> MetricSummary {
        MetricSummary {
            balanced_accuracy: self.balanced_accuracy(),
            auc: roc_auc(&self.scores),
            tpr_at_fpr: fpr_caps.iter().map(|&c| tpr_at_fpr(&self.scores, c)).collect(),
        }
    }

    /// Balanced accuracy after randomly reassigning membership labels over
    /// the pooled evaluation samples (group sizes preserved).
    pub fn shuffled_balanced_accuracy(&self, seed: u64) -> f64 {
        let mut pooled: Vec<bool> = self
            .member_predictions
            .iter()
            .chain(&self.nonmember_predictions)
            .copied()
            .collect();
        pooled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (m, n) = pooled.split_at(self.member_predictions.len());
        balanced_accuracy_from_predictions(m, n)
    }
}

/// Inference-mode posteriors of `model` on every row of `dataset`.
pub fn posteriors(model: &FcnModel, dataset: &TabularDataset) -> Result<Matrix> {
    model.predict_proba(dataset.features())
}

/// Labelled attack rows: members first, then non-members.
pub(crate) fn labelled(members: Vec<Vec<f64>>, nonmembers: Vec<Vec<f64>>) -> Vec<MetaRecord> {
    members
        .into_iter()
        .map(|f| MetaRecord::new(f, true))
        .chain(nonmembers.into_iter().map(|f| MetaRecord::new(f, false)))
        .collect()
}

/// Fits a meta-classifier on shadow rows and scores victim rows.
pub(crate) fn fit_and_score(
    shadow_members: Vec<Vec<f64>>,
    shadow_nonmembers: Vec<Vec<f64>>,
    victim_members: &[Vec<f64>],
    victim_nonmembers: &[Vec<f64>],
    kind: ClassifierKind,
    hyper: &MetaHyper,
    seed: u64,
) -> Result<(MetaClassifier, AttackOutcome)> {
    let records = labelled(shadow_members, shadow_nonmembers);
    let clf = MetaClassifier::fit(kind, &records, hyper, seed)?;
    let scores = AttackScoreSet::new(
        clf.score_many(victim_members)?,
        clf.score_many(victim_nonmembers)?,
    )?;
    Ok((clf, AttackOutcome::from_probabilities(scores)?))
}

/// Mean KL(original || compressed) over members and over non-members.
pub fn kl_by_membership(
    original: &FcnModel,
    compressed: &FcnModel,
    population: Population<'_>,
) -> Result<(f64, f64)> {
    let mean_kl = |ds: &TabularDataset| -> Result<f64> {
        let p = posteriors(original, ds)?;
        let q = posteriors(compressed, ds)?;
        let mut total = 0.0;
        for (pr, qr) in p.iter_rows().zip(q.iter_rows()) {
            total += kl_divergence(pr, qr)?;
        }
        Ok(total / ds.len().max(1) as f64)
    };
    Ok((mean_kl(population.members)?, mean_kl(population.nonmembers)?))
}

/// Writes attack rows as CSV, membership label (1/0) in the last column.
pub fn write_records_csv<W: Write>(records: &[MetaRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        let mut row: Vec<String> = r.features.iter().map(f64::to_string).collect();
        row.push(if r.member { "1" } else { "0" }.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_predictions_follow_threshold() {
        let s = AttackScoreSet::new(vec![0.5, 0.2], vec![0.7, 0.49]).unwrap();
        let o = AttackOutcome::from_probabilities(s).unwrap();
        assert_eq!(o.member_predictions, vec![true, false]);
        assert_eq!(o.nonmember_predictions, vec![true, false]);
        assert_eq!(o.balanced_accuracy(), 0.5);
    }

    #[test]
    fn out_of_range_probability_rejected() {
        let s = AttackScoreSet::new(vec![1.5], vec![0.1]).unwrap();
        assert!(AttackOutcome::from_probabilities(s).is_err());
    }

    #[test]
    fn records_csv_label_last() {
        let recs = vec![MetaRecord::new(vec![0.25, 0.5], true), MetaRecord::new(vec![1.0, 0.0], false)];
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0.25,0.5,1\n1,0,0\n");
    }
}
