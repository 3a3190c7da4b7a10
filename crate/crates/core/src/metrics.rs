//! Attack evaluation: balanced accuracy, ROC/AUC, TPR at a capped FPR and
//! KL divergence between paired posteriors. Logarithms are natural (nats).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PROB_FLOOR;

/// Membership scores of the two populations; higher means "more member".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScoreSet {
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
}

impl AttackScoreSet {
    pub fn new(member_scores: Vec<f64>, nonmember_scores: Vec<f64>) -> Result<Self> {
        let set = Self {
            member_scores,
            nonmember_scores,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.member_scores.is_empty() || self.nonmember_scores.is_empty() {
            return Err(Error::Input("both score populations must be non-empty".into()));
        }
        if self
            .member_scores
            .iter()
            .chain(&self.nonmember_scores)
            .any(|s| !s.is_finite())
        {
            return Err(Error::Input("scores must be finite".into()));
        }
        Ok(())
    }

    /// Swaps the roles of members and non-members.
    pub fn swapped(&self) -> Self {
        Self {
            member_scores: self.nonmember_scores.clone(),
            nonmember_scores: self.member_scores.clone(),
        }
    }
}

/// `(TPR + TNR) / 2` where a score `>= threshold` is predicted member.
pub fn balanced_accuracy(scores: &AttackScoreSet, threshold: f64) -> f64 {
    let tp = scores.member_scores.iter().filter(|&&s| s >= threshold).count();
    let tn = scores.nonmember_scores.iter().filter(|&&s| s < threshold).count();
    0.5 * (tp as f64 / scores.member_scores.len() as f64
        + tn as f64 / scores.nonmember_scores.len() as f64)
}

/// Balanced accuracy of hard predictions (`true` = predicted member).
pub fn balanced_accuracy_from_predictions(member_preds: &[bool], nonmember_preds: &[bool]) -> f64 {
    let tpr = member_preds.iter().filter(|&&p| p).count() as f64 / member_preds.len().max(1) as f64;
    let tnr =
        nonmember_preds.iter().filter(|&&p| !p).count() as f64 / nonmember_preds.len().max(1) as f64;
    0.5 * (tpr + tnr)
}

/// One operating point of the empirical ROC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Operating points from threshold `+inf` (0, 0) down to `-inf` (1, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Area under the piecewise-linear curve through the operating points.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[0].tpr + w[1].tpr))
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

pub fn roc_curve(scores: &AttackScoreSet) -> RocCurve {
    let mut all: Vec<(f64, bool)> = scores
        .member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (m, n) = (
        scores.member_scores.len() as f64,
        scores.nonmember_scores.len() as f64,
    );
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n,
            tpr: tp as f64 / m,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    RocCurve { points }
}

/// Mann-Whitney AUC: probability that a member outscores a non-member, ties
/// counting one half. Computed from mid-ranks in `O(n log n)`.
pub fn roc_auc(scores: &AttackScoreSet) -> f64 {
    let mut all: Vec<(f64, bool)> = scores
        .member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut member_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        member_rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let m = scores.member_scores.len() as f64;
    let n = scores.nonmember_scores.len() as f64;
    (member_rank_sum - m * (m + 1.0) / 2.0) / (m * n)
}

/// TPR at a capped FPR, with a flag when too few non-members exist to
/// resolve the cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub fpr_cap: f64,
    pub tpr: f64,
    pub small_sample: bool,
}

/// Largest TPR among empirical operating points with `FPR <= fpr_cap`; no
/// interpolation between points.
pub fn tpr_at_fpr(scores: &AttackScoreSet, fpr_cap: f64) -> TprAtFpr {
    let curve = roc_curve(scores);
    let tpr = curve
        .points
        .iter()
        .filter(|p| p.fpr <= fpr_cap)
        .map(|p| p.tpr)
        .fold(0.0, f64::max);
    let n = scores.nonmember_scores.len() as f64;
    TprAtFpr {
        fpr_cap,
        tpr,
        small_sample: fpr_cap <= 0.0 || n < (1.0 / fpr_cap).ceil(),
    }
}

/// `sum_k p_k ln(p_k / q_k)` with both arguments of the log clamped to 1e-12.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL arguments have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (pk.max(PROB_FLOOR) / qk.max(PROB_FLOOR)).ln())
        .sum())
}

/// Balanced accuracy, AUC and TPR at each requested FPR cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub tpr_at_fpr: Vec<TprAtFpr>,
}
