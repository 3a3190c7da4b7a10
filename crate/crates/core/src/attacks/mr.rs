//! Attacks that aggregate several compressed versions of the same model.
//!
//! Feature layout of one attack row with `n` compressed models ordered by
//! ascending degree:
//!
//! * `Adv1`: `[1 - s_1, s_1, .., 1 - s_n, s_n, l_1, .., l_n]` where `s_i` is
//!   the SR meta-posterior of model `i` (length `3n`).
//! * `Adv2`: `[p_1, .., p_n, l_1, .., l_n]` with `p_i` the raw posterior of
//!   model `i` (length `n * C + n`).
//!
//! `l_i` is the cross-entropy loss of model `i` on the sample's label.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sr::{ModelPair, SrConstruction};
use super::{fit_and_score, labelled, posteriors, AttackOutcome, Population};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::meta::{ClassifierKind, MetaClassifier, MetaHyper};
use crate::nn::{cross_entropy_loss, FcnModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adversary {
    /// Sees the original model and every compressed model.
    Adv1,
    /// Sees only the compressed models.
    Adv2,
}

impl std::str::FromStr for Adversary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adv1" => Ok(Self::Adv1),
            "adv2" => Ok(Self::Adv2),
            other => Err(Error::Config(format!("unknown adversary `{other}`"))),
        }
    }
}

/// A compressed model together with its compression degree.
#[derive(Debug, Clone, Copy)]
pub struct RankedModel<'a> {
    pub model: &'a FcnModel,
    pub degree: i64,
}

/// Rejects any pair of models whose degree decreases. Equal degrees are
/// accepted so a model can be listed twice.
pub(crate) fn check_order(models: &[RankedModel<'_>]) -> Result<()> {
    if let Some(w) = models.windows(2).find(|w| w[0].degree > w[1].degree) {
        return Err(Error::Ordering(format!(
            "compression degree {} listed before {}",
            w[0].degree, w[1].degree
        )));
    }
    Ok(())
}

/// Everything needed to turn one sample into MR posterior features.
#[derive(Debug, Clone)]
pub struct MrInput<'a> {
    pub adversary: Adversary,
    /// Required by `Adv1` to build SR features.
    pub original: Option<&'a FcnModel>,
    pub compressed: Vec<RankedModel<'a>>,
    /// One per compressed model, same order (`Adv1` only).
    pub sr_classifiers: &'a [MetaClassifier],
    pub construction: SrConstruction,
}

impl MrInput<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.compressed.len() < 2 {
            return Err(Error::Config(format!(
                "multi-model attack needs at least 2 compressed models, got {}",
                self.compressed.len()
            )));
        }
        check_order(&self.compressed)?;
        if self.adversary == Adversary::Adv1 {
            if self.original.is_none() {
                return Err(Error::Config("adversary 1 needs the original model".into()));
            }
            if self.sr_classifiers.len() != self.compressed.len() {
                return Err(Error::Config(format!(
                    "adversary 1 needs one SR classifier per compressed model ({} for {})",
                    self.sr_classifiers.len(),
                    self.compressed.len()
                )));
            }
        }
        Ok(())
    }

    /// Posterior part of the attack rows for a batch of samples.
    fn posterior_rows(&self, inputs: &Matrix, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rows = vec![Vec::new(); inputs.rows()];
        match self.adversary {
            Adversary::Adv1 => {
                let po = self.original.expect("validated").predict_proba(inputs)?;
                for (ranked, clf) in self.compressed.iter().zip(self.sr_classifiers) {
                    let pc = ranked.model.predict_proba(inputs)?;
                    for (i, row) in rows.iter_mut().enumerate() {
                        let f = super::build_sr_metadata(po.row(i), pc.row(i), labels[i], self.construction)?;
                        let s = clf.score_proba(&f)?;
                        row.extend([1.0 - s, s]);
                    }
                }
            }
            Adversary::Adv2 => {
                for ranked in &self.compressed {
                    let pc = ranked.model.predict_proba(inputs)?;
                    for (i, row) in rows.iter_mut().enumerate() {
                        row.extend_from_slice(pc.row(i));
                    }
                }
            }
        }
        Ok(rows)
    }
}

fn single_row(features: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(1, features.len(), features.to_vec())
}

/// MR posterior features of one sample; see the module docs for the layout.
pub fn mr_posterior_concat(features: &[f64], label: usize, input: &MrInput<'_>) -> Result<Vec<f64>> {
    let mut rows = input.posterior_rows(&single_row(features)?, &[label])?;
    Ok(rows.remove(0))
}

fn loss_rows(models: &[RankedModel<'_>], inputs: &Matrix, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    check_order(models)?;
    let mut rows = vec![Vec::with_capacity(models.len()); inputs.rows()];
    for ranked in models {
        let p = ranked.model.predict_proba(inputs)?;
        for (i, row) in rows.iter_mut().enumerate() {
            row.push(cross_entropy_loss(p.row(i), labels[i]));
        }
    }
    Ok(rows)
}

/// Cross-entropy loss of the sample under each model, in the given order.
pub fn mr_loss_concat(features: &[f64], label: usize, models: &[RankedModel<'_>]) -> Result<Vec<f64>> {
    let mut rows = loss_rows(models, &single_row(features)?, &[label])?;
    Ok(rows.remove(0))
}

fn attack_rows(input: &MrInput<'_>, ds: &TabularDataset) -> Result<Vec<Vec<f64>>> {
    let mut rows = input.posterior_rows(ds.features(), ds.labels())?;
    for (row, losses) in rows.iter_mut().zip(loss_rows(&input.compressed, ds.features(), ds.labels())?) {
        row.extend(losses);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrConfig {
    pub adversary: Adversary,
    pub construction: SrConstruction,
    /// Classifier family of the per-model SR classifiers (`Adv1`).
    pub sr_kind: ClassifierKind,
    pub hyper: MetaHyper,
    /// Folds used to produce out-of-fold SR meta-posteriors on shadow data.
    pub folds: usize,
}

impl Default for MrConfig {
    fn default() -> Self {
        Self {
            adversary: Adversary::Adv1,
            construction: SrConstruction::SortedConcatLabel,
            sr_kind: ClassifierKind::Mlp,
            hyper: MetaHyper::default(),
            folds: 5,
        }
    }
}

/// One side (shadow or victim) of a multi-model attack.
#[derive(Debug, Clone)]
pub struct MrSide<'a> {
    pub original: Option<&'a FcnModel>,
    pub compressed: Vec<RankedModel<'a>>,
    pub population: Population<'a>,
}

/// Result of [`run_mr`].
#[derive(Debug, Clone)]
pub struct MrRun {
    pub meta: MetaClassifier,
    /// SR classifiers fitted on all shadow records (`Adv1`), used to build
    /// the victim rows.
    pub sr_classifiers: Vec<MetaClassifier>,
    pub outcome: AttackOutcome,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// SR meta-posteriors of every shadow record, each produced by a classifier
/// that did not see that record.
fn out_of_fold_scores(
    pair: ModelPair<'_>,
    shadow: Population<'_>,
    config: &MrConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let records = labelled(
        pair.sr_rows(shadow.members, config.construction)?,
        pair.sr_rows(shadow.nonmembers, config.construction)?,
    );
    let n = records.len();
    let folds = config.folds.clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut scores = vec![0.0; n];
    for k in 0..folds {
        let train: Vec<_> = records
            .iter()
            .zip(&fold_of)
            .filter(|(_, &f)| f != k)
            .map(|(r, _)| r.clone())
            .collect();
        let clf = MetaClassifier::fit(config.sr_kind, &train, &config.hyper, mix(seed, 1, k as u64))?;
        for i in (0..n).filter(|&i| fold_of[i] == k) {
            scores[i] = clf.score_proba(&records[i].features)?;
        }
    }
    let nonmember = scores.split_off(shadow.members.len());
    Ok((scores, nonmember))
}

/// Trains the MLP meta-classifier on shadow rows and scores the victim.
///
/// For `Adv1` the shadow rows use out-of-fold SR meta-posteriors, while
/// the victim rows use SR classifiers fitted on every shadow record.
pub fn run_mr(config: &MrConfig, shadow: &MrSide<'_>, victim: &MrSide<'_>, seed: u64) -> Result<MrRun> {
    if shadow.compressed.len() != victim.compressed.len() {
        return Err(Error::Config(format!(
            "shadow side has {} compressed models, victim side {}",
            shadow.compressed.len(),
            victim.compressed.len()
        )));
    }
    let mut sr_classifiers = Vec::new();
    let (shadow_members, shadow_nonmembers) = match config.adversary {
        Adversary::Adv2 => {
            let input = MrInput {
                adversary: Adversary::Adv2,
                original: None,
                compressed: shadow.compressed.clone(),
                sr_classifiers: &[],
                construction: config.construction,
            };
            input.validate()?;
            (
                attack_rows(&input, shadow.population.members)?,
                attack_rows(&input, shadow.population.nonmembers)?,
            )
        }
        Adversary::Adv1 => {
            let original = shadow
                .original
                .ok_or_else(|| Error::Config("adversary 1 needs the shadow original".into()))?;
            if shadow.compressed.len() < 2 {
                return Err(Error::Config("multi-model attack needs at least 2 compressed models".into()));
            }
            check_order(&shadow.compressed)?;
            let pop = shadow.population;
            let mut members = vec![Vec::new(); pop.members.len()];
            let mut nonmembers = vec![Vec::new(); pop.nonmembers.len()];
            for (i, ranked) in shadow.compressed.iter().enumerate() {
                let pair = ModelPair {
                    original,
                    compressed: ranked.model,
                };
                let (sm, sn) = out_of_fold_scores(pair, pop, config, mix(seed, 2, i as u64))?;
                for (row, s) in members.iter_mut().zip(sm).chain(nonmembers.iter_mut().zip(sn)) {
                    row.extend([1.0 - s, s]);
                }
                let full = labelled(
                    pair.sr_rows(pop.members, config.construction)?,
                    pair.sr_rows(pop.nonmembers, config.construction)?,
                );
                sr_classifiers.push(MetaClassifier::fit(
                    config.sr_kind,
                    &full,
                    &config.hyper,
                    mix(seed, 3, i as u64),
                )?);
            }
            for (ds, rows) in [(pop.members, &mut members), (pop.nonmembers, &mut nonmembers)] {
                for (row, losses) in rows
                    .iter_mut()
                    .zip(loss_rows(&shadow.compressed, ds.features(), ds.labels())?)
                {
                    row.extend(losses);
                }
            }
            (members, nonmembers)
        }
    };

    let victim_input = MrInput {
        adversary: config.adversary,
        original: victim.original,
        compressed: victim.compressed.clone(),
        sr_classifiers: &sr_classifiers,
        construction: config.construction,
    };
    let victim_members = attack_rows(&victim_input, victim.population.members)?;
    let victim_nonmembers = attack_rows(&victim_input, victim.population.nonmembers)?;
    let (meta, outcome) = fit_and_score(
        shadow_members,
        shadow_nonmembers,
        &victim_members,
        &victim_nonmembers,
        ClassifierKind::Mlp,
        &config.hyper,
        mix(seed, 4, 0),
    )?;
    Ok(MrRun {
        meta,
        sr_classifiers,
        outcome,
    })
}

/// Posteriors of each ranked model on `dataset`, in order.
pub fn ranked_posteriors(models: &[RankedModel<'_>], dataset: &TabularDataset) -> Result<Vec<Matrix>> {
    models.iter().map(|m| posteriors(m.model, dataset)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthParams};
    use crate::meta::LogisticRegression;
    use crate::nn::Layer;

    /// A model whose posterior is `p` for every input.
    fn constant(p: &[f64]) -> FcnModel {
        FcnModel::from_layers(
            vec![Layer {
                weights: Matrix::zeros(p.len(), 1),
                bias: p.iter().map(|v| v.ln()).collect(),
            }],
            vec![],
        )
        .unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn adversary_two_concatenates_posteriors() {
        let (a, b) = (constant(&[0.2, 0.8]), constant(&[0.6, 0.4]));
        let input = MrInput {
            adversary: Adversary::Adv2,
            original: None,
            compressed: vec![RankedModel { model: &a, degree: 60 }, RankedModel { model: &b, degree: 70 }],
            sr_classifiers: &[],
            construction: SrConstruction::SortedConcat,
        };
        let f = mr_posterior_concat(&[0.0], 0, &input).unwrap();
        assert!(close(&f, &[0.2, 0.8, 0.6, 0.4]), "{f:?}");
    }

    #[test]
    fn adversary_one_with_uninformative_classifiers() {
        let (o, a, b) = (constant(&[0.3, 0.7]), constant(&[0.2, 0.8]), constant(&[0.6, 0.4]));
        let clfs = vec![
            MetaClassifier::Lr(LogisticRegression::from_parameters(vec![0.0; 4], 0.0)),
            MetaClassifier::Lr(LogisticRegression::from_parameters(vec![0.0; 4], 0.0)),
        ];
        let mut input = MrInput {
            adversary: Adversary::Adv1,
            original: Some(&o),
            compressed: vec![RankedModel { model: &a, degree: 60 }, RankedModel { model: &b, degree: 70 }],
            sr_classifiers: &clfs,
            construction: SrConstruction::SortedConcat,
        };
        assert_eq!(mr_posterior_concat(&[1.0], 1, &input).unwrap(), vec![0.5; 4]);
        input.sr_classifiers = &clfs[..1];
        assert!(matches!(mr_posterior_concat(&[1.0], 1, &input), Err(Error::Config(_))));
    }

    #[test]
    fn reversing_models_reverses_blocks() {
        let ps = [[0.1, 0.2, 0.7], [0.5, 0.25, 0.25], [0.3, 0.3, 0.4]];
        let models: Vec<FcnModel> = ps.iter().map(|p| constant(p)).collect();
        let build = |order: &[usize]| {
            let input = MrInput {
                adversary: Adversary::Adv2,
                original: None,
                compressed: order
                    .iter()
                    .enumerate()
                    .map(|(d, &i)| RankedModel {
                        model: &models[i],
                        degree: d as i64,
                    })
                    .collect(),
                sr_classifiers: &[],
                construction: SrConstruction::SortedConcat,
            };
            mr_posterior_concat(&[0.0], 2, &input).unwrap()
        };
        let fwd = build(&[0, 1, 2]);
        let rev = build(&[2, 1, 0]);
        for k in 0..3 {
            assert_eq!(fwd[3 * k..3 * k + 3], rev[3 * (2 - k)..3 * (2 - k) + 3]);
        }
    }

    #[test]
    fn descending_degrees_rejected() {
        let a = constant(&[0.5, 0.5]);
        let models = [RankedModel { model: &a, degree: 90 }, RankedModel { model: &a, degree: 60 }];
        assert!(matches!(mr_loss_concat(&[0.0], 0, &models), Err(Error::Ordering(_))));
        let input = MrInput {
            adversary: Adversary::Adv2,
            original: None,
            compressed: models.to_vec(),
            sr_classifiers: &[],
            construction: SrConstruction::SortedConcat,
        };
        assert!(matches!(input.validate(), Err(Error::Ordering(_))));
        let single = MrInput {
            compressed: models[..1].to_vec(),
            ..input
        };
        assert!(matches!(single.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn losses_match_cross_entropy() {
        let ps = [[0.1, 0.9], [0.4, 0.6], [1.0 - 1e-15, 1e-15]];
        let models: Vec<FcnModel> = ps.iter().map(|p| constant(p)).collect();
        let ranked: Vec<RankedModel> = models
            .iter()
            .enumerate()
            .map(|(d, m)| RankedModel { model: m, degree: d as i64 })
            .collect();
        let l = mr_loss_concat(&[3.0], 1, &ranked).unwrap();
        for (k, p) in ps.iter().enumerate() {
            let q = models[k].predict_proba(&Matrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
            assert_eq!(l[k], cross_entropy_loss(q.row(0), 1));
            assert!((l[k] - cross_entropy_loss(p, 1)).abs() < 1e-9);
        }
        let dup = [ranked[0], ranked[0]];
        let l = mr_loss_concat(&[0.0], 0, &dup).unwrap();
        assert_eq!(l[0], l[1]);
    }

    fn tiny_side_data(seed: u64) -> (TabularDataset, TabularDataset) {
        let ds = synth_generate(&SynthParams {
            samples: 80,
            features: 4,
            classes: 3,
            cluster_spread: 1.0,
            seed,
        })
        .unwrap();
        let idx: Vec<usize> = (0..80).collect();
        (ds.subset(&idx[..40]), ds.subset(&idx[40..]))
    }

    fn quick_hyper() -> MetaHyper {
        MetaHyper {
            mlp_epochs: 5,
            rf_trees: 5,
            ..MetaHyper::default()
        }
    }

    #[test]
    fn end_to_end_feature_lengths_and_duplication() {
        let (sm, sn) = tiny_side_data(1);
        let (vm, vn) = tiny_side_data(2);
        let orig = FcnModel::with_layers(&[4, 8, 3], 0.0, 0).unwrap();
        let c1 = FcnModel::with_layers(&[4, 8, 3], 0.0, 1).unwrap();
        let c2 = FcnModel::with_layers(&[4, 8, 3], 0.0, 2).unwrap();
        let ranked = vec![RankedModel { model: &c1, degree: 60 }, RankedModel { model: &c2, degree: 80 }];
        let shadow = MrSide {
            original: Some(&orig),
            compressed: ranked.clone(),
            population: Population { members: &sm, nonmembers: &sn },
        };
        let victim = MrSide {
            original: Some(&orig),
            compressed: ranked.clone(),
            population: Population { members: &vm, nonmembers: &vn },
        };
        let mut config = MrConfig {
            adversary: Adversary::Adv2,
            hyper: quick_hyper(),
            folds: 3,
            ..MrConfig::default()
        };
        let run = run_mr(&config, &shadow, &victim, 7).unwrap();
        assert_eq!(run.meta.feature_dim(), 2 * 3 + 2);
        assert!(run.sr_classifiers.is_empty());

        config.adversary = Adversary::Adv1;
        let run = run_mr(&config, &shadow, &victim, 7).unwrap();
        assert_eq!(run.meta.feature_dim(), 3 * 2);
        assert_eq!(run.sr_classifiers.len(), 2);
        assert!(run
            .outcome
            .scores
            .member_scores
            .iter()
            .chain(&run.outcome.scores.nonmember_scores)
            .all(|s| (0.0..=1.0).contains(s)));

        let dup = vec![ranked[0], ranked[0]];
        let shadow_dup = MrSide {
            compressed: dup.clone(),
            ..shadow.clone()
        };
        let victim_dup = MrSide {
            compressed: dup,
            ..victim.clone()
        };
        let run = run_mr(&config, &shadow_dup, &victim_dup, 7).unwrap();
        assert_eq!(run.outcome.scores.member_scores.len(), 40);
    }
}
