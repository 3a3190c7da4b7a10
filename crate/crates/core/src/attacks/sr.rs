//! Attacks that pair the original model with one compressed model as a
//! reference.

use serde::{Deserialize, Serialize};

use super::{fit_and_score, posteriors, AttackOutcome, Population};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::meta::{ClassifierKind, MetaClassifier, MetaHyper};
use crate::nn::FcnModel;

/// How a pair of posteriors becomes an attack feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SrConstruction {
    /// Original posterior sorted descending, compressed posterior in the
    /// same order: `2C` values.
    #[serde(rename = "sr1")]
    SortedConcat,
    /// [`SrConstruction::SortedConcat`] followed by the one-hot label: `3C`.
    #[serde(rename = "sr2")]
    SortedConcatLabel,
    /// Unsorted original, compressed and one-hot label: `3C`.
    #[serde(rename = "direct")]
    DirectConcatLabel,
    /// Euclidean distance between the posteriors and the one-hot label: `C + 1`.
    #[serde(rename = "l2")]
    L2DistanceLabel,
}

impl SrConstruction {
    pub const ALL: [SrConstruction; 4] = [
        Self::SortedConcat,
        Self::SortedConcatLabel,
        Self::DirectConcatLabel,
        Self::L2DistanceLabel,
    ];

    pub fn feature_len(&self, classes: usize) -> usize {
        match self {
            Self::SortedConcat => 2 * classes,
            Self::SortedConcatLabel | Self::DirectConcatLabel => 3 * classes,
            Self::L2DistanceLabel => classes + 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SortedConcat => "sr1",
            Self::SortedConcatLabel => "sr2",
            Self::DirectConcatLabel => "direct",
            Self::L2DistanceLabel => "l2",
        }
    }
}

impl std::str::FromStr for SrConstruction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown SR construction `{s}`")))
    }
}

/// Indices that sort `values` in descending order; ties keep index order.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

pub fn build_sr_metadata(
    p_original: &[f64],
    p_compressed: &[f64],
    label: usize,
    method: SrConstruction,
) -> Result<Vec<f64>> {
    let c = p_original.len();
    if p_compressed.len() != c {
        return Err(Error::Shape(format!(
            "posteriors have lengths {c} and {}",
            p_compressed.len()
        )));
    }
    if label >= c {
        return Err(Error::Input(format!("label {label} outside 0..{c}")));
    }
    let onehot = |out: &mut Vec<f64>| {
        let start = out.len();
        out.resize(start + c, 0.0);
        out[start + label] = 1.0;
    };
    let mut out = Vec::with_capacity(method.feature_len(c));
    match method {
        SrConstruction::SortedConcat | SrConstruction::SortedConcatLabel => {
            let order = descending_order(p_original);
            out.extend(order.iter().map(|&i| p_original[i]));
            out.extend(order.iter().map(|&i| p_compressed[i]));
            if method == SrConstruction::SortedConcatLabel {
                onehot(&mut out);
            }
        }
        SrConstruction::DirectConcatLabel => {
            out.extend_from_slice(p_original);
            out.extend_from_slice(p_compressed);
            onehot(&mut out);
        }
        SrConstruction::L2DistanceLabel => {
            let d = p_original
                .iter()
                .zip(p_compressed)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            out.push(d);
            onehot(&mut out);
        }
    }
    Ok(out)
}

/// An original model together with one of its compressed versions.
#[derive(Debug, Clone, Copy)]
pub struct ModelPair<'a> {
    pub original: &'a FcnModel,
    pub compressed: &'a FcnModel,
}

impl ModelPair<'_> {
    /// SR feature rows for every sample of `dataset`.
    pub fn sr_rows(&self, dataset: &TabularDataset, method: SrConstruction) -> Result<Vec<Vec<f64>>> {
        let po = posteriors(self.original, dataset)?;
        let pc = posteriors(self.compressed, dataset)?;
        po.iter_rows()
            .zip(pc.iter_rows())
            .zip(dataset.labels())
            .map(|((a, b), &y)| build_sr_metadata(a, b, y, method))
            .collect()
    }
}

/// Trains the SR meta-classifier on shadow-pair features (shadow train =
/// member, shadow test = non-member) and scores the victim pair.
#[allow(clippy::too_many_arguments)]
pub fn run_sr(
    shadow_pair: ModelPair<'_>,
    shadow: Population<'_>,
    victim_pair: ModelPair<'_>,
    victim: Population<'_>,
    construction: SrConstruction,
    kind: ClassifierKind,
    hyper: &MetaHyper,
    seed: u64,
) -> Result<(MetaClassifier, AttackOutcome)> {
    fit_and_score(
        shadow_pair.sr_rows(shadow.members, construction)?,
        shadow_pair.sr_rows(shadow.nonmembers, construction)?,
        &victim_pair.sr_rows(victim.members, construction)?,
        &victim_pair.sr_rows(victim.nonmembers, construction)?,
        kind,
        hyper,
        seed,
    )
}
