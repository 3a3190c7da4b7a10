use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{Adversary, NrMetric, SrConstruction};
use crate::compression::{CompressionKind, PruneScope};
use crate::data::{load_csv, synth_generate, CsvSchema, SplitSizes, SynthParams, TabularDataset};
use crate::error::{Error, Result};
use crate::meta::{ClassifierKind, MetaHyper};
use crate::nn::{DpConfig, TrainConfig, DEFAULT_DROPOUT, DEFAULT_HIDDEN};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synth {
        samples: usize,
        features: usize,
        classes: usize,
        cluster_spread: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
        label_column: Option<usize>,
        class_count: Option<usize>,
    },
}

impl DatasetSpec {
    /// Relative CSV paths are resolved against `base` (the plan's directory).
    pub fn load(&self, base: &Path) -> Result<TabularDataset> {
        match self {
            Self::Synth {
                samples,
                features,
                classes,
                cluster_spread,
                seed,
            } => synth_generate(&SynthParams {
                samples: *samples,
                features: *features,
                classes: *classes,
                cluster_spread: *cluster_spread,
                seed: *seed,
            }),
            Self::Csv {
                path,
                has_header,
                label_column,
                class_count,
            } => load_csv(
                base.join(path),
                &CsvSchema {
                    has_header: *has_header,
                    label_column: *label_column,
                    class_count: *class_count,
                },
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout: DEFAULT_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Int8Mode {
    #[default]
    Ptq,
    Qat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionSpec {
    /// Pruning sparsities in (0, 1).
    pub sparsity: Vec<f64>,
    /// Cluster counts per layer.
    pub clusters: Vec<usize>,
    pub int8: bool,
    pub int8_mode: Int8Mode,
    pub prune_scope: PruneScope,
    /// Epochs of constrained fine-tuning after pruning and clustering (and
    /// of QAT); 0 skips fine-tuning.
    pub finetune_epochs: usize,
    /// Fine-tuning rate for clustered models; absent means the training
    /// rate. A centroid moves by the summed gradient of its members, so a
    /// rate near `train.learning_rate / weights_per_cluster` is typical.
    pub cluster_learning_rate: Option<f64>,
}

impl Default for CompressionSpec {
    fn default() -> Self {
        Self {
            sparsity: vec![0.6, 0.7, 0.8, 0.9],
            clusters: vec![],
            int8: false,
            int8_mode: Int8Mode::Ptq,
            prune_scope: PruneScope::Global,
            finetune_epochs: 3,
            cluster_learning_rate: None,
        }
    }
}

impl CompressionSpec {
    /// Every requested compression, in declaration order.
    pub fn kinds(&self) -> Vec<CompressionKind> {
        let mut out: Vec<CompressionKind> = self
            .sparsity
            .iter()
            .map(|&s| CompressionKind::Prune { sparsity: s })
            .collect();
        if self.int8 {
            out.push(CompressionKind::Int8);
        }
        out.extend(self.clusters.iter().map(|&n| CompressionKind::Cluster { clusters: n }));
        out
    }

    pub fn tags(&self) -> Vec<String> {
        self.kinds().iter().map(CompressionKind::tag).collect()
    }
}

/// A training-based single-model attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NrTrainingSpec {
    pub classifier: ClassifierKind,
    #[serde(default)]
    pub with_label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrSpec {
    pub construction: SrConstruction,
    pub classifier: ClassifierKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrSpec {
    pub adversaries: Vec<Adversary>,
    /// Compression tags to aggregate; empty means every pruning level.
    pub targets: Vec<String>,
    pub sr_construction: SrConstruction,
    pub sr_classifier: ClassifierKind,
    pub folds: usize,
}

impl Default for MrSpec {
    fn default() -> Self {
        Self {
            adversaries: vec![Adversary::Adv1, Adversary::Adv2],
            targets: vec![],
            sr_construction: SrConstruction::SortedConcatLabel,
            sr_classifier: ClassifierKind::Rf,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub nr_metrics: Vec<NrMetric>,
    pub nr_training: Vec<NrTrainingSpec>,
    pub sr: Vec<SrSpec>,
    pub mr: Option<MrSpec>,
    /// Compression tags attacked by NR and SR; empty means all of them.
    pub targets: Vec<String>,
    /// Also run NR attacks against the uncompressed original.
    pub include_original: bool,
    pub meta: MetaHyper,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            nr_metrics: vec![NrMetric::Loss, NrMetric::ModifiedEntropy],
            nr_training: vec![],
            sr: vec![SrSpec {
                construction: SrConstruction::SortedConcatLabel,
                classifier: ClassifierKind::Rf,
            }],
            mr: None,
            targets: vec![],
            include_original: false,
            meta: MetaHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSpec {
    pub fpr_caps: Vec<f64>,
    /// Also report balanced accuracy under shuffled membership labels.
    pub null_control: bool,
    pub roc_csv: bool,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            fpr_caps: vec![0.001, 0.01],
            null_control: true,
            roc_csv: true,
        }
    }
}

/// A complete experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSpec,
    pub splits: SplitSizes,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub compression: CompressionSpec,
    /// Share of the victim (or shadow) training set used for fine-tuning
    /// compressed models; absent means all of it.
    #[serde(default)]
    pub finetune_fraction: Option<f64>,
    #[serde(default)]
    pub attacks: AttackSpec,
    #[serde(default)]
    pub metrics: MetricSpec,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed_base: u64,
}

fn default_repetitions() -> usize {
    5
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Seeds of the repetitions, `seed_base .. seed_base + R`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|r| self.seed_base + r).collect()
    }

    /// SHA-256 of the canonical JSON form of the plan.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("plan serialises");
        hex::encode(Sha256::digest(canonical))
    }

    /// NR and SR target tags after applying the `targets` filter.
    pub fn attack_targets(&self) -> Vec<String> {
        let all = self.compression.tags();
        if self.attacks.targets.is_empty() {
            all
        } else {
            all.into_iter().filter(|t| self.attacks.targets.contains(t)).collect()
        }
    }

    /// MR targets in ascending degree order.
    pub fn mr_targets(&self) -> Vec<String> {
        let Some(mr) = &self.attacks.mr else {
            return vec![];
        };
        let mut kinds: Vec<CompressionKind> = self
            .compression
            .kinds()
            .into_iter()
            .filter(|k| {
                if mr.targets.is_empty() {
                    matches!(k, CompressionKind::Prune { .. })
                } else {
                    mr.targets.contains(&k.tag())
                }
            })
            .collect();
        kinds.sort_by_key(|k| k.degree_tag());
        kinds.iter().map(CompressionKind::tag).collect()
    }

    /// Everything checkable without touching data or models.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Plan(m));
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1".into());
        }
        if let DatasetSpec::Synth {
            samples,
            features,
            classes,
            cluster_spread,
            ..
        } = &self.dataset
        {
            if *samples < self.splits.total() {
                return fail(format!(
                    "synthetic dataset has {samples} samples but the splits need {}",
                    self.splits.total()
                ));
            }
            if *features == 0 || *classes < 2 || cluster_spread.is_nan() || *cluster_spread < 0.0 {
                return fail("synthetic dataset needs features >= 1, classes >= 2, spread >= 0".into());
            }
        }
        let s = &self.splits;
        if [s.victim_train, s.victim_test, s.shadow_train, s.shadow_test].contains(&0) {
            return fail("every split component must be non-empty".into());
        }
        if self.model.hidden.contains(&0) || !(0.0..1.0).contains(&self.model.dropout) {
            return fail("hidden widths must be positive and dropout in [0, 1)".into());
        }
        self.train.validate().map_err(|e| Error::Plan(e.to_string()))?;
        if let Some(dp) = &self.dp {
            dp.validate().map_err(|e| Error::Plan(e.to_string()))?;
        }
        if let Some(f) = self.finetune_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return fail(format!("finetune_fraction {f} outside (0, 1]"));
            }
        }

        let c = &self.compression;
        if let Some(bad) = c.sparsity.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return fail(format!("sparsity {bad} outside (0, 1)"));
        }
        if let Some(bad) = c.clusters.iter().find(|&&n| n < 1 || n > usize::from(u16::MAX)) {
            return fail(format!("cluster count {bad} outside 1..=65535"));
        }
        if let Some(lr) = c.cluster_learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("cluster_learning_rate {lr} must be positive"));
            }
        }
        let tags = c.tags();
        let unique: BTreeSet<&String> = tags.iter().collect();
        if unique.len() != tags.len() {
            return fail("duplicate compression level".into());
        }
        if tags.is_empty() && !self.attacks.include_original {
            return fail("no compression levels and no attack on the original".into());
        }

        let a = &self.attacks;
        for t in &a.targets {
            if !tags.contains(t) {
                return fail(format!("attack target `{t}` is not a declared compression level"));
            }
        }
        if let Some(mr) = &a.mr {
            for t in &mr.targets {
                if !tags.contains(t) {
                    return fail(format!("MR target `{t}` is not a declared compression level"));
                }
            }
            if mr.adversaries.is_empty() {
                return fail("MR section lists no adversary".into());
            }
            if self.mr_targets().len() < 2 {
                return fail("MR needs at least 2 compression levels".into());
            }
            let families: BTreeSet<&str> = c
                .kinds()
                .iter()
                .filter(|k| self.mr_targets().contains(&k.tag()))
                .map(|k| k.family())
                .collect();
            if families.len() > 1 {
                return fail("MR targets must share one compression family so degrees are comparable".into());
            }
            if mr.folds < 2 {
                return fail("MR needs at least 2 folds".into());
            }
        }
        if a.nr_metrics.is_empty() && a.nr_training.is_empty() && a.sr.is_empty() && a.mr.is_none() {
            return fail("no attacks selected".into());
        }
        if !a.sr.is_empty() && self.attack_targets().is_empty() {
            return fail("SR attacks need at least one compressed target".into());
        }
        if let Some(bad) = self.metrics.fpr_caps.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return fail(format!("fpr cap {bad} outside [0, 1]"));
        }
        Ok(())
    }
}
