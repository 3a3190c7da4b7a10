//! Tabular datasets, the synthetic generator, and the disjoint
//! victim/shadow split protocol.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Feature matrix plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    provenance: String,
}

impl TabularDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::Schema(format!(
                "label {y} of sample {i} is outside 0..{class_count}"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Input("features contain NaN or infinity".into()));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Returns the sub-dataset made of `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> TabularDataset {
        TabularDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            provenance: format!("{}[subset:{}]", self.provenance, indices.len()),
        }
    }
}

/// Column layout of a CSV dataset file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub has_header: bool,
    /// Column holding the integer label; `None` means the last column.
    pub label_column: Option<usize>,
    /// Number of classes; inferred as `max label + 1` when absent.
    pub class_count: Option<usize>,
}

/// Reads a comma-separated dataset. Row order is preserved.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TabularDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1 + usize::from(schema.has_header);
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.is_empty() {
            continue;
        }
        let label_col = schema.label_column.unwrap_or(record.len() - 1);
        if label_col >= record.len() {
            return Err(Error::Schema(format!(
                "label column {label_col} missing on line {line}"
            )));
        }
        let n_features = record.len() - 1;
        match width {
            None => width = Some(n_features),
            Some(w) if w != n_features => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} feature columns, found {n_features}"),
                })
            }
            _ => {}
        }
        for (c, field) in record.iter().enumerate() {
            if c == label_col {
                let y: usize = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("label `{field}` is not a non-negative integer"),
                })?;
                labels.push(y);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {c}: `{field}` is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("column {c} is not finite"),
                    });
                }
                values.push(v);
            }
        }
    }

    let cols = width.unwrap_or(0);
    let class_count = match schema.class_count {
        Some(c) => c,
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    let features = Matrix::from_vec(labels.len(), cols, values)?;
    TabularDataset::new(
        features,
        labels,
        class_count,
        format!("csv:{}", path.display()),
    )
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    /// Standard deviation of each class cluster around its unit-variance centre.
    pub cluster_spread: f64,
    pub seed: u64,
}

/// Draws `n` samples from `C` isotropic Gaussian clusters in `d` dimensions.
///
/// Labels are assigned round-robin before shuffling, so every class is
/// present whenever `n >= C`. Larger spreads overlap the clusters and widen
/// the generalisation gap of a model fitted to few samples.
pub fn synth_generate(params: &SynthParams) -> Result<TabularDataset> {
    let SynthParams {
        samples: n,
        features: d,
        classes: c,
        cluster_spread,
        seed,
    } = *params;
    if c == 0 || n < c {
        return Err(Error::Input(format!("need n >= C >= 1, got n={n}, C={c}")));
    }
    if d == 0 {
        return Err(Error::Input("feature dimension must be at least 1".into()));
    }
    if !(cluster_spread.is_finite() && cluster_spread >= 0.0) {
        return Err(Error::Input("cluster spread must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for centre in &centres[y] {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(centre + cluster_spread * noise);
        }
    }
    TabularDataset::new(
        Matrix::from_vec(n, d, data)?,
        labels,
        c,
        format!("synth:n={n},d={d},C={c},spread={cluster_spread},seed={seed}"),
    )
}

/// Requested sizes of the four split components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub victim_train: usize,
    pub victim_test: usize,
    pub shadow_train: usize,
    pub shadow_test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.victim_train + self.victim_test + self.shadow_train + self.shadow_test
    }
}

/// Disjoint index sets into one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub victim_train: Vec<usize>,
    pub victim_test: Vec<usize>,
    pub shadow_train: Vec<usize>,
    pub shadow_test: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn components(&self) -> [&[usize]; 4] {
        [
            &self.victim_train,
            &self.victim_test,
            &self.shadow_train,
            &self.shadow_test,
        ]
    }

    /// Checks pairwise disjointness and bounds against a dataset of `n` rows.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for part in self.components() {
            for &i in part {
                if i >= n {
                    return Err(Error::Size {
                        requested: i + 1,
                        available: n,
                    });
                }
                if !seen.insert(i) {
                    return Err(Error::Input(format!("index {i} appears in two split components")));
                }
            }
        }
        Ok(())
    }
}

/// Shuffles `0..dataset.len()` and carves the four components off in order.
pub fn make_split(dataset: &TabularDataset, sizes: SplitSizes, seed: u64) -> Result<SplitPlan> {
    let total = sizes.total();
    if total > dataset.len() {
        return Err(Error::Size {
            requested: total,
            available: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut rest = order.as_slice();
    let mut take = |k: usize| {
        let (head, tail) = rest.split_at(k);
        rest = tail;
        head.to_vec()
    };
    let plan = SplitPlan {
        victim_train: take(sizes.victim_train),
        victim_test: take(sizes.victim_test),
        shadow_train: take(sizes.shadow_train),
        shadow_test: take(sizes.shadow_test),
        seed,
    };
    plan.validate(dataset.len())?;
    Ok(plan)
}

/// Partition of a training index set into the fine-tuning subset `D_f` and
/// the held-out remainder `D_nf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    pub fraction: f64,
    pub finetune: Vec<usize>,
    pub held_out: Vec<usize>,
    pub seed: u64,
}

impl FinetunePlan {
    pub fn new(train_indices: &[usize], fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Input(format!(
                "fine-tune fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let mut order = train_indices.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = ((fraction * order.len() as f64).round() as usize).clamp(1, order.len().max(1));
        let held_out = order.split_off(k.min(order.len()));
        Ok(Self {
            fraction,
            finetune: order,
            held_out,
            seed,
        })
    }
}
