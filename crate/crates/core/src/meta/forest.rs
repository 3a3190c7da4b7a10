use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MetaHyper, MetaRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Node {
    Leaf {
        member_fraction: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// CART tree with Gini splits; `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { member_fraction } => return *member_fraction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct TreeBuilder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [bool],
    max_depth: usize,
    min_leaf: usize,
    max_features: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, samples: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let n = samples.len();
        let members = samples.iter().filter(|&&i| self.ys[i]).count();
        let leaf = Node::Leaf {
            member_fraction: members as f64 / n as f64,
        };
        self.nodes.push(leaf);
        if depth >= self.max_depth || members == 0 || members == n || n < 2 * self.min_leaf {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(samples, members) else {
            return id;
        };
        let mut mid = 0;
        for k in 0..n {
            if self.xs[samples[k]][feature] <= threshold {
                samples.swap(k, mid);
                mid += 1;
            }
        }
        let (l, r) = samples.split_at_mut(mid);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Lowest weighted child Gini impurity among candidate thresholds of
    /// `max_features` randomly ordered, non-constant features.
    fn best_split(&mut self, samples: &[usize], members: usize) -> Option<(usize, f64)> {
        let dim = self.xs[samples[0]].len();
        let mut features: Vec<usize> = (0..dim).collect();
        features.shuffle(&mut self.rng);
        let n = samples.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut visited = 0;
        let mut column: Vec<(f64, bool)> = Vec::with_capacity(samples.len());
        for &f in &features {
            if visited >= self.max_features {
                break;
            }
            column.clear();
            column.extend(samples.iter().map(|&i| (self.xs[i][f], self.ys[i])));
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            if column[0].0 == column[column.len() - 1].0 {
                continue;
            }
            visited += 1;
            let mut left_members = 0usize;
            for k in 0..column.len() - 1 {
                left_members += usize::from(column[k].1);
                if column[k].0 == column[k + 1].0 {
                    continue;
                }
                let nl = k + 1;
                let nr = column.len() - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let right_members = members - left_members;
                let gini = |m: usize, t: usize| {
                    let p = m as f64 / t as f64;
                    2.0 * p * (1.0 - p)
                };
                let impurity =
                    (nl as f64 * gini(left_members, nl) + nr as f64 * gini(right_members, nr)) / n;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    best = Some((impurity, f, 0.5 * (column[k].0 + column[k + 1].0)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Bagged CART trees with `sqrt(d)` feature subsampling; the score is the
/// mean member fraction of the reached leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    dim: usize,
}

impl RandomForest {
    pub(super) fn fit(records: &[MetaRecord], dim: usize, hyper: &MetaHyper, seed: u64) -> Result<Self> {
        if hyper.rf_trees == 0 {
            return Err(Error::Config("random forest needs at least one tree".into()));
        }
        let xs: Vec<Vec<f64>> = records.iter().map(|r| r.features.clone()).collect();
        let ys: Vec<bool> = records.iter().map(|r| r.member).collect();
        let max_features = ((dim as f64).sqrt().floor() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = records.len();
        let trees = (0..hyper.rf_trees)
            .map(|_| {
                let tree_seed: u64 = rng.random();
                let mut tree_rng = ChaCha8Rng::seed_from_u64(tree_seed);
                let mut samples: Vec<usize> = if hyper.rf_bootstrap {
                    (0..n).map(|_| tree_rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut builder = TreeBuilder {
                    xs: &xs,
                    ys: &ys,
                    max_depth: hyper.rf_max_depth,
                    min_leaf: hyper.rf_min_samples_leaf.max(1),
                    max_features,
                    rng: tree_rng,
                    nodes: Vec::new(),
                };
                builder.build(&mut samples, 0);
                DecisionTree {
                    nodes: builder.nodes,
                }
            })
            .collect();
        Ok(Self { trees, dim })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub(super) fn score(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.score(x)).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{ClassifierKind, MetaClassifier};

    fn xor() -> Vec<MetaRecord> {
        vec![
            MetaRecord::new(vec![0.0, 0.0], false),
            MetaRecord::new(vec![1.0, 1.0], false),
            MetaRecord::new(vec![0.0, 1.0], true),
            MetaRecord::new(vec![1.0, 0.0], true),
        ]
    }

    #[test]
    fn depth_one_stump_cannot_solve_xor() {
        let recs = xor();
        // every axis-aligned depth-1 split classifies at most 3 of 4 XOR points
        let hyper = MetaHyper {
            rf_trees: 1,
            rf_max_depth: 1,
            ..MetaHyper::default()
        };
        for seed in 0..20 {
            let clf = MetaClassifier::fit(ClassifierKind::Rf, &recs, &hyper, seed).unwrap();
            let correct = recs
                .iter()
                .filter(|r| clf.predict(&r.features).unwrap() == r.member)
                .count();
            assert!(correct as f64 / 4.0 <= 0.75);
        }
    }

    #[test]
    fn unanimous_members_score_one() {
        let mut recs = Vec::new();
        for i in 0..20 {
            recs.push(MetaRecord::new(vec![10.0 + i as f64], true));
            recs.push(MetaRecord::new(vec![-10.0 - i as f64], false));
        }
        let clf = MetaClassifier::fit(ClassifierKind::Rf, &recs, &MetaHyper::default(), 3).unwrap();
        assert_eq!(clf.score_proba(&[100.0]).unwrap(), 1.0);
        assert_eq!(clf.score_proba(&[-100.0]).unwrap(), 0.0);
    }

    #[test]
    fn depth_limit_respected() {
        let recs: Vec<MetaRecord> = (0..64)
            .map(|i| MetaRecord::new(vec![i as f64, (i * 7 % 13) as f64], i % 3 == 0))
            .collect();
        let hyper = MetaHyper {
            rf_trees: 5,
            rf_max_depth: 3,
            ..MetaHyper::default()
        };
        let MetaClassifier::Rf(rf) = MetaClassifier::fit(ClassifierKind::Rf, &recs, &hyper, 0).unwrap() else {
            panic!()
        };
        assert!(rf.trees().iter().all(|t| t.depth() <= 3));
    }
}
