//! CART-style random forest with probability leaves.
//!
//! Trees grow greedily on bootstrap samples by Gini impurity over a
//! random feature subset per split. Leaves hold class-probability
//! vectors so ensemble prediction is the plain mean over trees, which
//! keeps the attribution game linear in trees and leaf values.

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use ndarray::ArrayView2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One node of a tree, stored in a flat arena (root at index 0).
/// Ties at a split go left: `value <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: u32, right: u32, cover: u32 },
    Leaf { value: Vec<f64>, cover: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_for(&self, x: &[f64]) -> &[f64] {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { value, .. } => return value,
                TreeNode::Split { feature, threshold, left, right, .. } => {
                    idx = if x[*feature] <= *threshold { *left as usize } else { *right as usize };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], idx: usize) -> usize {
            match &nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + go(nodes, *left as usize).max(go(nodes, *right as usize))
                }
            }
        }
        go(&self.nodes, 0)
    }

    /// Feature indices referenced by any split of this tree.
    pub fn used_features(&self) -> Vec<usize> {
        let mut feats: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .collect();
        feats.sort_unstable();
        feats.dedup();
        feats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<Tree>,
    pub num_features: usize,
    pub num_classes: usize,
    pub class_prior: Vec<f64>,
}

impl TreeEnsemble {
    /// Builds an ensemble from explicit trees, checking node references
    /// and feature indices. Leaf values are unconstrained here; trained
    /// forests produce probability leaves, hand-built test models may
    /// carry arbitrary scores.
    pub fn from_trees(trees: Vec<Tree>, num_features: usize, num_classes: usize) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Degenerate("ensemble needs at least one tree".into()));
        }
        for tree in &trees {
            if tree.nodes.is_empty() {
                return Err(Error::Degenerate("tree without nodes".into()));
            }
            for node in &tree.nodes {
                match node {
                    TreeNode::Split { feature, left, right, .. } => {
                        if *feature >= num_features {
                            return Err(Error::ShapeMismatch(format!(
                                "split feature {feature} out of range {num_features}"
                            )));
                        }
                        if *left as usize >= tree.nodes.len() || *right as usize >= tree.nodes.len()
                        {
                            return Err(Error::ShapeMismatch("child index out of range".into()));
                        }
                    }
                    TreeNode::Leaf { value, .. } => {
                        if value.len() != num_classes {
                            return Err(Error::ShapeMismatch(format!(
                                "leaf value length {} vs {num_classes} classes",
                                value.len()
                            )));
                        }
                    }
                }
            }
        }
        let class_prior = vec![1.0 / num_classes as f64; num_classes];
        Ok(TreeEnsemble { trees, num_features, num_classes, class_prior })
    }

    /// Returns a copy with every leaf value multiplied by `kappa`.
    pub fn with_scaled_leaves(&self, kappa: f64) -> TreeEnsemble {
        let trees = self
            .trees
            .iter()
            .map(|t| Tree {
                nodes: t
                    .nodes
                    .iter()
                    .map(|n| match n {
                        TreeNode::Leaf { value, cover } => TreeNode::Leaf {
                            value: value.iter().map(|v| v * kappa).collect(),
                            cover: *cover,
                        },
                        s => s.clone(),
                    })
                    .collect(),
            })
            .collect();
        TreeEnsemble { trees, ..self.clone() }
    }

    pub fn single_tree(&self, i: usize) -> TreeEnsemble {
        TreeEnsemble {
            trees: vec![self.trees[i].clone()],
            num_features: self.num_features,
            num_classes: self.num_classes,
            class_prior: self.class_prior.clone(),
        }
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(|t| t.depth()).max().unwrap_or(0)
    }
}

/// Forest hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Candidate features per split; `None` means ceil(sqrt(M)).
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 8,
            min_samples_leaf: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.max_depth < 1 {
            return Err(Error::InvalidConfig("max_depth must be >= 1".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::InvalidConfig("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    num_classes: usize,
    cfg: &'a ForestConfig,
    features_per_split: usize,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    fn leaf(&mut self, samples: &[usize]) -> u32 {
        let mut counts = vec![0usize; self.num_classes];
        for &i in samples {
            counts[self.y[i]] += 1;
        }
        let n = samples.len() as f64;
        let value: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        self.nodes.push(TreeNode::Leaf { value, cover: samples.len() as u32 });
        (self.nodes.len() - 1) as u32
    }

    fn build(&mut self, samples: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let mut counts = vec![0usize; self.num_classes];
        for &i in &samples {
            counts[self.y[i]] += 1;
        }
        let n = samples.len();
        let pure = counts.iter().any(|&c| c == n);
        if pure || depth >= self.cfg.max_depth || n < 2 * self.cfg.min_samples_leaf {
            return self.leaf(&samples);
        }
        let parent_gini = gini(&counts, n);
        let m = self.x.ncols();
        let mut candidates: Vec<usize> =
            rand::seq::index::sample(rng, m, self.features_per_split.min(m)).into_vec();
        candidates.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None; // (weighted impurity, feature, threshold)
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
        for &feat in &candidates {
            pairs.clear();
            pairs.extend(samples.iter().map(|&i| (self.x[(i, feat)], self.y[i])));
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
            let mut left_counts = vec![0usize; self.num_classes];
            let mut left_n = 0usize;
            for w in 0..n - 1 {
                left_counts[pairs[w].1] += 1;
                left_n += 1;
                if pairs[w].0 == pairs[w + 1].0 {
                    continue; // identical values cannot be separated
                }
                let right_n = n - left_n;
                if left_n < self.cfg.min_samples_leaf || right_n < self.cfg.min_samples_leaf {
                    continue;
                }
                let right_counts: Vec<usize> =
                    counts.iter().zip(&left_counts).map(|(&c, &l)| c - l).collect();
                let weighted = (left_n as f64 * gini(&left_counts, left_n)
                    + right_n as f64 * gini(&right_counts, right_n))
                    / n as f64;
                if best.map_or(true, |(b, _, _)| weighted < b - 1e-15) {
                    let threshold = 0.5 * (pairs[w].0 + pairs[w + 1].0);
                    best = Some((weighted, feat, threshold));
                }
            }
        }
        let (weighted, feature, threshold) = match best {
            Some(b) if parent_gini - b.0 > 1e-12 => b,
            _ => return self.leaf(&samples),
        };
        let _ = weighted;
        let (left_samples, right_samples): (Vec<usize>, Vec<usize>) =
            samples.iter().partition(|&&i| self.x[(i, feature)] <= threshold);
        let idx = self.nodes.len();
        self.nodes.push(TreeNode::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
            cover: n as u32,
        });
        let left = self.build(left_samples, depth + 1, rng);
        let right = self.build(right_samples, depth + 1, rng);
        if let TreeNode::Split { left: l, right: r, .. } = &mut self.nodes[idx] {
            *l = left;
            *r = right;
        }
        idx as u32
    }
}

/// Fits a forest on `x` (N x M) with integer labels in `0..num_classes`.
pub fn fit_forest(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    num_classes: usize,
    cfg: &ForestConfig,
) -> Result<TreeEnsemble> {
    cfg.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Degenerate("need at least two samples".into()));
    }
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", y.len(), n)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    if let Some(&c) = y.iter().find(|&&c| c >= num_classes) {
        return Err(Error::InvalidConfig(format!("label {c} >= {num_classes} classes")));
    }
    let mut present = vec![false; num_classes];
    for &c in y {
        present[c] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Degenerate("training labels contain a single class".into()));
    }
    let m = x.ncols();
    let features_per_split =
        cfg.features_per_split.unwrap_or_else(|| (m as f64).sqrt().ceil() as usize).clamp(1, m);

    let trees: Vec<Tree> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tree", t as u64));
            let samples: Vec<usize> = if cfg.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut builder =
                TreeBuilder { x, y, num_classes, cfg, features_per_split, nodes: Vec::new() };
            builder.build(samples, 0, &mut rng);
            Tree { nodes: builder.nodes }
        })
        .collect();

    let mut prior = vec![0.0; num_classes];
    for &c in y {
        prior[c] += 1.0;
    }
    for p in prior.iter_mut() {
        *p /= n as f64;
    }
    Ok(TreeEnsemble { trees, num_features: m, num_classes, class_prior: prior })
}

/// Mean of reached-leaf value vectors over trees.
pub fn predict_proba(ensemble: &TreeEnsemble, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != ensemble.num_features {
        return Err(Error::ShapeMismatch(format!(
            "input length {} vs {} features",
            x.len(),
            ensemble.num_features
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction input".into()));
    }
    let mut acc = vec![0.0; ensemble.num_classes];
    for tree in &ensemble.trees {
        let leaf = tree.leaf_for(x);
        for (a, v) in acc.iter_mut().zip(leaf) {
            *a += v;
        }
    }
    let t = ensemble.trees.len() as f64;
    for a in acc.iter_mut() {
        *a /= t;
    }
    Ok(acc)
}

/// The scalar value function handed to attribution: probability of
/// class `c` under the ensemble.
pub fn class_margin(ensemble: &TreeEnsemble, x: &[f64], c: usize) -> Result<f64> {
    if c >= ensemble.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "class {c} out of range {}",
            ensemble.num_classes
        )));
    }
    Ok(predict_proba(ensemble, x)?[c])
}

/// Batch prediction over matrix rows.
pub fn predict_proba_matrix(ensemble: &TreeEnsemble, x: ArrayView2<'_, f64>) -> Result<Vec<Vec<f64>>> {
    x.rows()
        .into_iter()
        .map(|r| predict_proba(ensemble, r.as_slice().expect("contiguous rows")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    
    use rand_chacha::ChaCha8Rng;

    fn accuracy(ens: &TreeEnsemble, x: ArrayView2<'_, f64>, y: &[usize]) -> f64 {
        let mut hits = 0usize;
        for (row, &label) in x.rows().into_iter().zip(y) {
            let p = predict_proba(ens, row.as_slice().unwrap()).unwrap();
            let pred = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            if pred == label {
                hits += 1;
            }
        }
        hits as f64 / y.len() as f64
    }

    #[test]
    fn separated_1d_data_is_learned_exactly() {
        let x = array![[0.0], [0.1], [0.2], [0.9], [1.0], [1.1]];
        let y = vec![0, 0, 0, 1, 1, 1];
        let ens = fit_forest(x.view(), &y, 2, &ForestConfig { n_trees: 5, ..Default::default() })
            .unwrap();
        assert_eq!(accuracy(&ens, x.view(), &y), 1.0);
    }

    #[test]
    fn fitting_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Array2::<f64>::zeros((40, 5));
        for v in x.iter_mut() {
            *v = rng.random::<f64>();
        }
        let y: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let cfg = ForestConfig { n_trees: 7, seed: 5, ..Default::default() };
        let a = fit_forest(x.view(), &y, 3, &cfg).unwrap();
        let b = fit_forest(x.view(), &y, 3, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn xor_needs_depth_two_and_gets_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a = rng.random::<f64>();
            let b = rng.random::<f64>();
            x[(i, 0)] = a;
            x[(i, 1)] = b;
            y.push(((a > 0.5) ^ (b > 0.5)) as usize);
        }
        let cfg = ForestConfig { n_trees: 30, max_depth: 4, seed: 2, ..Default::default() };
        let train = x.slice(ndarray::s![..300, ..]);
        let test = x.slice(ndarray::s![300.., ..]);
        let ens = fit_forest(train, &y[..300], 2, &cfg).unwrap();
        assert!(accuracy(&ens, test, &y[300..]) >= 0.95);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let x = array![[0.0], [1.0]];
        assert!(fit_forest(x.view(), &[0, 0], 2, &ForestConfig::default()).is_err());
        let x_nan = array![[f64::NAN], [1.0]];
        assert!(fit_forest(x_nan.view(), &[0, 1], 2, &ForestConfig::default()).is_err());
    }

    #[test]
    fn single_leaf_tree_predicts_its_value_everywhere() {
        let tree = Tree { nodes: vec![TreeNode::Leaf { value: vec![0.25; 4], cover: 1 }] };
        let ens = TreeEnsemble::from_trees(vec![tree], 3, 4).unwrap();
        for x in [[0.0, 0.0, 0.0], [5.0, -2.0, 100.0]] {
            assert_eq!(predict_proba(&ens, &x).unwrap(), vec![0.25; 4]);
        }
    }

    #[test]
    fn duplicating_the_whole_ensemble_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Array2::<f64>::zeros((30, 4));
        for v in x.iter_mut() {
            *v = rng.random::<f64>();
        }
        let y: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let ens = fit_forest(x.view(), &y, 2, &ForestConfig { n_trees: 4, ..Default::default() })
            .unwrap();
        let mut doubled = ens.clone();
        doubled.trees.extend(ens.trees.clone());
        let probe = vec![0.3, 0.7, 0.1, 0.9];
        let a = predict_proba(&ens, &probe).unwrap();
        let b = predict_proba(&doubled, &probe).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_depth_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = Array2::<f64>::zeros((80, 6));
        for v in x.iter_mut() {
            *v = rng.random::<f64>();
        }
        let y: Vec<usize> = (0..80).map(|i| (i / 20) % 4).collect();
        let cfg = ForestConfig { n_trees: 12, max_depth: 5, seed: 1, ..Default::default() };
        let ens = fit_forest(x.view(), &y, 4, &cfg).unwrap();
        assert!(ens.max_depth() <= 5);
        for tree in &ens.trees {
            for node in &tree.nodes {
                if let TreeNode::Leaf { value, .. } = node {
                    assert!((value.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
        let probe: Vec<f64> = (0..6).map(|i| i as f64 / 6.0).collect();
        let p = predict_proba(&ens, &probe).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // margins match components
        for c in 0..4 {
            assert_eq!(class_margin(&ens, &probe, c).unwrap(), p[c]);
        }
    }

    #[test]
    fn child_covers_sum_to_parent() {
        let x = array![[0.0], [0.2], [0.4], [0.6], [0.8], [1.0]];
        let y = vec![0, 0, 0, 1, 1, 1];
        let cfg = ForestConfig { n_trees: 3, bootstrap: false, ..Default::default() };
        let ens = fit_forest(x.view(), &y, 2, &cfg).unwrap();
        for tree in &ens.trees {
            for node in &tree.nodes {
                if let TreeNode::Split { left, right, cover, .. } = node {
                    let c = |i: u32| match &tree.nodes[i as usize] {
                        TreeNode::Split { cover, .. } => *cover,
                        TreeNode::Leaf { cover, .. } => *cover,
                    };
                    assert_eq!(c(*left) + c(*right), *cover);
                }
            }
        }
    }

    #[test]
    fn serialization_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut x = Array2::<f64>::zeros((50, 3));
        for v in x.iter_mut() {
            *v = rng.random::<f64>();
        }
        let y: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let ens = fit_forest(x.view(), &y, 2, &ForestConfig { n_trees: 6, ..Default::default() })
            .unwrap();
        let json = serde_json::to_string(&ens).unwrap();
        let back: TreeEnsemble = serde_json::from_str(&json).unwrap();
        for row in x.rows() {
            let xs = row.as_slice().unwrap();
            assert_eq!(predict_proba(&ens, xs).unwrap(), predict_proba(&back, xs).unwrap());
        }
    }
}
