//! Shapley-value attribution for tree ensembles.
//!
//! The game assigns each feature subset the ensemble output on a hybrid
//! input that takes foreground values on the subset and background
//! values elsewhere. Two estimators are provided: an exact subset
//! enumeration (the oracle, capped at 20 features) and a fast
//! tree-recursive algorithm that is exactly equivalent, feature counts
//! permitting, by exploiting that each leaf contributes a conjunction
//! game whose Shapley values have a closed form.

use crate::error::{Error, Result};
use crate::forest::{class_margin, Tree, TreeEnsemble, TreeNode};
use ndarray::ArrayView2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Enumeration guard: 2^20 subsets is the largest game evaluated exactly.
pub const MAX_ENUMERATION_FEATURES: usize = 20;

/// Background rows encoding feature absence.
#[derive(Debug, Clone)]
pub struct BackgroundSet {
    pub rows: Vec<Vec<f64>>,
}

impl BackgroundSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Degenerate("background set must be nonempty".into()));
        }
        let w = rows[0].len();
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::ShapeMismatch("ragged background rows".into()));
        }
        Ok(BackgroundSet { rows })
    }

    /// Samples up to `max_size` rows of `data` without replacement.
    pub fn sample_from(data: ArrayView2<'_, f64>, max_size: usize, seed: u64) -> Result<Self> {
        let n = data.nrows();
        if n == 0 || max_size == 0 {
            return Err(Error::Degenerate("background source must be nonempty".into()));
        }
        let take = max_size.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, take).into_vec();
        idx.sort_unstable();
        let rows = idx.into_iter().map(|i| data.row(i).to_vec()).collect();
        BackgroundSet::new(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Per-dimension contributions plus the base value f(background).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionVector {
    pub phi: Vec<f64>,
    pub phi0: f64,
}

impl AttributionVector {
    pub fn sum(&self) -> f64 {
        self.phi0 + self.phi.iter().sum::<f64>()
    }
}

fn check_query(model: &TreeEnsemble, foreground: &[f64], background: &[f64]) -> Result<()> {
    if foreground.len() != model.num_features || background.len() != model.num_features {
        return Err(Error::ShapeMismatch(format!(
            "foreground/background lengths {}/{} vs {} model features",
            foreground.len(),
            background.len(),
            model.num_features
        )));
    }
    if foreground.iter().chain(background).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attribution query".into()));
    }
    Ok(())
}

/// Value of a feature coalition: ensemble output for class `c` on the
/// hybrid input taking foreground values on `subset`, background
/// elsewhere.
pub fn characteristic_value(
    model: &TreeEnsemble,
    subset: &[usize],
    foreground: &[f64],
    background: &[f64],
    c: usize,
) -> Result<f64> {
    check_query(model, foreground, background)?;
    if let Some(&i) = subset.iter().find(|&&i| i >= model.num_features) {
        return Err(Error::ShapeMismatch(format!("subset index {i} out of range")));
    }
    let mut hybrid = background.to_vec();
    for &i in subset {
        hybrid[i] = foreground[i];
    }
    class_margin(model, &hybrid, c)
}

/// Exact Shapley weight for a coalition of size `s` among `m` players:
/// s! (m - s - 1)! / m!, computed as 1 / ((m - s) * C(m, s)).
fn subset_weight(m: usize, s: usize) -> f64 {
    1.0 / ((m - s) as f64 * binomial(m, s))
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Exact single-background Shapley values by subset enumeration.
///
/// Errors with a capacity message above [`MAX_ENUMERATION_FEATURES`];
/// there is deliberately no silent fallback to approximation.
pub fn exact_shapley(
    model: &TreeEnsemble,
    foreground: &[f64],
    background: &[f64],
    c: usize,
) -> Result<AttributionVector> {
    check_query(model, foreground, background)?;
    if c >= model.num_classes {
        return Err(Error::ShapeMismatch(format!("class {c} out of range")));
    }
    let m = model.num_features;
    if m > MAX_ENUMERATION_FEATURES {
        return Err(Error::Capacity(format!(
            "exact enumeration over {m} features would visit 2^{m} subsets; \
             the guard is {MAX_ENUMERATION_FEATURES}"
        )));
    }
    // value table over all subsets encoded as bitmasks
    let total = 1usize << m;
    let mut values = vec![0.0f64; total];
    let mut hybrid = vec![0.0f64; m];
    for (mask, slot) in values.iter_mut().enumerate() {
        for i in 0..m {
            hybrid[i] = if mask & (1 << i) != 0 { foreground[i] } else { background[i] };
        }
        *slot = class_margin(model, &hybrid, c)?;
    }
    let weights: Vec<f64> = (0..m).map(|s| subset_weight(m, s)).collect();
    let mut phi = vec![0.0f64; m];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for mask in 0..total {
            if mask & bit != 0 {
                continue;
            }
            acc += weights[(mask as u64).count_ones() as usize]
                * (values[mask | bit] - values[mask]);
        }
        *phi_i = acc;
    }
    Ok(AttributionVector { phi, phi0: values[0] })
}

/// Per-path feature constraint: does the foreground / background value
/// satisfy every split on this feature along the current path?
#[derive(Debug, Clone, Copy)]
struct PathConstraint {
    feature: usize,
    fg_ok: bool,
    bg_ok: bool,
}

fn tree_phi(
    tree: &Tree,
    foreground: &[f64],
    background: &[f64],
    c: usize,
    phi: &mut [f64],
) {
    let mut path: Vec<PathConstraint> = Vec::with_capacity(16);
    descend(tree, 0, foreground, background, c, &mut path, phi);
}

fn descend(
    tree: &Tree,
    node: usize,
    foreground: &[f64],
    background: &[f64],
    c: usize,
    path: &mut Vec<PathConstraint>,
    phi: &mut [f64],
) {
    match &tree.nodes[node] {
        TreeNode::Leaf { value, .. } => {
            let leaf = value[c];
            if leaf == 0.0 {
                return;
            }
            // Fold repeated features along the path into one combined
            // constraint before classifying presence/absence.
            let mut combined: Vec<PathConstraint> = Vec::with_capacity(path.len());
            for pc in path.iter() {
                match combined.iter_mut().find(|c| c.feature == pc.feature) {
                    Some(c) => {
                        c.fg_ok &= pc.fg_ok;
                        c.bg_ok &= pc.bg_ok;
                    }
                    None => combined.push(*pc),
                }
            }
            let mut required: Vec<usize> = Vec::with_capacity(combined.len());
            let mut blocked: Vec<usize> = Vec::with_capacity(combined.len());
            for pc in &combined {
                match (pc.fg_ok, pc.bg_ok) {
                    (true, true) => {}
                    (true, false) => required.push(pc.feature),
                    (false, true) => blocked.push(pc.feature),
                    (false, false) => unreachable!("pruned during descent"),
                }
            }
            let k = required.len();
            let m = blocked.len();
            if k == 0 && m == 0 {
                return; // leaf reached by every hybrid; pure base signal
            }
            if k > 0 {
                let w = leaf / (k as f64 * binomial(k + m, k));
                for &f in &required {
                    phi[f] += w;
                }
            }
            if m > 0 {
                let w = leaf / (m as f64 * binomial(k + m, k));
                for &f in &blocked {
                    phi[f] -= w;
                }
            }
        }
        TreeNode::Split { feature, threshold, left, right, .. } => {
            let f = *feature;
            let fg_left = foreground[f] <= *threshold;
            let bg_left = background[f] <= *threshold;
            // accumulated satisfiability for this feature so far
            let (acc_fg, acc_bg) = path
                .iter()
                .filter(|pc| pc.feature == f)
                .fold((true, true), |(a, b), pc| (a && pc.fg_ok, b && pc.bg_ok));
            for (child, fg_dir, bg_dir) in
                [(*left, fg_left, bg_left), (*right, !fg_left, !bg_left)]
            {
                let fg_ok = acc_fg && fg_dir;
                let bg_ok = acc_bg && bg_dir;
                if !fg_ok && !bg_ok {
                    continue; // no hybrid reaches this subtree
                }
                path.push(PathConstraint { feature: f, fg_ok: fg_dir, bg_ok: bg_dir });
                descend(tree, child as usize, foreground, background, c, path, phi);
                path.pop();
            }
        }
    }
}

/// Fast exact single-background Shapley values via tree recursion.
///
/// Each tree contributes independently and the ensemble value is the
/// mean over trees, matching prediction averaging; results agree with
/// [`exact_shapley`] to enumeration precision.
pub fn tree_shapley(
    model: &TreeEnsemble,
    foreground: &[f64],
    background: &[f64],
    c: usize,
) -> Result<AttributionVector> {
    check_query(model, foreground, background)?;
    if c >= model.num_classes {
        return Err(Error::ShapeMismatch(format!("class {c} out of range")));
    }
    let m = model.num_features;
    let mut phi = vec![0.0f64; m];
    for tree in &model.trees {
        tree_phi(tree, foreground, background, c, &mut phi);
    }
    let t = model.trees.len() as f64;
    for p in phi.iter_mut() {
        *p /= t;
    }
    let phi0 = class_margin(model, background, c)?;
    Ok(AttributionVector { phi, phi0 })
}

/// Averages single-background attributions over a background set.
pub fn shapley_over_background(
    model: &TreeEnsemble,
    foreground: &[f64],
    background: &BackgroundSet,
    c: usize,
) -> Result<AttributionVector> {
    if background.is_empty() {
        return Err(Error::Degenerate("empty background set".into()));
    }
    let mut phi = vec![0.0f64; model.num_features];
    let mut phi0 = 0.0f64;
    for row in &background.rows {
        let single = tree_shapley(model, foreground, row, c)?;
        for (acc, v) in phi.iter_mut().zip(&single.phi) {
            *acc += v;
        }
        phi0 += single.phi0;
    }
    let d = background.len() as f64;
    for v in phi.iter_mut() {
        *v /= d;
    }
    Ok(AttributionVector { phi, phi0: phi0 / d })
}

/// Attributions of a sample batch: per-class phi matrices, their
/// mean-absolute per-dimension summaries, and the class-aggregated
/// score vector used for dimension ranking.
#[derive(Debug, Clone)]
pub struct AttributionSummary {
    /// `per_class[c]` has one phi row per evaluated sample.
    pub per_class: Vec<Vec<Vec<f64>>>,
    /// Base value per class: mean model output over the background.
    pub phi0: Vec<f64>,
    /// `mean_abs[c][j]` = mean over samples of |phi_j| for class c.
    pub mean_abs: Vec<Vec<f64>>,
    /// `scores[j]` = mean over classes of `mean_abs[c][j]`.
    pub scores: Vec<f64>,
}

/// Computes background-averaged attributions for every row of `x_eval`
/// and every class, aggregating |phi| into per-dimension scores.
pub fn attribution_matrix(
    model: &TreeEnsemble,
    x_eval: ArrayView2<'_, f64>,
    background: &BackgroundSet,
    classes: usize,
) -> Result<AttributionSummary> {
    if x_eval.nrows() == 0 {
        return Err(Error::Degenerate("no evaluation samples".into()));
    }
    if classes > model.num_classes {
        return Err(Error::ShapeMismatch("more classes than the model carries".into()));
    }
    let m = model.num_features;
    let n = x_eval.nrows();
    // parallel across samples, sequential within; ordered collect keeps
    // the reduction deterministic
    let per_sample: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = x_eval.row(i).to_vec();
            (0..classes)
                .map(|c| {
                    shapley_over_background(model, &row, background, c).map(|av| av.phi)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // base values are per class, independent of the foreground
    let phi0: Vec<f64> = (0..classes)
        .map(|c| {
            let mut acc = 0.0;
            for row in &background.rows {
                acc += class_margin(model, row, c)?;
            }
            Ok(acc / background.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut per_class = vec![Vec::with_capacity(n); classes];
    for sample in per_sample {
        for (c, phi) in sample.into_iter().enumerate() {
            per_class[c].push(phi);
        }
    }
    let mut mean_abs = vec![vec![0.0f64; m]; classes];
    for (c, rows) in per_class.iter().enumerate() {
        for phi in rows {
            for (j, v) in phi.iter().enumerate() {
                mean_abs[c][j] += v.abs();
            }
        }
        for v in mean_abs[c].iter_mut() {
            *v /= n as f64;
        }
    }
    let mut scores = vec![0.0f64; m];
    for per in &mean_abs {
        for (s, v) in scores.iter_mut().zip(per) {
            *s += v;
        }
    }
    for s in scores.iter_mut() {
        *s /= classes as f64;
    }
    Ok(AttributionSummary { per_class, phi0, mean_abs, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{fit_forest, ForestConfig};
    use itertools::Itertools;
    use ndarray::Array2;
    
    use rand_chacha::ChaCha8Rng;

    /// Independent permutation-average formulation; the second oracle.
    fn permutation_shapley(
        model: &TreeEnsemble,
        fg: &[f64],
        bg: &[f64],
        c: usize,
    ) -> AttributionVector {
        let m = model.num_features;
        let mut phi = vec![0.0f64; m];
        let mut count = 0usize;
        for perm in (0..m).permutations(m) {
            let mut subset: Vec<usize> = Vec::with_capacity(m);
            let mut prev = characteristic_value(model, &subset, fg, bg, c).unwrap();
            for &i in &perm {
                subset.push(i);
                let next = characteristic_value(model, &subset, fg, bg, c).unwrap();
                phi[i] += next - prev;
                prev = next;
            }
            count += 1;
        }
        for v in phi.iter_mut() {
            *v /= count as f64;
        }
        let phi0 = characteristic_value(model, &[], fg, bg, c).unwrap();
        AttributionVector { phi, phi0 }
    }

    fn random_forest_fixture(
        seed: u64,
        n: usize,
        m: usize,
        classes: usize,
        trees: usize,
        depth: usize,
    ) -> (TreeEnsemble, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::<f64>::zeros((n, m));
        for v in x.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        let y: Vec<usize> = (0..n)
            .map(|i| {
                let s: f64 = (0..m).map(|j| x[(i, j)] * ((j % 3) as f64 - 1.0)).sum();
                (((s * 3.0).abs() as usize) + i % 2) % classes
            })
            .collect();
        let cfg = ForestConfig {
            n_trees: trees,
            max_depth: depth,
            min_samples_leaf: 2,
            seed,
            ..Default::default()
        };
        let ens = fit_forest(x.view(), &y, classes, &cfg).unwrap();
        (ens, x)
    }

    #[test]
    fn characteristic_value_edges() {
        let (ens, x) = random_forest_fixture(5, 40, 4, 3, 4, 3);
        let fg = x.row(0).to_vec();
        let bg = x.row(1).to_vec();
        let full: Vec<usize> = (0..4).collect();
        let v_full = characteristic_value(&ens, &full, &fg, &bg, 1).unwrap();
        assert_eq!(v_full, class_margin(&ens, &fg, 1).unwrap());
        let v_empty = characteristic_value(&ens, &[], &fg, &bg, 1).unwrap();
        assert_eq!(v_empty, class_margin(&ens, &bg, 1).unwrap());
        // identical foreground/background: constant game
        let v_half = characteristic_value(&ens, &[0, 2], &fg, &fg, 1).unwrap();
        assert_eq!(v_half, class_margin(&ens, &fg, 1).unwrap());
    }

    #[test]
    fn linear_game_attributes_additively() {
        // single split per feature, so the game is additive and phi
        // must equal the per-feature value deltas
        let t0 = Tree {
            nodes: vec![
                TreeNode::Split { feature: 0, threshold: 0.0, left: 1, right: 2, cover: 2 },
                TreeNode::Leaf { value: vec![0.0], cover: 1 },
                TreeNode::Leaf { value: vec![1.0], cover: 1 },
            ],
        };
        let t1 = Tree {
            nodes: vec![
                TreeNode::Split { feature: 1, threshold: 0.0, left: 1, right: 2, cover: 2 },
                TreeNode::Leaf { value: vec![0.0], cover: 1 },
                TreeNode::Leaf { value: vec![2.0], cover: 1 },
            ],
        };
        let ens = TreeEnsemble::from_trees(vec![t0, t1], 2, 1).unwrap();
        let fg = vec![1.0, 1.0];
        let bg = vec![-1.0, -1.0];
        let exact = exact_shapley(&ens, &fg, &bg, 0).unwrap();
        let fast = tree_shapley(&ens, &fg, &bg, 0).unwrap();
        // mean over 2 trees: feature 0 flips 0->1 (phi 0.5), feature 1 flips 0->2 (phi 1.0)
        assert!((exact.phi[0] - 0.5).abs() < 1e-12);
        assert!((exact.phi[1] - 1.0).abs() < 1e-12);
        for (a, b) in exact.phi.iter().zip(&fast.phi) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_two_tree_matches_hand_enumeration_and_permutation_oracle() {
        let tree = Tree {
            nodes: vec![
                TreeNode::Split { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 8 },
                TreeNode::Split { feature: 1, threshold: 0.25, left: 3, right: 4, cover: 4 },
                TreeNode::Split { feature: 2, threshold: 0.75, left: 5, right: 6, cover: 4 },
                TreeNode::Leaf { value: vec![0.1], cover: 2 },
                TreeNode::Leaf { value: vec![0.9], cover: 2 },
                TreeNode::Leaf { value: vec![0.4], cover: 2 },
                TreeNode::Leaf { value: vec![0.6], cover: 2 },
            ],
        };
        let ens = TreeEnsemble::from_trees(vec![tree], 3, 1).unwrap();
        let fg = vec![0.2, 0.9, 0.9];
        let bg = vec![0.8, 0.1, 0.1];
        let exact = exact_shapley(&ens, &fg, &bg, 0).unwrap();
        let fast = tree_shapley(&ens, &fg, &bg, 0).unwrap();
        let perm = permutation_shapley(&ens, &fg, &bg, 0);
        for i in 0..3 {
            assert!((exact.phi[i] - fast.phi[i]).abs() < 1e-12, "dim {i}");
            assert!((exact.phi[i] - perm.phi[i]).abs() < 1e-12, "dim {i} vs permutations");
        }
        assert!((exact.phi0 - fast.phi0).abs() < 1e-12);
        // local accuracy against f(foreground)
        let f_fg = class_margin(&ens, &fg, 0).unwrap();
        assert!((exact.sum() - f_fg).abs() < 1e-12);
        assert!((fast.sum() - f_fg).abs() < 1e-12);
    }

    #[test]
    fn estimators_agree_on_random_forests() {
        let mut max_diff = 0.0f64;
        for seed in 0..12u64 {
            let m = 3 + (seed as usize % 5);
            let classes = 2 + (seed as usize % 2);
            let (ens, x) = random_forest_fixture(seed, 50, m, classes, 6, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            for _ in 0..4 {
                let fg: Vec<f64> =
                    (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let bg = x.row(rng.random_range(0..x.nrows())).to_vec();
                let c = rng.random_range(0..classes);
                let exact = exact_shapley(&ens, &fg, &bg, c).unwrap();
                let fast = tree_shapley(&ens, &fg, &bg, c).unwrap();
                for (a, b) in exact.phi.iter().zip(&fast.phi) {
                    max_diff = max_diff.max((a - b).abs());
                }
                let f_fg = class_margin(&ens, &fg, c).unwrap();
                assert!((exact.sum() - f_fg).abs() < 1e-9);
                assert!((fast.sum() - f_fg).abs() < 1e-9);
            }
        }
        assert!(max_diff < 1e-9, "max estimator gap {max_diff}");
    }

    #[test]
    fn unused_feature_gets_exactly_zero() {
        let (ens, x) = random_forest_fixture(8, 40, 4, 2, 5, 3);
        // append an unused fifth feature by widening the model
        let mut widened = ens.clone();
        widened.num_features = 5;
        let mut fg = x.row(0).to_vec();
        let mut bg = x.row(2).to_vec();
        fg.push(5.0);
        bg.push(-5.0);
        let exact = exact_shapley(&widened, &fg, &bg, 0).unwrap();
        let fast = tree_shapley(&widened, &fg, &bg, 0).unwrap();
        assert_eq!(exact.phi[4], 0.0);
        assert_eq!(fast.phi[4], 0.0);
    }

    #[test]
    fn identical_foreground_background_gives_zero_phi() {
        let (ens, x) = random_forest_fixture(9, 40, 5, 3, 6, 4);
        let fg = x.row(3).to_vec();
        let out = tree_shapley(&ens, &fg, &fg, 1).unwrap();
        assert!(out.phi.iter().all(|&v| v == 0.0));
        assert_eq!(out.phi0, class_margin(&ens, &fg, 1).unwrap());
    }

    #[test]
    fn single_leaf_tree_contributes_nothing() {
        let tree = Tree { nodes: vec![TreeNode::Leaf { value: vec![0.3, 0.7], cover: 4 }] };
        let ens = TreeEnsemble::from_trees(vec![tree], 3, 2).unwrap();
        let out = tree_shapley(&ens, &[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0], 1).unwrap();
        assert!(out.phi.iter().all(|&v| v == 0.0));
        assert_eq!(out.phi0, 0.7);
    }

    #[test]
    fn enumeration_capacity_guard_fires() {
        let tree = Tree { nodes: vec![TreeNode::Leaf { value: vec![1.0], cover: 1 }] };
        let ens = TreeEnsemble::from_trees(vec![tree], 25, 1).unwrap();
        let fg = vec![0.0; 25];
        let err = exact_shapley(&ens, &fg, &fg, 0).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn background_averaging_edges() {
        let (ens, x) = random_forest_fixture(10, 40, 4, 2, 5, 3);
        let fg = x.row(0).to_vec();
        let b1 = BackgroundSet::new(vec![x.row(1).to_vec()]).unwrap();
        let avg1 = shapley_over_background(&ens, &fg, &b1, 0).unwrap();
        let single = tree_shapley(&ens, &fg, &x.row(1).to_vec(), 0).unwrap();
        assert_eq!(avg1.phi, single.phi);

        let self_bg = BackgroundSet::new(vec![fg.clone(), fg.clone()]).unwrap();
        let zero = shapley_over_background(&ens, &fg, &self_bg, 0).unwrap();
        assert!(zero.phi.iter().all(|&v| v == 0.0));

        let b2 = BackgroundSet::new(vec![x.row(1).to_vec(), x.row(2).to_vec()]).unwrap();
        let avg2 = shapley_over_background(&ens, &fg, &b2, 0).unwrap();
        let s1 = tree_shapley(&ens, &fg, &x.row(1).to_vec(), 0).unwrap();
        let s2 = tree_shapley(&ens, &fg, &x.row(2).to_vec(), 0).unwrap();
        for j in 0..4 {
            assert!((avg2.phi[j] - 0.5 * (s1.phi[j] + s2.phi[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn score_aggregation_is_order_invariant_and_constant_model_scores_zero() {
        let (ens, x) = random_forest_fixture(11, 40, 4, 2, 5, 3);
        let bg = BackgroundSet::sample_from(x.view(), 8, 3).unwrap();
        let eval = x.slice(ndarray::s![..6, ..]);
        let fwd = attribution_matrix(&ens, eval, &bg, 2).unwrap();
        // reversed sample order must give identical scores
        let mut rev = Array2::<f64>::zeros((6, 4));
        for i in 0..6 {
            rev.row_mut(i).assign(&eval.row(5 - i));
        }
        let bwd = attribution_matrix(&ens, rev.view(), &bg, 2).unwrap();
        for (a, b) in fwd.scores.iter().zip(&bwd.scores) {
            assert!((a - b).abs() < 1e-12);
        }
        // single sample, single class: scores equal |phi| of that query
        let one = attribution_matrix(&ens, x.slice(ndarray::s![..1, ..]), &bg, 1).unwrap();
        let direct = shapley_over_background(&ens, &x.row(0).to_vec(), &bg, 0).unwrap();
        for (s, p) in one.scores.iter().zip(&direct.phi) {
            assert!((s - p.abs()).abs() < 1e-15);
        }
        // constant model
        let tree = Tree { nodes: vec![TreeNode::Leaf { value: vec![0.5, 0.5], cover: 1 }] };
        let flat = TreeEnsemble::from_trees(vec![tree], 4, 2).unwrap();
        let zero = attribution_matrix(&flat, eval, &bg, 2).unwrap();
        assert!(zero.scores.iter().all(|&v| v == 0.0));
    }
}
