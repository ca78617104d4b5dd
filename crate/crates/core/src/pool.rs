//! Dimension reduction of bag embeddings.
//!
//! The attribution-driven pool trains a forest on one portion of the
//! embeddings, computes background-averaged Shapley attributions on a
//! held-out portion, and keeps the k dimensions with the largest mean
//! absolute attribution. Window-average, window-max, and random index
//! selection are the comparison baselines.

use crate::attribution::{attribution_matrix, AttributionSummary, BackgroundSet};
use crate::data::stratify_indices;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestConfig, TreeEnsemble};
use crate::seeding::derive_seed;
use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PoolMethod {
    Shap,
    Avg,
    Max,
    Rand,
}

impl PoolMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolMethod::Shap => "SHAP",
            PoolMethod::Avg => "AVG",
            PoolMethod::Max => "MAX",
            PoolMethod::Rand => "RAND",
        }
    }
}

impl std::fmt::Display for PoolMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attribution settings for the pool fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Background rows sampled from the forest-training portion.
    pub background_size: usize,
    /// Held-out share when the pool splits its fitting data internally.
    pub holdout_ratio: f64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig { background_size: 100, holdout_ratio: 0.25 }
    }
}

/// A fitted dimension selector.
///
/// For `Shap`/`Rand` the selector is an ordered index list; for
/// `Avg`/`Max` it is a non-overlapping window layout of width
/// `input_dim / k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionSelector {
    pub method: PoolMethod,
    pub k: usize,
    pub input_dim: usize,
    /// Selected dimensions, highest score first (Shap) or ascending (Rand).
    pub indices: Vec<usize>,
    /// Per-dimension importance scores (Shap only; full length input_dim).
    pub scores: Vec<f64>,
    pub fit_seed: u64,
}

impl DimensionSelector {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.input_dim {
            return Err(Error::InvalidConfig(format!(
                "k = {} out of range for input dim {}",
                self.k, self.input_dim
            )));
        }
        match self.method {
            PoolMethod::Shap | PoolMethod::Rand => {
                if self.indices.len() != self.k {
                    return Err(Error::InvalidConfig("selector index count != k".into()));
                }
                let mut seen = vec![false; self.input_dim];
                for &i in &self.indices {
                    if i >= self.input_dim || seen[i] {
                        return Err(Error::InvalidConfig(
                            "selector indices must be distinct and in range".into(),
                        ));
                    }
                    seen[i] = true;
                }
            }
            PoolMethod::Avg | PoolMethod::Max => {
                if self.input_dim % self.k != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "window pooling needs k dividing the input dim ({} % {} != 0)",
                        self.input_dim, self.k
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn window_width(&self) -> usize {
        self.input_dim / self.k
    }
}

/// Pooled vector plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRepresentation {
    pub values: Vec<f64>,
    pub method: PoolMethod,
    pub modality: Option<crate::data::Modality>,
}

/// Applies a selector to one embedding.
pub fn apply_pool(selector: &DimensionSelector, z: &[f64]) -> Result<PooledRepresentation> {
    if z.len() != selector.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "embedding length {} vs selector input dim {}",
            z.len(),
            selector.input_dim
        )));
    }
    let values = match selector.method {
        PoolMethod::Shap | PoolMethod::Rand => {
            selector.indices.iter().map(|&i| z[i]).collect()
        }
        PoolMethod::Avg => {
            let w = selector.window_width();
            (0..selector.k)
                .map(|j| z[j * w..(j + 1) * w].iter().sum::<f64>() / w as f64)
                .collect()
        }
        PoolMethod::Max => {
            let w = selector.window_width();
            (0..selector.k)
                .map(|j| z[j * w..(j + 1) * w].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        }
    };
    Ok(PooledRepresentation { values, method: selector.method, modality: None })
}

/// Builds a baseline selector (window average/max or seeded random
/// indices).
pub fn make_baseline_pool(
    method: PoolMethod,
    k: usize,
    input_dim: usize,
    seed: u64,
) -> Result<DimensionSelector> {
    if method == PoolMethod::Shap {
        return Err(Error::InvalidConfig(
            "attribution-driven selectors are fitted, not constructed".into(),
        ));
    }
    let indices = match method {
        PoolMethod::Rand => {
            if k > input_dim {
                return Err(Error::InvalidConfig("k exceeds input dim".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, input_dim, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => Vec::new(),
    };
    let selector = DimensionSelector {
        method,
        k,
        input_dim,
        indices,
        scores: Vec::new(),
        fit_seed: seed,
    };
    selector.validate()?;
    Ok(selector)
}

/// Ranks dimensions by score, highest first, ties broken by lower index.
fn top_k_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Outcome of a pool fit: the selector plus the artifacts behind it.
#[derive(Debug, Clone)]
pub struct ShapPoolFit {
    pub selector: DimensionSelector,
    pub forest: TreeEnsemble,
    pub summary: AttributionSummary,
}

/// Fits an attribution-driven selector with explicit train/attribution
/// portions: the forest learns on `(z_fit, y_fit)`, attributions are
/// computed on `z_attr` against a background sampled from `z_fit`.
pub fn fit_shap_pool_with_parts(
    z_fit: ArrayView2<'_, f64>,
    y_fit: &[usize],
    z_attr: ArrayView2<'_, f64>,
    num_classes: usize,
    forest_cfg: &ForestConfig,
    attr_cfg: &AttributionConfig,
    k: usize,
    seed: u64,
) -> Result<ShapPoolFit> {
    let dim = z_fit.ncols();
    if z_attr.ncols() != dim {
        return Err(Error::ShapeMismatch("attribution rows vs fit rows width".into()));
    }
    if k == 0 || k > dim {
        return Err(Error::InvalidConfig(format!("k = {k} out of range for dim {dim}")));
    }
    let mut classes_present = vec![false; num_classes];
    for &c in y_fit {
        classes_present[c] = true;
    }
    if classes_present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Degenerate("pool fitting labels carry a single class".into()));
    }
    let forest_cfg = ForestConfig { seed: derive_seed(seed, "pool-forest", 0), ..forest_cfg.clone() };
    let forest = fit_forest(z_fit, y_fit, num_classes, &forest_cfg)?;
    let background = BackgroundSet::sample_from(
        z_fit,
        attr_cfg.background_size,
        derive_seed(seed, "pool-background", 0),
    )?;
    let summary = attribution_matrix(&forest, z_attr, &background, num_classes)?;
    let indices = top_k_by_score(&summary.scores, k);
    let selector = DimensionSelector {
        method: PoolMethod::Shap,
        k,
        input_dim: dim,
        indices,
        scores: summary.scores.clone(),
        fit_seed: seed,
    };
    selector.validate()?;
    Ok(ShapPoolFit { selector, forest, summary })
}

/// Fits an attribution-driven selector from a single embedding matrix,
/// splitting it internally (stratified) into forest-training and
/// attribution portions.
pub fn fit_shap_pool(
    z: ArrayView2<'_, f64>,
    y: &[usize],
    num_classes: usize,
    forest_cfg: &ForestConfig,
    attr_cfg: &AttributionConfig,
    k: usize,
    seed: u64,
) -> Result<ShapPoolFit> {
    let n = z.nrows();
    if n < 20 {
        return Err(Error::Degenerate(format!("pool fitting needs >= 20 rows, got {n}")));
    }
    if y.len() != n {
        return Err(Error::ShapeMismatch("labels vs embedding rows".into()));
    }
    if !(attr_cfg.holdout_ratio > 0.0 && attr_cfg.holdout_ratio < 1.0) {
        return Err(Error::InvalidConfig("holdout ratio must lie in (0, 1)".into()));
    }
    let parts = stratify_indices(
        y,
        (1.0 - attr_cfg.holdout_ratio, attr_cfg.holdout_ratio, 0.0),
        derive_seed(seed, "pool-split", 0),
    )?;
    let fit_rows: Vec<usize> = (0..n)
        .filter(|&i| parts[i] == crate::data::SplitPart::Train)
        .collect();
    let attr_rows: Vec<usize> =
        (0..n).filter(|&i| parts[i] == crate::data::SplitPart::Val).collect();
    let take = |rows: &[usize]| -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((rows.len(), z.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            m.row_mut(r).assign(&z.row(i));
        }
        m
    };
    let z_fit = take(&fit_rows);
    let z_attr = take(&attr_rows);
    let y_fit: Vec<usize> = fit_rows.iter().map(|&i| y[i]).collect();
    fit_shap_pool_with_parts(
        z_fit.view(),
        &y_fit,
        z_attr.view(),
        num_classes,
        forest_cfg,
        attr_cfg,
        k,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Embeddings with class signal planted in the listed dimensions.
    pub fn planted_embeddings(
        n: usize,
        dim: usize,
        informative: &[usize],
        classes: usize,
        amplitude: f64,
        seed: u64,
    ) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Array2::<f64>::zeros((n, dim));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            y.push(c);
            for j in 0..dim {
                z[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
            for (slot, &j) in informative.iter().enumerate() {
                // distinct per-class offsets per informative dimension
                let sign = if (c >> (slot % 2)) & 1 == 1 { 1.0 } else { -1.0 };
                let scale = 1.0 + 0.35 * ((c + slot) % classes) as f64;
                z[(i, j)] += amplitude * sign * scale;
            }
        }
        (z, y)
    }

    #[test]
    fn selector_application_is_a_projection() {
        let sel = DimensionSelector {
            method: PoolMethod::Shap,
            k: 4,
            input_dim: 16,
            indices: vec![2, 7, 11, 3],
            scores: vec![0.0; 16],
            fit_seed: 0,
        };
        let mut z = vec![0.0; 16];
        z[7] = 1.0;
        let f = apply_pool(&sel, &z).unwrap();
        assert_eq!(f.values, vec![0.0, 1.0, 0.0, 0.0]);
        let mut z2 = vec![0.0; 16];
        z2[5] = 1.0; // unselected
        let f2 = apply_pool(&sel, &z2).unwrap();
        assert!(f2.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_prefix_selector_slices() {
        let sel = DimensionSelector {
            method: PoolMethod::Rand,
            k: 32,
            input_dim: 512,
            indices: (0..32).collect(),
            scores: Vec::new(),
            fit_seed: 0,
        };
        let z: Vec<f64> = (0..512).map(|v| v as f64).collect();
        let f = apply_pool(&sel, &z).unwrap();
        assert_eq!(f.values, (0..32).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn window_pools_average_and_max() {
        let avg = make_baseline_pool(PoolMethod::Avg, 32, 512, 0).unwrap();
        assert_eq!(avg.window_width(), 16);
        let z = vec![3.25; 512];
        let f = apply_pool(&avg, &z).unwrap();
        assert!(f.values.iter().all(|&v| (v - 3.25).abs() < 1e-12));

        let max = make_baseline_pool(PoolMethod::Max, 32, 512, 0).unwrap();
        let ramp: Vec<f64> = (0..512).map(|v| v as f64).collect();
        let fm = apply_pool(&max, &ramp).unwrap();
        for (j, &v) in fm.values.iter().enumerate() {
            assert_eq!(v, (16 * j + 15) as f64);
        }
    }

    #[test]
    fn window_pool_needs_divisible_k() {
        assert!(make_baseline_pool(PoolMethod::Avg, 30, 512, 0).is_err());
        assert!(make_baseline_pool(PoolMethod::Max, 7, 512, 0).is_err());
    }

    #[test]
    fn random_selector_is_seeded() {
        let a = make_baseline_pool(PoolMethod::Rand, 32, 512, 9).unwrap();
        let b = make_baseline_pool(PoolMethod::Rand, 32, 512, 9).unwrap();
        let c = make_baseline_pool(PoolMethod::Rand, 32, 512, 10).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_ne!(a.indices, c.indices);
        assert_eq!(a.indices.len(), 32);
    }

    #[test]
    fn planted_signal_lands_in_top_k() {
        let informative: Vec<usize> = (0..6).collect();
        let (z, y) = planted_embeddings(120, 64, &informative, 4, 2.0, 3);
        let fit = fit_shap_pool(
            z.view(),
            &y,
            4,
            &ForestConfig { n_trees: 40, max_depth: 6, ..Default::default() },
            &AttributionConfig { background_size: 24, holdout_ratio: 0.25 },
            12,
            5,
        )
        .unwrap();
        for dim in informative {
            assert!(
                fit.selector.indices.contains(&dim),
                "informative dim {dim} missing from {:?}",
                fit.selector.indices
            );
        }
    }

    #[test]
    fn refitting_reproduces_identical_indices() {
        let (z, y) = planted_embeddings(80, 32, &[1, 2, 3], 4, 1.5, 11);
        let cfg = ForestConfig { n_trees: 20, max_depth: 5, ..Default::default() };
        let attr = AttributionConfig { background_size: 16, holdout_ratio: 0.25 };
        let a = fit_shap_pool(z.view(), &y, 4, &cfg, &attr, 8, 21).unwrap();
        let b = fit_shap_pool(z.view(), &y, 4, &cfg, &attr, 8, 21).unwrap();
        assert_eq!(a.selector, b.selector);
    }

    #[test]
    fn constant_embeddings_select_prefix_with_zero_scores() {
        let z = Array2::<f64>::ones((40, 16));
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let fit = fit_shap_pool(
            z.view(),
            &y,
            2,
            &ForestConfig { n_trees: 10, ..Default::default() },
            &AttributionConfig { background_size: 8, holdout_ratio: 0.25 },
            4,
            1,
        )
        .unwrap();
        assert_eq!(fit.selector.indices, vec![0, 1, 2, 3]);
        assert!(fit.selector.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_k_is_a_permutation() {
        let (z, y) = planted_embeddings(60, 24, &[0, 5], 4, 1.0, 2);
        let fit = fit_shap_pool(
            z.view(),
            &y,
            4,
            &ForestConfig { n_trees: 10, max_depth: 4, ..Default::default() },
            &AttributionConfig { background_size: 8, holdout_ratio: 0.3 },
            24,
            4,
        )
        .unwrap();
        let mut idx = fit.selector.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_pool_inputs_are_rejected() {
        let (z, _) = planted_embeddings(30, 16, &[0], 4, 1.0, 2);
        let one_class = vec![1usize; 30];
        let cfg = ForestConfig::default();
        let attr = AttributionConfig::default();
        assert!(fit_shap_pool(z.view(), &one_class, 4, &cfg, &attr, 4, 0).is_err());
        let (z_small, y_small) = planted_embeddings(10, 16, &[0], 2, 1.0, 2);
        assert!(fit_shap_pool(z_small.view(), &y_small, 2, &cfg, &attr, 4, 0).is_err());
    }
}
