//! Repeated-split ablation runner.
//!
//! Each fold derives its own seed from the master seed, resplits the
//! cohort, retrains the per-modality bag networks, refits the pools,
//! and evaluates the full ablation grid: seven modality combinations
//! crossed with six pooling operators, plus a per-head pooling
//! comparison on unimodal H&E features.

use crate::data::io::EmbeddingTable;
use crate::data::{
    bags_in_part, stratified_split, Cohort, Modality, SplitAssignment, SplitPart,
};
use crate::error::{Error, Result};
use crate::fusion::{
    build_fused_dataset, evaluate, train_final, FusedDataset, HeadKind, ModalityCombo,
};
use crate::metrics::{evaluate_predictions, mean_sd, Metrics};
use crate::mil::{extract_embeddings, mil_proba, train_mil, MilDims, MilModel, TrainConfig};
use crate::pipeline::config::PipelineConfig;
use crate::pool::{
    fit_shap_pool_with_parts, make_baseline_pool, DimensionSelector, PoolMethod, ShapPoolFit,
};
use crate::seeding::derive_seed;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Pooling operators evaluated in the ablation grid, in column order.
pub const POOLING_KEYS: [&str; 6] = ["SHAP", "AVG", "MAX", "RAND1", "RAND2", "RAND3"];

pub fn fold_seed(master_seed: u64, fold: usize) -> u64 {
    derive_seed(master_seed, "fold", fold as u64)
}

/// Stratified split of one fold.
pub fn make_split(cohort: &Cohort, cfg: &PipelineConfig, fold: usize) -> Result<SplitAssignment> {
    stratified_split(
        cohort,
        cfg.split_ratios,
        derive_seed(fold_seed(cfg.master_seed, fold), "split", 0),
    )
}

/// Trains the three per-modality bag networks of one fold in parallel.
pub fn train_fold_mils(
    cohort: &Cohort,
    split: &SplitAssignment,
    cfg: &PipelineConfig,
    fold: usize,
) -> Result<BTreeMap<Modality, MilModel>> {
    let seed = fold_seed(cfg.master_seed, fold);
    let dims = MilDims {
        d_in: cfg.synth.d_in,
        d_h: cfg.mil_hidden,
        d_a: cfg.mil_attention,
        classes: cfg.synth.classes,
    };
    let jobs: Vec<Modality> = Modality::ALL.to_vec();
    let models: Vec<(Modality, MilModel)> = jobs
        .into_par_iter()
        .map(|m| {
            let train = bags_in_part(cohort, split, m, SplitPart::Train);
            let val = bags_in_part(cohort, split, m, SplitPart::Val);
            let tc = TrainConfig {
                seed: derive_seed(seed, "mil", m.index() as u64),
                ..cfg.mil.for_modality(m).clone()
            };
            train_mil(&train, &val, dims, &tc).map(|model| (m, model))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(models.into_iter().collect())
}

/// Embedding tables for every modality of one fold.
pub fn extract_fold(
    cohort: &Cohort,
    split: &SplitAssignment,
    models: &BTreeMap<Modality, MilModel>,
) -> Result<BTreeMap<Modality, EmbeddingTable>> {
    Modality::ALL
        .iter()
        .map(|&m| {
            let model = models
                .get(&m)
                .ok_or_else(|| Error::ShapeMismatch(format!("no model for {m}")))?;
            Ok((m, extract_embeddings(model, cohort, split, m)?))
        })
        .collect()
}

fn part_matrix(table: &EmbeddingTable, part: SplitPart) -> (Array2<f64>, Vec<usize>) {
    let rows = table.rows_in(part);
    let mut m = Array2::<f64>::zeros((rows.len(), table.dim));
    let mut y = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.z.iter().enumerate() {
            m[(i, j)] = v;
        }
        y.push(row.label);
    }
    (m, y)
}

/// Fitted pools of one fold: the attribution-driven selector per
/// modality plus the shared baseline selectors.
#[derive(Debug, Clone)]
pub struct FoldPools {
    pub shap: BTreeMap<Modality, ShapPoolFit>,
    /// (pooling key, per-modality selectors), in [`POOLING_KEYS`] order.
    pub sets: Vec<(String, BTreeMap<Modality, DimensionSelector>)>,
}

/// Fits the attribution pool per modality (forest on TRAIN embeddings,
/// attributions on VAL — or TEST under the leaky wiring flag) and
/// builds the AVG/MAX/RAND baselines.
pub fn fit_fold_pools(
    tables: &BTreeMap<Modality, EmbeddingTable>,
    cfg: &PipelineConfig,
    fold: usize,
) -> Result<FoldPools> {
    let seed = fold_seed(cfg.master_seed, fold);
    let k = cfg.pool.k;
    let dim = cfg.mil_hidden;
    let attr_part =
        if cfg.pool.attribution_on_test { SplitPart::Test } else { SplitPart::Val };
    let fits: Vec<(Modality, ShapPoolFit)> = Modality::ALL
        .to_vec()
        .into_par_iter()
        .map(|m| {
            let table = &tables[&m];
            let (z_fit, y_fit) = part_matrix(table, SplitPart::Train);
            let (z_attr, _) = part_matrix(table, attr_part);
            let fit = fit_shap_pool_with_parts(
                z_fit.view(),
                &y_fit,
                z_attr.view(),
                table.rows.iter().map(|r| r.label).max().unwrap_or(0) + 1,
                &cfg.pool.forest,
                &cfg.pool.attribution,
                k,
                derive_seed(seed, "pool", m.index() as u64),
            )?;
            Ok((m, fit))
        })
        .collect::<Result<Vec<_>>>()?;
    let shap: BTreeMap<Modality, ShapPoolFit> = fits.into_iter().collect();

    let mut sets: Vec<(String, BTreeMap<Modality, DimensionSelector>)> = Vec::new();
    let shap_set: BTreeMap<Modality, DimensionSelector> =
        shap.iter().map(|(m, f)| (*m, f.selector.clone())).collect();
    sets.push(("SHAP".to_string(), shap_set));
    for method in [PoolMethod::Avg, PoolMethod::Max] {
        let sel = make_baseline_pool(method, k, dim, 0)?;
        let set: BTreeMap<Modality, DimensionSelector> =
            Modality::ALL.iter().map(|&m| (m, sel.clone())).collect();
        sets.push((method.to_string(), set));
    }
    for variant in 1..=3u64 {
        let set: BTreeMap<Modality, DimensionSelector> = Modality::ALL
            .iter()
            .map(|&m| {
                let s = derive_seed(seed, "rand-pool", variant * 8 + m.index() as u64);
                Ok((m, make_baseline_pool(PoolMethod::Rand, k, dim, s)?))
            })
            .collect::<Result<_>>()?;
        sets.push((format!("RAND{variant}"), set));
    }
    Ok(FoldPools { shap, sets })
}

/// All measured numbers of one fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    /// Test metrics of each bag network's own classifier head.
    pub unimodal_mil: BTreeMap<String, Metrics>,
    /// combo key -> pooling key -> test metrics of the forest head.
    pub grid: BTreeMap<String, BTreeMap<String, Metrics>>,
    /// head -> pooling key -> test metrics on unimodal H&E features.
    pub pooling_heads: BTreeMap<String, BTreeMap<String, Metrics>>,
    /// combo key -> test metrics of the configured default head under
    /// attribution pooling; the headline ablation rows.
    pub fused_default: BTreeMap<String, Metrics>,
    pub mil_epochs: BTreeMap<String, usize>,
}

/// Test metrics of one bag network.
fn mil_test_metrics(
    cohort: &Cohort,
    split: &SplitAssignment,
    model: &MilModel,
    modality: Modality,
    classes: usize,
) -> Result<Metrics> {
    let test = bags_in_part(cohort, split, modality, SplitPart::Test);
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for bag in test {
        scores.push(mil_proba(model, bag)?);
        labels.push(bag.label);
    }
    evaluate_predictions(&labels, &scores, classes)
}

fn head_metrics(
    kind: HeadKind,
    parts: &BTreeMap<SplitPart, FusedDataset>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Metrics> {
    let train = parts
        .get(&SplitPart::Train)
        .ok_or_else(|| Error::Degenerate("fused dataset lacks a train part".into()))?;
    let test = parts
        .get(&SplitPart::Test)
        .ok_or_else(|| Error::Degenerate("fused dataset lacks a test part".into()))?;
    let val = parts.get(&SplitPart::Val);
    let head = train_final(
        kind,
        train.x.view(),
        &train.y,
        val.map(|v| (v.x.view(), &v.y[..])),
        cfg.synth.classes,
        &cfg.final_head,
        seed,
    )?;
    evaluate(&head, test.x.view(), &test.y, cfg.synth.classes)
}

/// Pooling selector sets in grid column order.
pub type PoolSets = Vec<(String, BTreeMap<Modality, DimensionSelector>)>;

/// Evaluates the ablation grid and pooling comparison of one fold.
pub fn compute_fold_metrics(
    cohort: &Cohort,
    split: &SplitAssignment,
    models: &BTreeMap<Modality, MilModel>,
    tables: &BTreeMap<Modality, EmbeddingTable>,
    sets: &PoolSets,
    cfg: &PipelineConfig,
    fold: usize,
) -> Result<FoldMetrics> {
    let seed = fold_seed(cfg.master_seed, fold);
    let classes = cfg.synth.classes;

    let mut unimodal_mil = BTreeMap::new();
    let mut mil_epochs = BTreeMap::new();
    for (&m, model) in models {
        unimodal_mil
            .insert(m.to_string(), mil_test_metrics(cohort, split, model, m, classes)?);
        mil_epochs.insert(m.to_string(), model.epochs_run);
    }

    // ablation grid: all (combo, pooling) cells are independent jobs
    let grid_jobs: Vec<(usize, usize)> = (0..ModalityCombo::ALL.len())
        .flat_map(|ci| (0..sets.len()).map(move |pi| (ci, pi)))
        .collect();
    let grid_cells: Vec<(String, String, Metrics)> = grid_jobs
        .into_par_iter()
        .map(|(ci, pi)| {
            let combo = ModalityCombo::ALL[ci];
            let (pool_key, selectors) = &sets[pi];
            let parts = build_fused_dataset(combo, selectors, tables)?;
            let metrics = head_metrics(
                HeadKind::Forest,
                &parts,
                cfg,
                derive_seed(seed, "grid", (ci * 16 + pi) as u64),
            )?;
            Ok((combo.key(), pool_key.clone(), metrics))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grid: BTreeMap<String, BTreeMap<String, Metrics>> = BTreeMap::new();
    for (combo_key, pool_key, metrics) in grid_cells {
        grid.entry(combo_key).or_default().insert(pool_key, metrics);
    }

    // pooling comparison across heads, on unimodal H&E features
    let head_jobs: Vec<(usize, usize)> = (0..HeadKind::COMPARISON.len())
        .flat_map(|hi| (0..sets.len()).map(move |pi| (hi, pi)))
        .collect();
    let head_cells: Vec<(String, String, Metrics)> = head_jobs
        .into_par_iter()
        .map(|(hi, pi)| {
            let head = HeadKind::COMPARISON[hi];
            let (pool_key, selectors) = &sets[pi];
            let parts =
                build_fused_dataset(ModalityCombo::Single(Modality::He), selectors, tables)?;
            let train = &parts[&SplitPart::Train];
            let test = &parts[&SplitPart::Test];
            let val = parts.get(&SplitPart::Val);
            let trained = train_final(
                head,
                train.x.view(),
                &train.y,
                val.map(|v| (v.x.view(), &v.y[..])),
                classes,
                &cfg.final_head,
                derive_seed(seed, "pool-head", (hi * 16 + pi) as u64),
            )?;
            let metrics = evaluate(&trained, test.x.view(), &test.y, classes)?;
            Ok((head.to_string(), pool_key.clone(), metrics))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pooling_heads: BTreeMap<String, BTreeMap<String, Metrics>> = BTreeMap::new();
    for (head_key, pool_key, metrics) in head_cells {
        pooling_heads.entry(head_key).or_default().insert(pool_key, metrics);
    }

    // headline rows: every combo under attribution pooling with the
    // configured default head
    let shap_set = &sets[0].1;
    let default_cells: Vec<(String, Metrics)> = (0..ModalityCombo::ALL.len())
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|ci| {
            let combo = ModalityCombo::ALL[ci];
            let parts = build_fused_dataset(combo, shap_set, tables)?;
            let metrics = head_metrics(
                cfg.final_head.head,
                &parts,
                cfg,
                derive_seed(seed, "fused-default", ci as u64),
            )?;
            Ok((combo.key(), metrics))
        })
        .collect::<Result<Vec<_>>>()?;
    let fused_default: BTreeMap<String, Metrics> = default_cells.into_iter().collect();

    Ok(FoldMetrics {
        fold,
        unimodal_mil,
        grid,
        pooling_heads,
        fused_default,
        mil_epochs,
    })
}

/// Runs one whole fold in memory.
pub fn run_fold(cohort: &Cohort, cfg: &PipelineConfig, fold: usize) -> Result<FoldMetrics> {
    let split = make_split(cohort, cfg, fold)?;
    let models = train_fold_mils(cohort, &split, cfg, fold)?;
    let tables = extract_fold(cohort, &split, &models)?;
    let pools = fit_fold_pools(&tables, cfg, fold)?;
    compute_fold_metrics(cohort, &split, &models, &tables, &pools.sets, cfg, fold)
}

/// The ablation report over all folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub folds: Vec<FoldMetrics>,
}

impl MonteCarloReport {
    /// Mean and sd of grid accuracy for one (combo, pooling) cell.
    pub fn grid_accuracy(&self, combo: &str, pooling: &str) -> (f64, f64) {
        let vals: Vec<f64> =
            self.folds.iter().map(|f| f.grid[combo][pooling].accuracy).collect();
        mean_sd(&vals)
    }

    pub fn grid_auc(&self, combo: &str, pooling: &str) -> (f64, f64) {
        let vals: Vec<f64> = self
            .folds
            .iter()
            .filter_map(|f| f.grid[combo][pooling].auc)
            .collect();
        if vals.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_sd(&vals)
        }
    }

    pub fn unimodal_accuracy(&self, modality: &str) -> (f64, f64) {
        let vals: Vec<f64> =
            self.folds.iter().map(|f| f.unimodal_mil[modality].accuracy).collect();
        mean_sd(&vals)
    }

    pub fn pooling_head_accuracy(&self, head: &str, pooling: &str) -> (f64, f64) {
        let vals: Vec<f64> =
            self.folds.iter().map(|f| f.pooling_heads[head][pooling].accuracy).collect();
        mean_sd(&vals)
    }

    /// Accuracy of the default head on attribution-pooled fusions.
    pub fn fused_default_accuracy(&self, combo: &str) -> (f64, f64) {
        let vals: Vec<f64> =
            self.folds.iter().map(|f| f.fused_default[combo].accuracy).collect();
        mean_sd(&vals)
    }

    pub fn fused_default_auc(&self, combo: &str) -> (f64, f64) {
        let vals: Vec<f64> =
            self.folds.iter().filter_map(|f| f.fused_default[combo].auc).collect();
        if vals.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_sd(&vals)
        }
    }
}

/// Generates the cohort and runs every fold.
pub fn run_monte_carlo(cfg: &PipelineConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    let mut synth = cfg.synth.clone();
    synth.seed = derive_seed(cfg.master_seed, "synth", 0);
    let cohort = crate::data::generate_synthetic_cohort(&synth)?;
    let folds = (0..cfg.folds)
        .map(|f| run_fold(&cohort, cfg, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloReport { folds })
}

/// Test-only fixtures shared with the pipeline and verify tests.
#[cfg(test)]
pub mod test_support {
    use super::*;
    use crate::data::{RecMixConfig, SynthConfig};
    use crate::forest::ForestConfig;
    use crate::fusion::FinalClassifierConfig;
    use crate::mil::TrainConfig;
    use crate::pipeline::config::ModalityTrainConfigs;
    use crate::pool::AttributionConfig;

    /// A deliberately tiny configuration for fast orchestration tests.
    pub fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            folds: 1,
            master_seed: 5,
            split_ratios: (0.6, 0.2, 0.2),
            synth: SynthConfig {
                patients: 40,
                mean_bag_size: 3,
                bag_dispersion: 1,
                rec: RecMixConfig::default(),
                ..SynthConfig::default()
            },
            mil_hidden: 32,
            mil_attention: 8,
            mil: ModalityTrainConfigs {
                he: TrainConfig { max_epochs: 6, patience: 3, ..Default::default() },
                ihc: TrainConfig { max_epochs: 6, patience: 3, ..Default::default() },
                rec_he: TrainConfig { max_epochs: 6, patience: 3, ..Default::default() },
            },
            pool: crate::pipeline::config::PoolConfig {
                k: 8,
                forest: ForestConfig { n_trees: 12, max_depth: 4, ..Default::default() },
                attribution: AttributionConfig { background_size: 10, holdout_ratio: 0.25 },
                attribution_on_test: false,
            },
            final_head: FinalClassifierConfig {
                forest: ForestConfig { n_trees: 15, max_depth: 5, ..Default::default() },
                mlp_train: TrainConfig { max_epochs: 8, patience: 3, ..Default::default() },
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::tiny_config;
    use super::*;

    #[test]
    fn single_fold_produces_the_full_grid() {
        let cfg = tiny_config();
        let report = run_monte_carlo(&cfg).unwrap();
        assert_eq!(report.folds.len(), 1);
        let fold = &report.folds[0];
        assert_eq!(fold.grid.len(), 7);
        for row in fold.grid.values() {
            assert_eq!(row.len(), 6);
            for key in POOLING_KEYS {
                assert!(row.contains_key(key));
            }
        }
        assert_eq!(fold.pooling_heads.len(), 5);
        assert_eq!(fold.unimodal_mil.len(), 3);
    }

    #[test]
    fn identical_master_seed_reproduces_the_table() {
        let cfg = tiny_config();
        let a = run_monte_carlo(&cfg).unwrap();
        let b = run_monte_carlo(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.folds).unwrap(),
            serde_json::to_string(&b.folds).unwrap()
        );
    }
}
