//! Invariant suite behind `shapfuse verify`.
//!
//! Self-contained checks cover the attribution axioms, estimator
//! equivalence, gradient correctness, attention normalization, the
//! dimension contract, file round trips, and split stratification.
//! When pipeline artifacts exist in the output directory, the stored
//! attribution dumps are additionally cross-checked against the stored
//! forests (a perturbed forest breaks local accuracy and is reported).

use crate::attribution::{exact_shapley, tree_shapley};
use crate::data::io::{load_embeddings, load_json, load_matrix};
use crate::data::{
    generate_synthetic_cohort, stratified_split, Modality, SplitPart, SynthConfig,
};
use crate::error::Result;
use crate::forest::{class_margin, fit_forest, ForestConfig, Tree, TreeEnsemble, TreeNode};
use crate::fusion::{concat, kronecker};
use crate::mil::{bag_forward, gradient_check, MilDims, MilParams};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::manifest::RunManifest;
use crate::pool::{apply_pool, DimensionSelector, PoolMethod};
use crate::seeding::derive_seed;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check { name: name.to_string(), passed, detail });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn counts(&self) -> (usize, usize) {
        let passed = self.checks.iter().filter(|c| c.passed).count();
        (passed, self.checks.len())
    }
}

/// Outcome of a randomized estimator-equivalence battery.
#[derive(Debug, Clone, Copy)]
pub struct BatteryOutcome {
    pub queries: usize,
    pub max_estimator_gap: f64,
    pub max_local_accuracy_err: f64,
    pub max_dummy_phi: f64,
}

/// Random forest fixture: `m` features, planted labels, bounded size.
pub fn random_forest(
    seed: u64,
    n: usize,
    m: usize,
    classes: usize,
    trees: usize,
    depth: usize,
) -> Result<(TreeEnsemble, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::<f64>::zeros((n, m));
    for v in x.iter_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    let y: Vec<usize> = (0..n)
        .map(|i| {
            let s: f64 = (0..m).map(|j| x[(i, j)] * (((j % 3) as f64) - 1.0)).sum();
            (((s * 2.5).abs() as usize) + (i % 2)) % classes
        })
        .collect();
    let cfg = ForestConfig {
        n_trees: trees,
        max_depth: depth,
        min_samples_leaf: 2,
        seed: derive_seed(seed, "battery-forest", 0),
        ..Default::default()
    };
    let ens = fit_forest(x.view(), &y, classes, &cfg)?;
    Ok((ens, x))
}

/// Runs `n_forests` random models with `queries_per_forest` random
/// (foreground, background, class) queries each, comparing the fast
/// estimator against exact enumeration and checking local accuracy and
/// the dummy axiom on an appended unused feature.
pub fn estimator_battery(
    n_forests: usize,
    queries_per_forest: usize,
    max_features: usize,
    max_trees: usize,
    max_depth: usize,
    seed: u64,
) -> Result<BatteryOutcome> {
    let mut max_gap = 0.0f64;
    let mut max_local = 0.0f64;
    let mut max_dummy = 0.0f64;
    let mut queries = 0usize;
    for f in 0..n_forests {
        let fseed = derive_seed(seed, "battery", f as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(fseed);
        let m = 3 + (f % (max_features.saturating_sub(3).max(1)));
        let classes = 2 + (f % 3).min(2);
        let trees = 1 + (f % max_trees);
        let depth = 1 + (f % max_depth);
        let (mut ens, x) = random_forest(fseed, 50, m, classes, trees, depth)?;
        // widen by one unused feature to exercise the dummy axiom
        ens.num_features = m + 1;
        for _ in 0..queries_per_forest {
            let mut fg: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let mut bg = x.row(rng.random_range(0..x.nrows())).to_vec();
            fg.push(rng.random::<f64>());
            bg.push(-rng.random::<f64>());
            let c = rng.random_range(0..classes);
            let exact = exact_shapley(&ens, &fg, &bg, c)?;
            let fast = tree_shapley(&ens, &fg, &bg, c)?;
            for (a, b) in exact.phi.iter().zip(&fast.phi) {
                max_gap = max_gap.max((a - b).abs());
            }
            let f_fg = class_margin(&ens, &fg, c)?;
            max_local = max_local.max((exact.sum() - f_fg).abs());
            max_local = max_local.max((fast.sum() - f_fg).abs());
            max_dummy = max_dummy.max(exact.phi[m].abs()).max(fast.phi[m].abs());
            queries += 1;
        }
    }
    Ok(BatteryOutcome {
        queries,
        max_estimator_gap: max_gap,
        max_local_accuracy_err: max_local,
        max_dummy_phi: max_dummy,
    })
}

fn leaf(value: Vec<f64>, cover: u32) -> TreeNode {
    TreeNode::Leaf { value, cover }
}

/// Single-class tree splitting on `feature` at 0.5 with given leaf values.
fn stump(feature: usize, lo: f64, hi: f64) -> Tree {
    Tree {
        nodes: vec![
            TreeNode::Split { feature, threshold: 0.5, left: 1, right: 2, cover: 2 },
            leaf(vec![lo], 1),
            leaf(vec![hi], 1),
        ],
    }
}

fn check_symmetry() -> (bool, String) {
    // two features used identically by twin trees; equal query values
    let ens = TreeEnsemble::from_trees(vec![stump(0, 0.1, 0.9), stump(1, 0.1, 0.9)], 2, 1)
        .expect("valid ensemble");
    let fg = vec![0.8, 0.8];
    let bg = vec![0.2, 0.2];
    let exact = exact_shapley(&ens, &fg, &bg, 0).expect("exact");
    let fast = tree_shapley(&ens, &fg, &bg, 0).expect("fast");
    let gap = (exact.phi[0] - exact.phi[1]).abs().max((fast.phi[0] - fast.phi[1]).abs());
    (gap <= 1e-9, format!("symmetric feature gap {gap:.3e}"))
}

fn check_linearity_and_scaling(seed: u64) -> (bool, String) {
    let (ens, x) = random_forest(seed, 40, 5, 2, 6, 3).expect("fixture");
    let fg = x.row(0).to_vec();
    let bg = x.row(1).to_vec();
    let full = tree_shapley(&ens, &fg, &bg, 0).expect("full");
    // mean of single-tree attributions
    let mut mean = vec![0.0f64; 5];
    for t in 0..ens.trees.len() {
        let single = tree_shapley(&ens.single_tree(t), &fg, &bg, 0).expect("single");
        for (acc, v) in mean.iter_mut().zip(&single.phi) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= ens.trees.len() as f64;
    }
    let mut gap = 0.0f64;
    for (a, b) in full.phi.iter().zip(&mean) {
        gap = gap.max((a - b).abs());
    }
    // leaf scaling scales attributions
    let kappa = 2.75;
    let scaled = tree_shapley(&ens.with_scaled_leaves(kappa), &fg, &bg, 0).expect("scaled");
    for (s, v) in scaled.phi.iter().zip(&full.phi) {
        gap = gap.max((s - kappa * v).abs());
    }
    (gap <= 1e-9, format!("linearity/scaling gap {gap:.3e}"))
}

fn check_consistency() -> (bool, String) {
    // deepened stump; raising the foreground-side leaf of feature 0 must
    // not lower feature 0's attribution
    let base = Tree {
        nodes: vec![
            TreeNode::Split { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 4 },
            leaf(vec![0.2], 2),
            TreeNode::Split { feature: 1, threshold: 0.5, left: 3, right: 4, cover: 2 },
            leaf(vec![0.5], 1),
            leaf(vec![0.7], 1),
        ],
    };
    let mut bumped = base.clone();
    if let TreeNode::Leaf { value, .. } = &mut bumped.nodes[4] {
        value[0] += 0.2;
    }
    let m1 = TreeEnsemble::from_trees(vec![base], 2, 1).expect("m1");
    let m2 = TreeEnsemble::from_trees(vec![bumped], 2, 1).expect("m2");
    let fg = vec![0.9, 0.9];
    let bg = vec![0.1, 0.1];
    let mut worst = f64::INFINITY;
    for (a, b) in [
        (exact_shapley(&m1, &fg, &bg, 0).expect("e1"), exact_shapley(&m2, &fg, &bg, 0).expect("e2")),
        (tree_shapley(&m1, &fg, &bg, 0).expect("t1"), tree_shapley(&m2, &fg, &bg, 0).expect("t2")),
    ] {
        worst = worst.min(b.phi[0] - a.phi[0]);
    }
    (worst >= -1e-12, format!("consistency margin {worst:.3e}"))
}

fn check_mil(seed: u64) -> (bool, String) {
    use crate::data::Bag;
    let dims = MilDims { d_in: 6, d_h: 10, d_a: 5, classes: 3 };
    let params = MilParams::init(dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::new();
    for i in 0..4 {
        let k = 2 + i;
        let mut m = Array2::<f64>::zeros((k, 6));
        for v in m.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        bags.push(Bag::new(m, i % 3, Modality::He, format!("v{i}")).expect("bag"));
    }
    let refs: Vec<&crate::data::Bag> = bags.iter().collect();
    // attention normalization and permutation invariance
    let mut max_sum_err = 0.0f64;
    let mut max_perm_err = 0.0f64;
    for bag in &refs {
        let fwd = bag_forward(bag, &params).expect("forward");
        max_sum_err = max_sum_err.max((fwd.attention.sum() - 1.0).abs());
        let k = bag.num_instances();
        let mut rev = bag.instances.clone();
        for (i, row) in bag.instances.rows().into_iter().enumerate() {
            rev.row_mut(k - 1 - i).assign(&row);
        }
        let rbag =
            Bag::new(rev, bag.label, bag.modality, bag.patient_id.clone()).expect("bag");
        let rfwd = bag_forward(&rbag, &params).expect("forward");
        for (a, b) in fwd.z.iter().zip(rfwd.z.iter()) {
            max_perm_err = max_perm_err.max((a - b).abs());
        }
    }
    let grad = gradient_check(&params, &refs, 220, 1e-5, seed ^ 1).expect("gradient check");
    let ok = max_sum_err <= 1e-9 && max_perm_err <= 1e-10 && grad.max_rel_err <= 1e-4;
    (
        ok,
        format!(
            "attention sum err {max_sum_err:.2e}, permutation err {max_perm_err:.2e}, \
             gradient rel err {:.2e} over {} params",
            grad.max_rel_err, grad.checked
        ),
    )
}

fn check_dimension_contract() -> (bool, String) {
    let k = 32usize;
    let dim = 512usize;
    let selector = DimensionSelector {
        method: PoolMethod::Rand,
        k,
        input_dim: dim,
        indices: (0..k).collect(),
        scores: Vec::new(),
        fit_seed: 0,
    };
    let z: Vec<f64> = (0..dim).map(|v| v as f64 / dim as f64).collect();
    let pooled = apply_pool(&selector, &z).expect("pool");
    let joined = concat(&pooled.values, &pooled.values).expect("concat");
    let fused = kronecker(&joined, &pooled.values).expect("kron");
    let ok = pooled.values.len() == 32 && joined.len() == 64 && fused.len() == 2048;
    (ok, format!("pooled {} concat {} fused {}", pooled.values.len(), joined.len(), fused.len()))
}

fn check_matrix_round_trip(seed: u64) -> (bool, String) {
    let dir = match tempfile_dir() {
        Ok(d) => d,
        Err(e) => return (false, format!("tempdir: {e}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..10 {
        let rows = 1 + (i % 5);
        let cols = 1 + ((i * 7) % 32);
        let mut m = Array2::<f64>::zeros((rows, cols));
        for v in m.iter_mut() {
            let exp = rng.random_range(-100..100);
            *v = (rng.random::<f64>() * 2.0 - 1.0) * 2f64.powi(exp);
        }
        let path = dir.path().join(format!("m{i}.csv"));
        if let Err(e) = crate::data::io::save_matrix(&path, &m, seed, "verify") {
            return (false, format!("save: {e}"));
        }
        match load_matrix(&path) {
            Ok((back, _)) => {
                for (a, b) in m.iter().zip(back.iter()) {
                    if a.to_bits() != b.to_bits() {
                        return (false, format!("bit drift at matrix {i}"));
                    }
                }
            }
            Err(e) => return (false, format!("load: {e}")),
        }
    }
    (true, "10 random matrices bit-exact".into())
}

fn tempfile_dir() -> std::io::Result<tempfile::TempDir> {
    tempfile::tempdir()
}

fn check_split_and_determinism() -> (bool, String) {
    let cfg = SynthConfig { patients: 100, mean_bag_size: 3, bag_dispersion: 1, ..Default::default() };
    let a = match generate_synthetic_cohort(&cfg) {
        Ok(c) => c,
        Err(e) => return (false, format!("generate: {e}")),
    };
    let b = generate_synthetic_cohort(&cfg).expect("second generation");
    let identical = serde_json::to_string(&a).expect("json")
        == serde_json::to_string(&b).expect("json");
    let split = match stratified_split(&a, (0.8, 0.1, 0.1), 3) {
        Ok(s) => s,
        Err(e) => return (false, format!("split: {e}")),
    };
    let sizes = (
        split.count(SplitPart::Train),
        split.count(SplitPart::Val),
        split.count(SplitPart::Test),
    );
    let ok = identical && sizes == (80, 10, 10);
    (ok, format!("determinism {identical}, split sizes {sizes:?}"))
}

/// Cross-checks stored attribution dumps against the stored pool
/// forests: base value plus summed contributions must reproduce the
/// forest output on every attributed embedding.
fn check_artifacts(out: &Path, cfg: &PipelineConfig, report: &mut VerifyReport) {
    if RunManifest::load(out).is_err() {
        return; // nothing persisted yet; self-contained checks suffice
    }
    #[derive(Deserialize)]
    struct AttributionMeta {
        attribution_part: SplitPart,
        phi0: Vec<f64>,
    }
    let mut max_err = 0.0f64;
    let mut rows_checked = 0usize;
    for fold in 0..cfg.folds {
        for m in Modality::ALL {
            let forest_path = out.join(format!("folds/fold_{fold}/pools/{m}.forest.json"));
            let emb_path = out.join(format!("folds/fold_{fold}/embeddings/{m}.csv"));
            let attr_dir = out.join(format!("folds/fold_{fold}/attribution/{m}"));
            if !forest_path.exists() || !emb_path.exists() || !attr_dir.exists() {
                continue;
            }
            let forest: TreeEnsemble = match load_json(&forest_path) {
                Ok(f) => f,
                Err(e) => {
                    report.push(
                        "artifact-attribution-local-accuracy",
                        false,
                        format!("cannot load {}: {e}", forest_path.display()),
                    );
                    return;
                }
            };
            let table = match load_embeddings(&emb_path, m) {
                Ok(t) => t,
                Err(e) => {
                    report.push(
                        "artifact-attribution-local-accuracy",
                        false,
                        format!("cannot load {}: {e}", emb_path.display()),
                    );
                    return;
                }
            };
            let meta: AttributionMeta = match load_json(&attr_dir.join("meta.json")) {
                Ok(m) => m,
                Err(e) => {
                    report.push(
                        "artifact-attribution-local-accuracy",
                        false,
                        format!("cannot load attribution meta: {e}"),
                    );
                    return;
                }
            };
            let foregrounds = table.rows_in(meta.attribution_part);
            for (c, &phi0) in meta.phi0.iter().enumerate() {
                let (phi, _) = match load_matrix(&attr_dir.join(format!("class_{c}.csv"))) {
                    Ok(p) => p,
                    Err(e) => {
                        report.push(
                            "artifact-attribution-local-accuracy",
                            false,
                            format!("cannot load class_{c}.csv: {e}"),
                        );
                        return;
                    }
                };
                for (i, row) in foregrounds.iter().enumerate() {
                    let f_fg = match class_margin(&forest, &row.z, c) {
                        Ok(v) => v,
                        Err(e) => {
                            report.push(
                                "artifact-attribution-local-accuracy",
                                false,
                                format!("margin: {e}"),
                            );
                            return;
                        }
                    };
                    let reconstructed = phi0 + phi.row(i).sum();
                    max_err = max_err.max((reconstructed - f_fg).abs());
                    rows_checked += 1;
                }
            }
        }
    }
    if rows_checked > 0 {
        report.push(
            "artifact-attribution-local-accuracy",
            max_err <= 1e-9,
            format!("max |phi0 + sum(phi) - f(z)| = {max_err:.3e} over {rows_checked} rows"),
        );
    }
}

/// Runs the full suite. Artifact checks are included when the output
/// directory carries a manifest.
pub fn run_verify(cfg: &PipelineConfig) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let seed = derive_seed(cfg.master_seed, "verify", 0);

    let battery = estimator_battery(40, 3, 10, 8, 4, seed)?;
    report.push(
        "shapley-estimator-equivalence",
        battery.max_estimator_gap <= 1e-9,
        format!("max gap {:.3e} over {} queries", battery.max_estimator_gap, battery.queries),
    );
    report.push(
        "shapley-local-accuracy",
        battery.max_local_accuracy_err <= 1e-9,
        format!("max err {:.3e}", battery.max_local_accuracy_err),
    );
    report.push(
        "shapley-dummy-axiom",
        battery.max_dummy_phi == 0.0,
        format!("max |phi_unused| {:.3e}", battery.max_dummy_phi),
    );
    let (ok, detail) = check_symmetry();
    report.push("shapley-symmetry", ok, detail);
    let (ok, detail) = check_linearity_and_scaling(seed ^ 2);
    report.push("shapley-linearity-scaling", ok, detail);
    let (ok, detail) = check_consistency();
    report.push("shapley-consistency", ok, detail);
    let (ok, detail) = check_mil(seed ^ 3);
    report.push("mil-gradients-attention", ok, detail);
    let (ok, detail) = check_dimension_contract();
    report.push("dimension-contract", ok, detail);
    let (ok, detail) = check_matrix_round_trip(seed ^ 4);
    report.push("matrix-round-trip", ok, detail);
    let (ok, detail) = check_split_and_determinism();
    report.push("split-and-generator-determinism", ok, detail);

    check_artifacts(&cfg.out_dir, cfg, &mut report);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::monte_carlo::test_support::tiny_config;
    use crate::pipeline::stages::Pipeline;

    #[test]
    fn fresh_suite_passes() {
        let cfg = PipelineConfig { out_dir: "/nonexistent-shapfuse".into(), ..Default::default() };
        let report = run_verify(&cfg).unwrap();
        assert!(report.all_passed(), "{:?}", report.checks);
        // no artifacts -> only the self-contained checks
        assert_eq!(report.checks.len(), 10);
    }

    #[test]
    fn perturbed_forest_artifact_fails_local_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = dir.path().join("out");
        let mut p = Pipeline::new(cfg.clone()).unwrap();
        p.run_all(None).unwrap();

        let clean = run_verify(&cfg).unwrap();
        assert!(clean.all_passed(), "{:?}", clean.checks);
        assert_eq!(clean.checks.len(), 11, "artifact check should have run");

        // perturb one leaf value in a stored pool forest
        let forest_path = cfg.out_dir.join("folds/fold_0/pools/HE.forest.json");
        let raw = std::fs::read_to_string(&forest_path).unwrap();
        let mut forest: TreeEnsemble = serde_json::from_str(&raw).unwrap();
        'outer: for tree in forest.trees.iter_mut() {
            for node in tree.nodes.iter_mut() {
                if let TreeNode::Leaf { value, .. } = node {
                    value[0] += 0.25;
                    break 'outer;
                }
            }
        }
        std::fs::write(&forest_path, serde_json::to_string(&forest).unwrap()).unwrap();

        let tampered = run_verify(&cfg).unwrap();
        let check = tampered
            .checks
            .iter()
            .find(|c| c.name == "artifact-attribution-local-accuracy")
            .expect("artifact check present");
        assert!(!check.passed, "tampering must be detected: {}", check.detail);
    }
}
