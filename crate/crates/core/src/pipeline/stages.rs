//! Resumable, file-backed pipeline stages.
//!
//! Every stage checks its recorded outputs against the manifest and
//! skips recomputation when they are intact and the config is
//! unchanged; otherwise it recomputes deterministically from the
//! derived stage seed and overwrites. Missing upstream artifacts
//! produce errors naming the command that builds them.

use crate::data::io::{
    load_embeddings, load_json, save_embeddings, save_json, save_matrix, sidecar_path,
    EmbeddingTable,
};
use crate::data::{
    generate_synthetic_cohort, rows_to_matrix, Bag, Cohort, Modality, SplitAssignment,
    SplitPart,
};
use crate::error::{Error, Result};
use crate::forest::TreeEnsemble;
use crate::fusion::monte_carlo::{
    compute_fold_metrics, extract_fold, fit_fold_pools, fold_seed, make_split, train_fold_mils,
    FoldMetrics, MonteCarloReport, PoolSets,
};
use crate::fusion::{build_fused_dataset, FusedDataset, ModalityCombo};
use crate::mil::MilModel;
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::manifest::{config_hash, RunManifest};
use crate::pipeline::report::write_report;
use crate::seeding::derive_seed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    TrainMil,
    Extract,
    FitPool,
    Fuse,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::TrainMil,
        Stage::Extract,
        Stage::FitPool,
        Stage::Fuse,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainMil => "train-mil",
            Stage::Extract => "extract",
            Stage::FitPool => "fit-pool",
            Stage::Fuse => "fuse",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .find(|s| s.as_str() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {name:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatientRecord {
    id: String,
    label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CohortIndex {
    num_classes: usize,
    generator_seed: u64,
    patients: Vec<PatientRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttributionMeta {
    attribution_part: SplitPart,
    phi0: Vec<f64>,
}

/// Orchestrates the stages over one output directory.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
    pub timings: BTreeMap<String, f64>,
    cohort_cache: Option<Cohort>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out)?;
        let manifest = match RunManifest::load(&out) {
            Ok(m) if m.config_sha256 == config_hash(&cfg) => m,
            _ => RunManifest::new(&cfg),
        };
        Ok(Pipeline { cfg, out, manifest, timings: BTreeMap::new(), cohort_cache: None })
    }

    // ---- paths -------------------------------------------------------

    fn cohort_index_path(&self) -> PathBuf {
        self.out.join("cohort/cohort.json")
    }

    fn bag_path(&self, patient: &str, modality: Modality) -> PathBuf {
        self.out.join(format!("cohort/{patient}/{modality}.csv"))
    }

    fn fold_dir(&self, fold: usize) -> PathBuf {
        self.out.join(format!("folds/fold_{fold}"))
    }

    fn splits_path(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("splits.json")
    }

    fn model_path(&self, fold: usize, m: Modality) -> PathBuf {
        self.fold_dir(fold).join(format!("models/{m}.mil.json"))
    }

    fn embeddings_path(&self, fold: usize, m: Modality) -> PathBuf {
        self.fold_dir(fold).join(format!("embeddings/{m}.csv"))
    }

    fn selectors_path(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("pools/selectors.json")
    }

    fn pool_forest_path(&self, fold: usize, m: Modality) -> PathBuf {
        self.fold_dir(fold).join(format!("pools/{m}.forest.json"))
    }

    fn attribution_dir(&self, fold: usize, m: Modality) -> PathBuf {
        self.fold_dir(fold).join(format!("attribution/{m}"))
    }

    fn fused_path(&self, fold: usize, part: SplitPart) -> PathBuf {
        self.fold_dir(fold).join(format!("fused/{part}.csv"))
    }

    fn metrics_path(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("metrics.json")
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .expect("artifact under out dir")
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn stage_done(&self, paths: &[PathBuf]) -> bool {
        let rels: Vec<String> = paths.iter().map(|p| self.rel(p)).collect();
        self.manifest.config_sha256 == config_hash(&self.cfg)
            && self.manifest.artifacts_valid(&self.out, &rels)
    }

    fn record_all(&mut self, paths: &[PathBuf], stage: Stage, seed: u64) -> Result<()> {
        for p in paths {
            let path = p.clone();
            self.manifest.record(&self.out, &path, stage.as_str(), seed)?;
        }
        Ok(())
    }

    fn time<T>(&mut self, key: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        *self.timings.entry(key.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        Ok(out)
    }

    fn synth_seed(&self) -> u64 {
        derive_seed(self.cfg.master_seed, "synth", 0)
    }

    // ---- loaders (error names the producing command) -----------------

    fn missing(what: &Path, produced_by: Stage) -> Error {
        Error::MissingArtifact {
            what: what.display().to_string(),
            produced_by: produced_by.as_str().to_string(),
        }
    }

    pub fn load_cohort(&mut self) -> Result<&Cohort> {
        if self.cohort_cache.is_none() {
            let index_path = self.cohort_index_path();
            if !index_path.exists() {
                return Err(Self::missing(&index_path, Stage::Synth));
            }
            let index: CohortIndex = load_json(&index_path)?;
            let mut bags = Vec::new();
            for patient in &index.patients {
                for m in Modality::ALL {
                    let path = self.bag_path(&patient.id, m);
                    if !path.exists() {
                        return Err(Self::missing(&path, Stage::Synth));
                    }
                    let (matrix, _) = crate::data::io::load_matrix(&path)?;
                    bags.push(Bag::new(matrix, patient.label, m, patient.id.clone())?);
                }
            }
            let cohort = Cohort {
                bags,
                num_classes: index.num_classes,
                generator_seed: index.generator_seed,
            };
            cohort.validate()?;
            self.cohort_cache = Some(cohort);
        }
        Ok(self.cohort_cache.as_ref().expect("cached"))
    }

    pub fn load_split(&self, fold: usize) -> Result<SplitAssignment> {
        let path = self.splits_path(fold);
        if !path.exists() {
            return Err(Self::missing(&path, Stage::Synth));
        }
        load_json(&path)
    }

    pub fn load_models(&self, fold: usize) -> Result<BTreeMap<Modality, MilModel>> {
        let mut out = BTreeMap::new();
        for m in Modality::ALL {
            let path = self.model_path(fold, m);
            if !path.exists() {
                return Err(Self::missing(&path, Stage::TrainMil));
            }
            out.insert(m, load_json::<MilModel>(&path)?);
        }
        Ok(out)
    }

    pub fn load_tables(&self, fold: usize) -> Result<BTreeMap<Modality, EmbeddingTable>> {
        let mut out = BTreeMap::new();
        for m in Modality::ALL {
            let path = self.embeddings_path(fold, m);
            if !path.exists() {
                return Err(Self::missing(&path, Stage::Extract));
            }
            out.insert(m, load_embeddings(&path, m)?);
        }
        Ok(out)
    }

    pub fn load_sets(&self, fold: usize) -> Result<PoolSets> {
        let path = self.selectors_path(fold);
        if !path.exists() {
            return Err(Self::missing(&path, Stage::FitPool));
        }
        load_json(&path)
    }

    pub fn load_fold_metrics(&self, fold: usize) -> Result<FoldMetrics> {
        let path = self.metrics_path(fold);
        if !path.exists() {
            return Err(Self::missing(&path, Stage::Evaluate));
        }
        load_json(&path)
    }

    // ---- stages -------------------------------------------------------

    /// Generates the cohort and every fold's split assignment.
    pub fn stage_synth(&mut self) -> Result<()> {
        self.time("synth", |p| {
            let mut synth = p.cfg.synth.clone();
            synth.seed = p.synth_seed();
            let ids: Vec<String> = (0..synth.patients).map(|i| format!("p{i:04}")).collect();
            let mut outputs: Vec<PathBuf> = vec![p.cohort_index_path()];
            for id in &ids {
                for m in Modality::ALL {
                    let bag = p.bag_path(id, m);
                    outputs.push(sidecar_path(&bag));
                    outputs.push(bag);
                }
            }
            for fold in 0..p.cfg.folds {
                outputs.push(p.splits_path(fold));
            }
            if p.stage_done(&outputs) {
                return Ok(());
            }
            let cohort = generate_synthetic_cohort(&synth)?;
            let index = CohortIndex {
                num_classes: cohort.num_classes,
                generator_seed: cohort.generator_seed,
                patients: ids
                    .iter()
                    .map(|id| PatientRecord {
                        id: id.clone(),
                        label: cohort.label_of(id).expect("generated patient"),
                    })
                    .collect(),
            };
            save_json(&p.cohort_index_path(), &index)?;
            for bag in &cohort.bags {
                save_matrix(
                    &p.bag_path(&bag.patient_id, bag.modality),
                    &bag.instances,
                    synth.seed,
                    Stage::Synth.as_str(),
                )?;
            }
            for fold in 0..p.cfg.folds {
                let split = make_split(&cohort, &p.cfg, fold)?;
                save_json(&p.splits_path(fold), &split)?;
            }
            p.cohort_cache = Some(cohort);
            let seed = p.synth_seed();
            p.record_all(&outputs, Stage::Synth, seed)
        })
    }

    /// Trains the three bag networks of every fold.
    pub fn stage_train_mil(&mut self) -> Result<()> {
        for fold in 0..self.cfg.folds {
            self.time("train-mil", |p| {
                let outputs: Vec<PathBuf> =
                    Modality::ALL.iter().map(|&m| p.model_path(fold, m)).collect();
                if p.stage_done(&outputs) {
                    return Ok(());
                }
                let split = p.load_split(fold)?;
                let cfg = p.cfg.clone();
                let cohort = p.load_cohort()?;
                let models = train_fold_mils(cohort, &split, &cfg, fold)?;
                for (m, model) in &models {
                    let path = p.model_path(fold, *m);
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::write(&path, serde_json::to_string(model)?)?;
                }
                p.record_all(&outputs, Stage::TrainMil, fold_seed(cfg.master_seed, fold))
            })?;
        }
        Ok(())
    }

    /// Extracts per-modality embedding tables of every fold.
    pub fn stage_extract(&mut self) -> Result<()> {
        for fold in 0..self.cfg.folds {
            self.time("extract", |p| {
                let outputs: Vec<PathBuf> =
                    Modality::ALL.iter().map(|&m| p.embeddings_path(fold, m)).collect();
                if p.stage_done(&outputs) {
                    return Ok(());
                }
                let split = p.load_split(fold)?;
                let models = p.load_models(fold)?;
                let cohort = p.load_cohort()?;
                let tables = extract_fold(cohort, &split, &models)?;
                for (m, table) in &tables {
                    save_embeddings(&p.embeddings_path(fold, *m), table)?;
                }
                let seed = fold_seed(p.cfg.master_seed, fold);
                p.record_all(&outputs, Stage::Extract, seed)
            })?;
        }
        Ok(())
    }

    /// Fits the attribution pool and baselines; persists selectors, the
    /// pool forests, and the attribution dumps.
    pub fn stage_fit_pool(&mut self) -> Result<()> {
        for fold in 0..self.cfg.folds {
            self.time("fit-pool", |p| {
                let mut outputs = vec![p.selectors_path(fold)];
                for m in Modality::ALL {
                    outputs.push(p.pool_forest_path(fold, m));
                    let dir = p.attribution_dir(fold, m);
                    for c in 0..p.cfg.synth.classes {
                        let f = dir.join(format!("class_{c}.csv"));
                        outputs.push(sidecar_path(&f));
                        outputs.push(f);
                    }
                    outputs.push(sidecar_path(&dir.join("scores.csv")));
                    outputs.push(dir.join("scores.csv"));
                    outputs.push(dir.join("meta.json"));
                }
                if p.stage_done(&outputs) {
                    return Ok(());
                }
                let tables = p.load_tables(fold)?;
                let pools = fit_fold_pools(&tables, &p.cfg, fold)?;
                let seed = fold_seed(p.cfg.master_seed, fold);
                save_json(&p.selectors_path(fold), &pools.sets)?;
                for (m, fit) in &pools.shap {
                    let forest_path = p.pool_forest_path(fold, *m);
                    if let Some(parent) = forest_path.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::write(&forest_path, serde_json::to_string(&fit.forest)?)?;
                    let dir = p.attribution_dir(fold, *m);
                    for (c, rows) in fit.summary.per_class.iter().enumerate() {
                        let matrix = rows_to_matrix(rows)?;
                        save_matrix(
                            &dir.join(format!("class_{c}.csv")),
                            &matrix,
                            seed,
                            Stage::FitPool.as_str(),
                        )?;
                    }
                    let scores = rows_to_matrix(&[fit.summary.scores.clone()])?;
                    save_matrix(&dir.join("scores.csv"), &scores, seed, Stage::FitPool.as_str())?;
                    let meta = AttributionMeta {
                        attribution_part: if p.cfg.pool.attribution_on_test {
                            SplitPart::Test
                        } else {
                            SplitPart::Val
                        },
                        phi0: fit.summary.phi0.clone(),
                    };
                    save_json(&dir.join("meta.json"), &meta)?;
                }
                p.record_all(&outputs, Stage::FitPool, seed)
            })?;
        }
        Ok(())
    }

    /// Builds and persists the default trimodal fused features.
    pub fn stage_fuse(&mut self) -> Result<()> {
        for fold in 0..self.cfg.folds {
            self.time("fuse", |p| {
                let outputs: Vec<PathBuf> =
                    SplitPart::ALL.iter().map(|&part| p.fused_path(fold, part)).collect();
                if p.stage_done(&outputs) {
                    return Ok(());
                }
                let tables = p.load_tables(fold)?;
                let sets = p.load_sets(fold)?;
                let shap_set = &sets
                    .iter()
                    .find(|(key, _)| key == "SHAP")
                    .ok_or_else(|| Error::Malformed {
                        path: p.selectors_path(fold).display().to_string(),
                        detail: "no SHAP selector set".into(),
                    })?
                    .1;
                let parts = build_fused_dataset(ModalityCombo::Triple, shap_set, &tables)?;
                let expected = ModalityCombo::Triple.fused_dim(p.cfg.pool.k);
                for (part, ds) in &parts {
                    if ds.x.ncols() != expected {
                        return Err(Error::ShapeMismatch(format!(
                            "fused width {} vs contract {expected}",
                            ds.x.ncols()
                        )));
                    }
                    write_fused_csv(&p.fused_path(fold, *part), ds)?;
                }
                let seed = fold_seed(p.cfg.master_seed, fold);
                p.record_all(&outputs, Stage::Fuse, seed)
            })?;
        }
        Ok(())
    }

    /// Computes every fold's metric set.
    pub fn stage_evaluate(&mut self) -> Result<()> {
        for fold in 0..self.cfg.folds {
            self.time("evaluate", |p| {
                let outputs = vec![p.metrics_path(fold)];
                if p.stage_done(&outputs) {
                    return Ok(());
                }
                // fused artifacts must exist before evaluation
                for part in SplitPart::ALL {
                    let path = p.fused_path(fold, part);
                    if !path.exists() {
                        return Err(Self::missing(&path, Stage::Fuse));
                    }
                }
                let split = p.load_split(fold)?;
                let models = p.load_models(fold)?;
                let tables = p.load_tables(fold)?;
                let sets = p.load_sets(fold)?;
                let cfg = p.cfg.clone();
                let cohort = p.load_cohort()?;
                let metrics =
                    compute_fold_metrics(cohort, &split, &models, &tables, &sets, &cfg, fold)?;
                save_json(&p.metrics_path(fold), &metrics)?;
                p.record_all(&outputs, Stage::Evaluate, fold_seed(cfg.master_seed, fold))
            })?;
        }
        Ok(())
    }

    /// Aggregates fold metrics into the report tables.
    pub fn stage_report(&mut self) -> Result<()> {
        self.time("report", |p| {
            let folds = (0..p.cfg.folds)
                .map(|f| p.load_fold_metrics(f))
                .collect::<Result<Vec<_>>>()?;
            let report = MonteCarloReport { folds };
            let outputs = write_report(&p.out.join("report"), &report, &p.cfg)?;
            let seed = p.cfg.master_seed;
            p.record_all(&outputs, Stage::Report, seed)
        })
    }

    /// Writes the config snapshot (out_dir normalized), manifest, and
    /// timing log.
    pub fn save_state(&mut self) -> Result<()> {
        let mut snapshot = self.cfg.clone();
        snapshot.out_dir = PathBuf::from(".");
        let config_path = self.out.join("config.json");
        snapshot.save(&config_path)?;
        self.manifest.record(&self.out, &config_path, "config", self.cfg.master_seed)?;
        self.manifest.save(&self.out)?;
        save_json(&self.out.join("timings.json"), &self.timings)?;
        Ok(())
    }

    /// Runs a single stage (all folds).
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Synth => self.stage_synth(),
            Stage::TrainMil => self.stage_train_mil(),
            Stage::Extract => self.stage_extract(),
            Stage::FitPool => self.stage_fit_pool(),
            Stage::Fuse => self.stage_fuse(),
            Stage::Evaluate => self.stage_evaluate(),
            Stage::Report => self.stage_report(),
        }
    }

    /// Chains every stage, optionally starting partway through.
    pub fn run_all(&mut self, start: Option<Stage>) -> Result<()> {
        let start = start.unwrap_or(Stage::Synth);
        for stage in Stage::ALL {
            if stage >= start {
                self.run_stage(stage)?;
            }
        }
        self.save_state()
    }
}

fn write_fused_csv(path: &Path, ds: &FusedDataset) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["patient_id".to_string(), "label".to_string()];
    header.extend((0..ds.x.ncols()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (i, id) in ds.patient_ids.iter().enumerate() {
        let mut rec = vec![id.clone(), ds.y[i].to_string()];
        rec.extend(ds.x.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the forest persisted by the pool stage; used by verification.
pub fn load_pool_forest(out: &Path, fold: usize, m: Modality) -> Result<TreeEnsemble> {
    let path = out.join(format!("folds/fold_{fold}/pools/{m}.forest.json"));
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: path.display().to_string(),
            produced_by: Stage::FitPool.as_str().to_string(),
        });
    }
    load_json(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::monte_carlo::test_support::tiny_config;

    #[test]
    fn full_chain_runs_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = dir.path().join("out");
        let mut p = Pipeline::new(cfg.clone()).unwrap();
        p.run_all(None).unwrap();
        let manifest_a = std::fs::read_to_string(RunManifest::path(&p.out)).unwrap();

        // rerun: everything skips, manifest bytes identical
        let mut p2 = Pipeline::new(cfg).unwrap();
        p2.run_all(None).unwrap();
        let manifest_b = std::fs::read_to_string(RunManifest::path(&p2.out)).unwrap();
        assert_eq!(manifest_a, manifest_b);
        // report artifacts exist
        assert!(p2.out.join("report/report.md").exists());
        assert!(p2.out.join("report/ablation_grid.csv").exists());
    }

    #[test]
    fn fuse_without_embeddings_names_extract() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = dir.path().join("out");
        let mut p = Pipeline::new(cfg).unwrap();
        p.stage_synth().unwrap();
        let err = p.stage_fuse().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("extract"), "error was: {msg}");
    }

    #[test]
    fn train_without_cohort_names_synth() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = dir.path().join("out");
        let mut p = Pipeline::new(cfg).unwrap();
        let err = p.stage_train_mil().unwrap_err();
        assert!(err.to_string().contains("synth"));
    }
}
