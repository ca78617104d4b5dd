//! Synthetic multimodal cohorts, stratified splitting, and dataset I/O.
//!
//! A cohort is a set of patients, each carrying one bag per modality
//! (H&E, IHC, and a reconstructed H&E stand-in produced by a fixed
//! random linear mixing of the paired bags). Class signal is planted so
//! that no single modality separates all classes while the union does.

pub mod io;

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, hash_str};
use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Image-derived modalities of one patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    He,
    Ihc,
    RecHe,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::He, Modality::Ihc, Modality::RecHe];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::He => "HE",
            Modality::Ihc => "IHC",
            Modality::RecHe => "REC_HE",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Modality::He => 0,
            Modality::Ihc => 1,
            Modality::RecHe => 2,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled bag of instance feature vectors (rows of `instances`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bag {
    /// K x d_in instance matrix; row k is instance k.
    pub instances: Array2<f64>,
    pub label: usize,
    pub modality: Modality,
    pub patient_id: String,
}

impl Bag {
    pub fn new(
        instances: Array2<f64>,
        label: usize,
        modality: Modality,
        patient_id: impl Into<String>,
    ) -> Result<Self> {
        if instances.nrows() == 0 {
            return Err(Error::Degenerate("bag must contain at least one instance".into()));
        }
        if instances.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bag instance features".into()));
        }
        Ok(Bag { instances, label, modality, patient_id: patient_id.into() })
    }

    pub fn num_instances(&self) -> usize {
        self.instances.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.instances.ncols()
    }

    pub fn instance(&self, k: usize) -> ArrayView1<'_, f64> {
        self.instances.row(k)
    }
}

/// A full multimodal cohort grouped by patient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohort {
    pub bags: Vec<Bag>,
    pub num_classes: usize,
    pub generator_seed: u64,
}

impl Cohort {
    /// Sorted list of distinct patient ids.
    pub fn patient_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.bags.iter().map(|b| b.patient_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn bag(&self, patient_id: &str, modality: Modality) -> Option<&Bag> {
        self.bags
            .iter()
            .find(|b| b.patient_id == patient_id && b.modality == modality)
    }

    pub fn label_of(&self, patient_id: &str) -> Option<usize> {
        self.bags.iter().find(|b| b.patient_id == patient_id).map(|b| b.label)
    }

    /// Modalities present in the cohort, sorted.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut ms: Vec<Modality> = self.bags.iter().map(|b| b.modality).collect();
        ms.sort();
        ms.dedup();
        ms
    }

    /// Checks pairing and labeling invariants: every patient carries one
    /// bag per present modality, all bags of a patient share one label,
    /// labels are below `num_classes`, and instance dims agree.
    pub fn validate(&self) -> Result<()> {
        let modalities = self.modalities();
        let dim = self.bags.first().map(|b| b.feature_dim()).unwrap_or(0);
        let mut per_patient: BTreeMap<&str, Vec<&Bag>> = BTreeMap::new();
        for b in &self.bags {
            if b.label >= self.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "label {} out of range for {} classes",
                    b.label, self.num_classes
                )));
            }
            if b.feature_dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "bag {}:{} has feature dim {}, expected {}",
                    b.patient_id,
                    b.modality,
                    b.feature_dim(),
                    dim
                )));
            }
            per_patient.entry(&b.patient_id).or_default().push(b);
        }
        for (pid, bags) in &per_patient {
            let mut seen: Vec<Modality> = bags.iter().map(|b| b.modality).collect();
            seen.sort();
            seen.dedup();
            if seen != modalities || bags.len() != modalities.len() {
                return Err(Error::InvalidConfig(format!(
                    "patient {pid} does not carry exactly one bag per modality"
                )));
            }
            if bags.iter().any(|b| b.label != bags[0].label) {
                return Err(Error::InvalidConfig(format!(
                    "patient {pid} has inconsistent labels across modalities"
                )));
            }
        }
        Ok(())
    }
}

/// Train/validation/test membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Val, SplitPart::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Patient-level split assignment; all modalities of a patient share it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub parts: BTreeMap<String, SplitPart>,
}

impl SplitAssignment {
    pub fn part(&self, patient_id: &str) -> Option<SplitPart> {
        self.parts.get(patient_id).copied()
    }

    pub fn patients_in(&self, part: SplitPart) -> Vec<String> {
        self.parts
            .iter()
            .filter(|(_, p)| **p == part)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn count(&self, part: SplitPart) -> usize {
        self.parts.values().filter(|p| **p == part).count()
    }
}

/// Fixed random linear mixing that stands in for a learned stain
/// translator: `rec = w_he * (M_he he) + w_ihc * (M_ihc ihc) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecMixConfig {
    pub he_weight: f64,
    pub ihc_weight: f64,
    /// When true, the mixing matrices are fixed random projections
    /// (Gaussian / sqrt(d)); when false they are identity.
    pub random_projection: bool,
    pub noise_sigma: f64,
}

impl Default for RecMixConfig {
    fn default() -> Self {
        RecMixConfig {
            he_weight: 0.60,
            ihc_weight: 0.60,
            random_projection: true,
            noise_sigma: 1.05,
        }
    }
}

impl RecMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.he_weight.is_finite() || !self.ihc_weight.is_finite() {
            return Err(Error::InvalidConfig("rec mixing weights must be finite".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("rec noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Synthetic cohort generator settings.
///
/// Class signal is planted on two orthogonal sign patterns per modality:
/// a strong pattern keyed to the coarse class bit and a weak pattern
/// keyed to the fine class bit, so each modality alone resolves classes
/// only partially while the union resolves them fully.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub patients: usize,
    pub classes: usize,
    pub d_in: usize,
    pub mean_bag_size: usize,
    pub bag_dispersion: usize,
    /// Dimensions carrying H&E class signal.
    pub s_he: Vec<usize>,
    /// Dimensions carrying IHC class signal; disjoint from `s_he`.
    pub s_ihc: Vec<usize>,
    pub noise_sigma: f64,
    pub strong_amplitude: f64,
    pub weak_amplitude: f64,
    /// Fraction of instances per bag that carry the class signal.
    pub signal_fraction: f64,
    pub rec: RecMixConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients: 240,
            classes: 4,
            d_in: 64,
            mean_bag_size: 10,
            bag_dispersion: 3,
            s_he: (0..8).collect(),
            s_ihc: (8..16).collect(),
            noise_sigma: 1.0,
            strong_amplitude: 1.0,
            weak_amplitude: 0.30,
            signal_fraction: 0.6,
            rec: RecMixConfig::default(),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.patients < self.classes {
            return Err(Error::InvalidConfig(
                "need at least one patient per class (some class would be empty)".into(),
            ));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::InvalidConfig("noise sigma must be > 0".into()));
        }
        if self.s_he.is_empty() || self.s_ihc.is_empty() {
            return Err(Error::InvalidConfig("signal dimension sets must be nonempty".into()));
        }
        if self.s_he.iter().any(|d| self.s_ihc.contains(d)) {
            return Err(Error::InvalidConfig(
                "signal dimension sets s_he and s_ihc must be disjoint".into(),
            ));
        }
        if self.s_he.iter().chain(&self.s_ihc).any(|&d| d >= self.d_in) {
            return Err(Error::InvalidConfig("signal dimension index out of range".into()));
        }
        if self.mean_bag_size < 1 {
            return Err(Error::InvalidConfig("mean bag size must be >= 1".into()));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(Error::InvalidConfig("signal fraction must lie in (0, 1]".into()));
        }
        self.rec.validate()
    }

    /// The two class bits: the coarse bit separates the class halves,
    /// the fine bit separates within halves. H&E encodes the coarse bit
    /// strongly and the fine bit weakly; IHC the reverse. Neither stain
    /// alone resolves all classes well, their union does.
    fn modality_bits(&self, modality: Modality, label: usize) -> (f64, f64) {
        let coarse = if label * 2 >= self.classes { 1.0 } else { -1.0 };
        let fine = if label % 2 == 1 { 1.0 } else { -1.0 };
        match modality {
            Modality::He => (coarse, fine),
            Modality::Ihc => (fine, coarse),
            Modality::RecHe => (coarse, fine),
        }
    }

    /// Orthogonal sign patterns over a signal dimension block: the
    /// strong pattern is all +1, the weak one flips sign halfway.
    fn patterns(block: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let n = block.len();
        let strong = vec![1.0; n];
        let weak: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
        (strong, weak)
    }
}

fn sample_bag_size(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
    let lo = cfg.mean_bag_size.saturating_sub(cfg.bag_dispersion).max(1);
    let hi = cfg.mean_bag_size + cfg.bag_dispersion;
    rng.random_range(lo..=hi)
}

fn generate_stain_bag(
    cfg: &SynthConfig,
    modality: Modality,
    patient_idx: usize,
    patient_id: &str,
    label: usize,
) -> Result<Bag> {
    let block = match modality {
        Modality::He => &cfg.s_he,
        Modality::Ihc => &cfg.s_ihc,
        Modality::RecHe => {
            return Err(Error::InvalidConfig(
                "reconstructed modality is produced by the mixing simulator".into(),
            ))
        }
    };
    let (strong_pat, weak_pat) = SynthConfig::patterns(block);
    let (strong_bit, weak_bit) = cfg.modality_bits(modality, label);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        modality.as_str(),
        patient_idx as u64,
    ));
    let k = sample_bag_size(cfg, &mut rng);
    let mut x = Array2::<f64>::zeros((k, cfg.d_in));
    let mut signal_flags: Vec<bool> = (0..k).map(|_| rng.random::<f64>() < cfg.signal_fraction).collect();
    if !signal_flags.iter().any(|&s| s) {
        signal_flags[0] = true; // every bag carries at least one signal instance
    }
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v = cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        if signal_flags[i] {
            for (j, &dim) in block.iter().enumerate() {
                row[dim] += cfg.strong_amplitude * strong_bit * strong_pat[j]
                    + cfg.weak_amplitude * weak_bit * weak_pat[j];
            }
        }
    }
    Bag::new(x, label, modality, patient_id)
}

/// Builds the reconstructed-H&E bag for a patient from its paired bags.
///
/// The mixing matrices are a pure function of `seed` (fixed across the
/// whole cohort); per-instance noise is keyed by patient so the output
/// is deterministic per call.
pub fn simulate_reconstructed_modality(
    bag_he: &Bag,
    bag_ihc: &Bag,
    cfg: &RecMixConfig,
    seed: u64,
) -> Result<Bag> {
    if bag_he.patient_id != bag_ihc.patient_id {
        return Err(Error::InvalidConfig(format!(
            "modality pair mismatch: {} vs {}",
            bag_he.patient_id, bag_ihc.patient_id
        )));
    }
    if bag_he.label != bag_ihc.label {
        return Err(Error::InvalidConfig(format!(
            "label mismatch for patient {}",
            bag_he.patient_id
        )));
    }
    if bag_he.feature_dim() != bag_ihc.feature_dim() {
        return Err(Error::ShapeMismatch("paired bags must share feature dim".into()));
    }
    cfg.validate()?;
    let d = bag_he.feature_dim();
    let (m_he, m_ihc) = mixing_matrices(cfg, d, seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        "rec-noise",
        hash_str(&bag_he.patient_id),
    ));
    let k_he = bag_he.num_instances();
    let k_ihc = bag_ihc.num_instances();
    let mut out = Array2::<f64>::zeros((k_he, d));
    for j in 0..k_he {
        let he = bag_he.instance(j);
        let ihc = bag_ihc.instance(j % k_ihc);
        let mixed_he = m_he.dot(&he);
        let mixed_ihc = m_ihc.dot(&ihc);
        let mut row = out.row_mut(j);
        for i in 0..d {
            let noise = cfg.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
            row[i] = cfg.he_weight * mixed_he[i] + cfg.ihc_weight * mixed_ihc[i] + noise;
        }
    }
    Bag::new(out, bag_he.label, Modality::RecHe, bag_he.patient_id.clone())
}

fn mixing_matrices(cfg: &RecMixConfig, d: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    if !cfg.random_projection {
        return (Array2::eye(d), Array2::eye(d));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rec-mix", 0));
    let scale = 1.0 / (d as f64).sqrt();
    let gen = |rng: &mut ChaCha8Rng| {
        let mut m = Array2::<f64>::zeros((d, d));
        for v in m.iter_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        m
    };
    let m_he = gen(&mut rng);
    let m_ihc = gen(&mut rng);
    (m_he, m_ihc)
}

/// Generates the full three-modality cohort from `config`.
pub fn generate_synthetic_cohort(config: &SynthConfig) -> Result<Cohort> {
    config.validate()?;
    let mut bags = Vec::with_capacity(config.patients * 3);
    let rec_seed = derive_seed(config.seed, "rec", 0);
    for p in 0..config.patients {
        let label = p % config.classes;
        let pid = format!("p{p:04}");
        let he = generate_stain_bag(config, Modality::He, p, &pid, label)?;
        let ihc = generate_stain_bag(config, Modality::Ihc, p, &pid, label)?;
        let rec = simulate_reconstructed_modality(&he, &ihc, &config.rec, rec_seed)?;
        bags.push(he);
        bags.push(ihc);
        bags.push(rec);
    }
    let cohort = Cohort { bags, num_classes: config.classes, generator_seed: config.seed };
    cohort.validate()?;
    Ok(cohort)
}

/// Class-stratified assignment of item indices to parts.
///
/// Per class the allocation is floor(n_c * ratio) with leftovers handed
/// to the part with the largest global deficit, so per-class and global
/// counts both stay within one item of the configured ratios.
pub fn stratify_indices(
    labels: &[usize],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<SplitPart>> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidConfig("split ratios must be nonnegative".into()));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig("split ratios must sum to 1".into()));
    }
    let n = labels.len();
    let num_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut allocated = [0usize; 3];
    let mut out = vec![SplitPart::Train; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in by_class.iter_mut() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n_c = members.len();
        let mut base: Vec<usize> = r.iter().map(|v| (v * n_c as f64).floor() as usize).collect();
        let leftover = n_c - base.iter().sum::<usize>();
        if leftover > 0 {
            // hand leftovers to the parts with the largest fractional
            // remainder; ties go to the globally most under-served part
            let total_allocated: usize = allocated.iter().sum();
            let mut order: Vec<usize> = (0..3).filter(|&p| r[p] > 0.0).collect();
            order.sort_by(|&a, &b| {
                let rem =
                    |p: usize| r[p] * n_c as f64 - (r[p] * n_c as f64).floor();
                let imbalance =
                    |p: usize| allocated[p] as f64 - total_allocated as f64 * r[p];
                rem(b)
                    .partial_cmp(&rem(a))
                    .unwrap()
                    .then(imbalance(a).partial_cmp(&imbalance(b)).unwrap())
                    .then(a.cmp(&b))
            });
            for &p in order.iter().take(leftover) {
                base[p] += 1;
            }
        }
        let mut cursor = 0usize;
        for (p, &count) in base.iter().enumerate() {
            for _ in 0..count {
                out[members[cursor]] = SplitPart::ALL[p];
                cursor += 1;
            }
            allocated[p] += count;
        }
    }
    Ok(out)
}

/// Patient-level, class-stratified split of a cohort.
pub fn stratified_split(
    cohort: &Cohort,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let ids = cohort.patient_ids();
    let labels: Vec<usize> = ids
        .iter()
        .map(|id| cohort.label_of(id).expect("patient id from cohort"))
        .collect();
    let mut class_counts = vec![0usize; cohort.num_classes];
    for &c in &labels {
        class_counts[c] += 1;
    }
    if let Some(c) = class_counts.iter().position(|&n| n < 3) {
        return Err(Error::Degenerate(format!(
            "class {c} has {} patients; stratified splitting needs at least 3 per class",
            class_counts[c]
        )));
    }
    let parts = stratify_indices(&labels, ratios, seed)?;
    let map: BTreeMap<String, SplitPart> =
        ids.into_iter().zip(parts.into_iter()).collect();
    Ok(SplitAssignment { parts: map })
}

/// Per-patient mean of the true signal dimensions, concatenated across
/// the given stains. This is the generator's own view of the class
/// signal, used as a reference ceiling for learned pipelines.
pub fn oracle_pooled_features(
    cohort: &Cohort,
    config: &SynthConfig,
    modalities: &[Modality],
) -> (Array2<f64>, Vec<usize>, Vec<String>) {
    let ids = cohort.patient_ids();
    let blocks: Vec<&Vec<usize>> = modalities
        .iter()
        .map(|m| match m {
            Modality::He => &config.s_he,
            Modality::Ihc => &config.s_ihc,
            Modality::RecHe => &config.s_he, // rec has no native block; reuse HE's size
        })
        .collect();
    let width: usize = blocks.iter().map(|b| b.len()).sum();
    let mut x = Array2::<f64>::zeros((ids.len(), width));
    let mut y = Vec::with_capacity(ids.len());
    for (row, id) in ids.iter().enumerate() {
        let mut col = 0usize;
        for (m, block) in modalities.iter().zip(&blocks) {
            let bag = cohort.bag(id, *m).expect("validated cohort");
            let k = bag.num_instances() as f64;
            for &dim in block.iter() {
                let mean = bag.instances.column(dim).sum() / k;
                x[(row, col)] = mean;
                col += 1;
            }
        }
        y.push(cohort.label_of(id).expect("validated cohort"));
    }
    (x, y, ids)
}

/// Convenience: bags of one modality restricted to a split part, sorted
/// by patient id.
pub fn bags_in_part<'a>(
    cohort: &'a Cohort,
    split: &SplitAssignment,
    modality: Modality,
    part: SplitPart,
) -> Vec<&'a Bag> {
    let mut bags: Vec<&Bag> = cohort
        .bags
        .iter()
        .filter(|b| b.modality == modality && split.part(&b.patient_id) == Some(part))
        .collect();
    bags.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    bags
}

#[allow(unused)]
fn label_prior(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &c in labels {
        counts[c] += 1;
    }
    counts.iter().map(|&c| c as f64 / labels.len() as f64).collect()
}

/// Stacks per-row vectors into a matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::Degenerate("cannot build a matrix from zero rows".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch("ragged rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Extracts an owned Vec from a 1-d view.
pub fn to_vec(v: ArrayView1<'_, f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[allow(unused)]
pub fn array1(v: &[f64]) -> Array1<f64> {
    Array1::from_vec(v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig { patients: 24, mean_bag_size: 4, bag_dispersion: 1, ..SynthConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { patients: 200, seed: 7, ..small_cfg() };
        let a = generate_synthetic_cohort(&cfg).unwrap();
        let b = generate_synthetic_cohort(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn overlapping_signal_sets_rejected() {
        let cfg = SynthConfig { s_ihc: (0..8).collect(), ..small_cfg() };
        assert!(matches!(generate_synthetic_cohort(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..small_cfg() };
        assert!(generate_synthetic_cohort(&cfg).is_err());
        let cfg = SynthConfig { patients: 1, ..small_cfg() };
        assert!(generate_synthetic_cohort(&cfg).is_err());
    }

    #[test]
    fn cohort_pairing_invariant_holds() {
        let cohort = generate_synthetic_cohort(&small_cfg()).unwrap();
        cohort.validate().unwrap();
        let ids = cohort.patient_ids();
        assert_eq!(ids.len(), 24);
        for id in &ids {
            for m in Modality::ALL {
                assert!(cohort.bag(id, m).is_some());
            }
        }
    }

    #[test]
    fn rec_identity_mixing_reproduces_he() {
        let cfg = small_cfg();
        let cohort = generate_synthetic_cohort(&cfg).unwrap();
        let he = cohort.bag("p0000", Modality::He).unwrap();
        let ihc = cohort.bag("p0000", Modality::Ihc).unwrap();
        let rec_cfg = RecMixConfig {
            he_weight: 1.0,
            ihc_weight: 0.0,
            random_projection: false,
            noise_sigma: 0.0,
        };
        let rec = simulate_reconstructed_modality(he, ihc, &rec_cfg, 9).unwrap();
        assert_eq!(rec.instances, he.instances);
        assert_eq!(rec.modality, Modality::RecHe);
    }

    #[test]
    fn rec_is_deterministic_and_checks_patient() {
        let cfg = small_cfg();
        let cohort = generate_synthetic_cohort(&cfg).unwrap();
        let he = cohort.bag("p0001", Modality::He).unwrap();
        let ihc = cohort.bag("p0001", Modality::Ihc).unwrap();
        let a = simulate_reconstructed_modality(he, ihc, &cfg.rec, 3).unwrap();
        let b = simulate_reconstructed_modality(he, ihc, &cfg.rec, 3).unwrap();
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.num_instances(), he.num_instances());

        let other = cohort.bag("p0002", Modality::Ihc).unwrap();
        assert!(simulate_reconstructed_modality(he, other, &cfg.rec, 3).is_err());
    }

    #[test]
    fn split_is_stratified_80_10_10() {
        let cfg = SynthConfig { patients: 100, ..small_cfg() };
        let cohort = generate_synthetic_cohort(&cfg).unwrap();
        let split = stratified_split(&cohort, (0.8, 0.1, 0.1), 11).unwrap();
        assert_eq!(split.count(SplitPart::Train), 80);
        assert_eq!(split.count(SplitPart::Val), 10);
        assert_eq!(split.count(SplitPart::Test), 10);
        // per-class share of each part within 1/|part| of the prior
        for part in SplitPart::ALL {
            let members = split.patients_in(part);
            let total = members.len() as f64;
            for c in 0..cfg.classes {
                let in_class = members
                    .iter()
                    .filter(|id| cohort.label_of(id) == Some(c))
                    .count() as f64;
                assert!(
                    (in_class / total - 0.25).abs() <= 1.0 / total + 1e-12,
                    "part {part} class {c}: {in_class}/{total}"
                );
            }
        }
    }

    #[test]
    fn degenerate_ratios_put_everyone_in_train() {
        let cohort = generate_synthetic_cohort(&small_cfg()).unwrap();
        let split = stratified_split(&cohort, (1.0, 0.0, 0.0), 5).unwrap();
        assert_eq!(split.count(SplitPart::Train), 24);
    }

    #[test]
    fn different_seeds_move_patients_but_not_sizes() {
        let cfg = SynthConfig { patients: 60, ..small_cfg() };
        let cohort = generate_synthetic_cohort(&cfg).unwrap();
        let a = stratified_split(&cohort, (0.8, 0.1, 0.1), 1).unwrap();
        let b = stratified_split(&cohort, (0.8, 0.1, 0.1), 2).unwrap();
        for part in SplitPart::ALL {
            assert_eq!(a.count(part), b.count(part));
        }
        assert_ne!(a.parts, b.parts);
    }

    #[test]
    fn too_few_patients_per_class_rejected() {
        let cfg = SynthConfig { patients: 6, classes: 3, ..small_cfg() };
        let cohort = generate_synthetic_cohort(&cfg).unwrap();
        let err = stratified_split(&cohort, (0.8, 0.1, 0.1), 1).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }
}
