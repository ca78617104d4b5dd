//! Late fusion and final classification.
//!
//! Pooled per-modality vectors are fused by concatenating the two H&E
//! views and taking the Kronecker product with the IHC view, yielding a
//! fixed 2k^2-length joint feature (2048 at the default k = 32). The
//! module also carries the classifier heads used downstream and the
//! Monte Carlo ablation runner.

pub mod monte_carlo;

pub use monte_carlo::{run_monte_carlo, MonteCarloReport};

use crate::data::io::EmbeddingTable;
use crate::data::{rows_to_matrix, Modality, SplitPart};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, predict_proba, ForestConfig, TreeEnsemble};
use crate::metrics::{evaluate_predictions, Metrics};
use crate::mil::TrainConfig;
use crate::pool::{apply_pool, DimensionSelector};
use crate::seeding::derive_seed;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Concatenation of two equal-length pooled views, first argument first.
pub fn concat(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "concat inputs of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(a.len() * 2);
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    Ok(out)
}

/// Kronecker product: `out[i * b.len() + j] = a[i] * b[j]`.
pub fn kronecker(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::ShapeMismatch("kronecker factors must be nonempty".into()));
    }
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        for &y in b {
            out.push(x * y);
        }
    }
    Ok(out)
}

/// One fused feature set of a split part.
#[derive(Debug, Clone)]
pub struct FusedDataset {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub patient_ids: Vec<String>,
}

/// Which modalities enter the fused representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityCombo {
    Single(Modality),
    Pair(Modality, Modality),
    Triple,
}

impl ModalityCombo {
    /// The seven ablation rows, unimodal to trimodal.
    pub const ALL: [ModalityCombo; 7] = [
        ModalityCombo::Single(Modality::He),
        ModalityCombo::Single(Modality::Ihc),
        ModalityCombo::Single(Modality::RecHe),
        ModalityCombo::Pair(Modality::He, Modality::Ihc),
        ModalityCombo::Pair(Modality::He, Modality::RecHe),
        ModalityCombo::Pair(Modality::Ihc, Modality::RecHe),
        ModalityCombo::Triple,
    ];

    pub fn key(&self) -> String {
        match self {
            ModalityCombo::Single(m) => m.to_string(),
            ModalityCombo::Pair(a, b) => format!("{a}+{b}"),
            ModalityCombo::Triple => "HE+REC_HE+IHC".to_string(),
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        match self {
            ModalityCombo::Single(m) => vec![*m],
            ModalityCombo::Pair(a, b) => vec![*a, *b],
            ModalityCombo::Triple => vec![Modality::He, Modality::RecHe, Modality::Ihc],
        }
    }

    /// Feature width produced by this combo at pooled width k.
    pub fn fused_dim(&self, k: usize) -> usize {
        match self {
            ModalityCombo::Single(_) => k,
            ModalityCombo::Pair(_, _) => k * k,
            ModalityCombo::Triple => 2 * k * k,
        }
    }
}

/// Fuses one patient's pooled views under a combo. The triple fusion is
/// `[f_he, f_rec] (x) f_ihc`, true H&E block first.
pub fn fuse_pooled(
    combo: ModalityCombo,
    pooled: &BTreeMap<Modality, Vec<f64>>,
) -> Result<Vec<f64>> {
    let get = |m: Modality| {
        pooled
            .get(&m)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing pooled view for {m}")))
    };
    let out = match combo {
        ModalityCombo::Single(m) => get(m)?.clone(),
        ModalityCombo::Pair(a, b) => kronecker(get(a)?, get(b)?)?,
        ModalityCombo::Triple => {
            let he_block = concat(get(Modality::He)?, get(Modality::RecHe)?)?;
            kronecker(&he_block, get(Modality::Ihc)?)?
        }
    };
    let k = pooled.values().next().map(|v| v.len()).unwrap_or(0);
    if out.len() != combo.fused_dim(k) {
        return Err(Error::ShapeMismatch(format!(
            "fused width {} vs contract {}",
            out.len(),
            combo.fused_dim(k)
        )));
    }
    Ok(out)
}

/// Builds fused datasets for each split part from per-modality
/// embeddings and selectors. Every patient of a part must carry all
/// modalities of the combo.
pub fn build_fused_dataset(
    combo: ModalityCombo,
    selectors: &BTreeMap<Modality, DimensionSelector>,
    tables: &BTreeMap<Modality, EmbeddingTable>,
) -> Result<BTreeMap<SplitPart, FusedDataset>> {
    let needed = combo.modalities();
    for m in &needed {
        if !selectors.contains_key(m) || !tables.contains_key(m) {
            return Err(Error::ShapeMismatch(format!("missing selector or embeddings for {m}")));
        }
    }
    // index embeddings by (modality, patient)
    let mut index: BTreeMap<(Modality, &str), (&Vec<f64>, usize, SplitPart)> = BTreeMap::new();
    for (m, table) in tables {
        for row in &table.rows {
            index.insert((*m, row.patient_id.as_str()), (&row.z, row.label, row.part));
        }
    }
    let reference = &tables[&needed[0]];
    let mut out: BTreeMap<SplitPart, (Vec<Vec<f64>>, Vec<usize>, Vec<String>)> = BTreeMap::new();
    for row in &reference.rows {
        let mut pooled: BTreeMap<Modality, Vec<f64>> = BTreeMap::new();
        for m in &needed {
            let (z, _, _) = index.get(&(*m, row.patient_id.as_str())).ok_or_else(|| {
                Error::ShapeMismatch(format!("patient {} lacks {m} embeddings", row.patient_id))
            })?;
            pooled.insert(*m, apply_pool(&selectors[m], z)?.values);
        }
        let fused = fuse_pooled(combo, &pooled)?;
        let slot = out.entry(row.part).or_default();
        slot.0.push(fused);
        slot.1.push(row.label);
        slot.2.push(row.patient_id.clone());
    }
    out.into_iter()
        .map(|(part, (rows, y, ids))| {
            Ok((part, FusedDataset { x: rows_to_matrix(&rows)?, y, patient_ids: ids }))
        })
        .collect()
}

/// Classifier heads for fused or pooled features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadKind {
    Forest,
    Mlp,
    Logistic,
    Knn,
    Tree,
}

impl HeadKind {
    pub const COMPARISON: [HeadKind; 5] =
        [HeadKind::Forest, HeadKind::Mlp, HeadKind::Logistic, HeadKind::Knn, HeadKind::Tree];

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Forest => "forest",
            HeadKind::Mlp => "mlp",
            HeadKind::Logistic => "logistic",
            HeadKind::Knn => "knn",
            HeadKind::Tree => "tree",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Settings for the pipeline's final classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalClassifierConfig {
    /// Default head of the fused pipeline; the comparison harness still
    /// trains every [`HeadKind`].
    pub head: HeadKind,
    pub mlp_hidden: usize,
    pub mlp_train: TrainConfig,
    pub forest: ForestConfig,
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for FinalClassifierConfig {
    fn default() -> Self {
        FinalClassifierConfig {
            head: HeadKind::Mlp,
            mlp_hidden: 128,
            mlp_train: TrainConfig::default(),
            forest: ForestConfig::default(),
            knn_k: 5,
            seed: 0,
        }
    }
}

/// A dense softmax network with an optional single hidden ReLU layer
/// (`hidden == 0` gives plain multinomial logistic regression).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseClassifier {
    pub hidden: usize,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn softmax_vec(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

impl DenseClassifier {
    fn init(input: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let mut m = Array2::<f64>::zeros((rows, cols));
            for v in m.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            m
        };
        if hidden == 0 {
            DenseClassifier {
                hidden,
                w1: Array2::zeros((0, 0)),
                b1: Array1::zeros(0),
                w2: glorot(classes, input),
                b2: Array1::zeros(classes),
            }
        } else {
            DenseClassifier {
                hidden,
                w1: glorot(hidden, input),
                b1: Array1::zeros(hidden),
                w2: glorot(classes, hidden),
                b2: Array1::zeros(classes),
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Array1<f64> {
        let xv = ndarray::ArrayView1::from(x);
        let logits = if self.hidden == 0 {
            self.w2.dot(&xv) + &self.b2
        } else {
            let h = (self.w1.dot(&xv) + &self.b1).mapv(|v| v.max(0.0));
            self.w2.dot(&h) + &self.b2
        };
        softmax_vec(&logits)
    }

    fn loss(&self, x: &[f64], label: usize) -> f64 {
        let p = self.forward(x);
        -(p[label].max(1e-300)).ln()
    }

    /// Mean loss over a dataset.
    fn mean_loss(&self, x: ArrayView2<'_, f64>, y: &[usize]) -> f64 {
        let mut acc = 0.0;
        for (row, &label) in x.rows().into_iter().zip(y) {
            acc += self.loss(row.as_slice().expect("contiguous"), label);
        }
        acc / y.len() as f64
    }

    /// Accumulates analytic gradients for one sample; returns its loss.
    fn grads(
        &self,
        x: &[f64],
        label: usize,
        gw1: &mut Array2<f64>,
        gb1: &mut Array1<f64>,
        gw2: &mut Array2<f64>,
        gb2: &mut Array1<f64>,
    ) -> f64 {
        let xv = ndarray::ArrayView1::from(x);
        if self.hidden == 0 {
            let logits = self.w2.dot(&xv) + &self.b2;
            let p = softmax_vec(&logits);
            let loss = -(p[label].max(1e-300)).ln();
            let mut d = p;
            d[label] -= 1.0;
            *gw2 += &d.view().insert_axis(Axis(1)).dot(&xv.insert_axis(Axis(0)));
            *gb2 += &d;
            loss
        } else {
            let pre = self.w1.dot(&xv) + &self.b1;
            let h = pre.mapv(|v| v.max(0.0));
            let logits = self.w2.dot(&h) + &self.b2;
            let p = softmax_vec(&logits);
            let loss = -(p[label].max(1e-300)).ln();
            let mut d = p;
            d[label] -= 1.0;
            *gw2 += &d.view().insert_axis(Axis(1)).dot(&h.view().insert_axis(Axis(0)));
            *gb2 += &d;
            let mut dh = self.w2.t().dot(&d);
            for (g, &pv) in dh.iter_mut().zip(pre.iter()) {
                if pv <= 0.0 {
                    *g = 0.0;
                }
            }
            *gw1 += &dh.view().insert_axis(Axis(1)).dot(&xv.insert_axis(Axis(0)));
            *gb1 += &dh;
            loss
        }
    }
}

struct DenseAdam {
    m: DenseClassifier,
    v: DenseClassifier,
    t: u64,
}

fn zeros_like(c: &DenseClassifier) -> DenseClassifier {
    DenseClassifier {
        hidden: c.hidden,
        w1: Array2::zeros(c.w1.raw_dim()),
        b1: Array1::zeros(c.b1.raw_dim()),
        w2: Array2::zeros(c.w2.raw_dim()),
        b2: Array1::zeros(c.b2.raw_dim()),
    }
}

impl DenseAdam {
    fn new(c: &DenseClassifier) -> Self {
        DenseAdam { m: zeros_like(c), v: zeros_like(c), t: 0 }
    }

    fn step(&mut self, c: &mut DenseClassifier, g: &DenseClassifier, cfg: &TrainConfig) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            let grad = g + cfg.weight_decay * *p;
            *m = B1 * *m + (1.0 - B1) * grad;
            *v = B2 * *v + (1.0 - B2) * grad * grad;
            *p -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        };
        for ((p, g), (m, v)) in c
            .w1
            .iter_mut()
            .zip(g.w1.iter())
            .zip(self.m.w1.iter_mut().zip(self.v.w1.iter_mut()))
        {
            update(p, *g, m, v);
        }
        for ((p, g), (m, v)) in c
            .b1
            .iter_mut()
            .zip(g.b1.iter())
            .zip(self.m.b1.iter_mut().zip(self.v.b1.iter_mut()))
        {
            update(p, *g, m, v);
        }
        for ((p, g), (m, v)) in c
            .w2
            .iter_mut()
            .zip(g.w2.iter())
            .zip(self.m.w2.iter_mut().zip(self.v.w2.iter_mut()))
        {
            update(p, *g, m, v);
        }
        for ((p, g), (m, v)) in c
            .b2
            .iter_mut()
            .zip(g.b2.iter())
            .zip(self.m.b2.iter_mut().zip(self.v.b2.iter_mut()))
        {
            update(p, *g, m, v);
        }
    }
}

/// Trains a dense classifier by per-sample Adam with early stopping on
/// validation loss when a validation set is supplied (training loss
/// otherwise); restores the best snapshot.
pub fn train_dense(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    val: Option<(ArrayView2<'_, f64>, &[usize])>,
    hidden: usize,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<DenseClassifier> {
    cfg.validate()?;
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::ShapeMismatch("training rows vs labels".into()));
    }
    let mut net = DenseClassifier::init(x.ncols(), hidden, classes, derive_seed(cfg.seed, "init", 1));
    let mut adam = DenseAdam::new(&net);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order", 1));
    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut grads = zeros_like(&net);
        let mut in_batch = 0usize;
        for &i in &order {
            let row = x.row(i);
            let loss = net.grads(
                row.as_slice().expect("contiguous"),
                y[i],
                &mut grads.w1,
                &mut grads.b1,
                &mut grads.w2,
                &mut grads.b2,
            );
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")));
            }
            in_batch += 1;
            if in_batch == cfg.batch_size {
                adam.step(&mut net, &grads, cfg);
                grads = zeros_like(&net);
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            adam.step(&mut net, &grads, cfg);
        }
        let monitor = match val {
            Some((vx, vy)) => net.mean_loss(vx, vy),
            None => net.mean_loss(x, y),
        };
        if !monitor.is_finite() {
            return Err(Error::Diverged("non-finite monitored loss".into()));
        }
        if monitor < best_loss - 1e-12 {
            best_loss = monitor;
            best = net.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    Ok(best)
}

/// Finite-difference check of the dense classifier's gradients.
pub fn dense_gradient_check(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    hidden: usize,
    classes: usize,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let net = DenseClassifier::init(x.ncols(), hidden, classes, seed);
    let mut g = zeros_like(&net);
    for (row, &label) in x.rows().into_iter().zip(y) {
        net.grads(
            row.as_slice().expect("contiguous"),
            label,
            &mut g.w1,
            &mut g.b1,
            &mut g.w2,
            &mut g.b2,
        );
    }
    let total_loss = |net: &DenseClassifier| -> f64 {
        x.rows()
            .into_iter()
            .zip(y)
            .map(|(r, &l)| net.loss(r.as_slice().expect("contiguous"), l))
            .sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1);
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        // pick a coordinate in one of the four groups
        let group = rng.random_range(0..4usize);
        let (rows, cols) = match group {
            0 => (net.w1.nrows().max(1), net.w1.ncols().max(1)),
            1 => (net.b1.len().max(1), 1),
            2 => (net.w2.nrows(), net.w2.ncols()),
            _ => (net.b2.len(), 1),
        };
        if (group == 0 || group == 1) && hidden == 0 {
            continue;
        }
        let r = rng.random_range(0..rows);
        let cidx = rng.random_range(0..cols);
        let mut plus = net.clone();
        let mut minus = net.clone();
        let analytic = match group {
            0 => {
                plus.w1[(r, cidx)] += step;
                minus.w1[(r, cidx)] -= step;
                g.w1[(r, cidx)]
            }
            1 => {
                plus.b1[r] += step;
                minus.b1[r] -= step;
                g.b1[r]
            }
            2 => {
                plus.w2[(r, cidx)] += step;
                minus.w2[(r, cidx)] -= step;
                g.w2[(r, cidx)]
            }
            _ => {
                plus.b2[r] += step;
                minus.b2[r] -= step;
                g.b2[r]
            }
        };
        let fd = (total_loss(&plus) - total_loss(&minus)) / (2.0 * step);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// K-nearest-neighbour head with deterministic distance/index ordering.
#[derive(Debug, Clone)]
pub struct KnnHead {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub k: usize,
    pub classes: usize,
}

impl KnnHead {
    pub fn predict_proba(&self, probe: &[f64]) -> Vec<f64> {
        let mut dist: Vec<(f64, usize)> = self
            .x
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let d: f64 = row.iter().zip(probe).map(|(a, b)| (a - b).powi(2)).sum();
                (d, i)
            })
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        let k = self.k.min(dist.len());
        let mut votes = vec![0.0f64; self.classes];
        for &(_, i) in dist.iter().take(k) {
            votes[self.y[i]] += 1.0;
        }
        for v in votes.iter_mut() {
            *v /= k as f64;
        }
        votes
    }
}

/// A trained head of any kind.
#[derive(Debug, Clone)]
pub enum TrainedHead {
    Forest(TreeEnsemble),
    Dense(DenseClassifier),
    Knn(KnnHead),
}

impl TrainedHead {
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            TrainedHead::Forest(ens) => predict_proba(ens, x),
            TrainedHead::Dense(net) => Ok(net.forward(x).to_vec()),
            TrainedHead::Knn(knn) => Ok(knn.predict_proba(x)),
        }
    }
}

/// Trains the requested head on a feature matrix. Dense heads use the
/// validation part for early stopping when present.
pub fn train_final(
    kind: HeadKind,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    val: Option<(ArrayView2<'_, f64>, &[usize])>,
    classes: usize,
    cfg: &FinalClassifierConfig,
    seed: u64,
) -> Result<TrainedHead> {
    match kind {
        HeadKind::Forest => {
            let fc = ForestConfig { seed: derive_seed(seed, "head-forest", 0), ..cfg.forest.clone() };
            Ok(TrainedHead::Forest(fit_forest(x, y, classes, &fc)?))
        }
        HeadKind::Tree => {
            let fc = ForestConfig {
                n_trees: 1,
                bootstrap: false,
                features_per_split: Some(x.ncols()),
                seed: derive_seed(seed, "head-tree", 0),
                ..cfg.forest.clone()
            };
            Ok(TrainedHead::Forest(fit_forest(x, y, classes, &fc)?))
        }
        HeadKind::Mlp => {
            let tc = TrainConfig { seed: derive_seed(seed, "head-mlp", 0), ..cfg.mlp_train.clone() };
            Ok(TrainedHead::Dense(train_dense(x, y, val, cfg.mlp_hidden, classes, &tc)?))
        }
        HeadKind::Logistic => {
            let tc =
                TrainConfig { seed: derive_seed(seed, "head-logistic", 0), ..cfg.mlp_train.clone() };
            Ok(TrainedHead::Dense(train_dense(x, y, val, 0, classes, &tc)?))
        }
        HeadKind::Knn => Ok(TrainedHead::Knn(KnnHead {
            x: x.to_owned(),
            y: y.to_vec(),
            k: cfg.knn_k,
            classes,
        })),
    }
}

/// Evaluates a trained head on a feature matrix.
pub fn evaluate(head: &TrainedHead, x: ArrayView2<'_, f64>, y: &[usize], classes: usize) -> Result<Metrics> {
    let scores: Vec<Vec<f64>> = x
        .rows()
        .into_iter()
        .map(|r| head.predict_proba(r.as_slice().expect("contiguous")))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(y, &scores, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn concat_keeps_order_and_norm() {
        let mut a = vec![0.0; 32];
        a[0] = 1.0;
        let mut b = vec![0.0; 32];
        b[31] = 1.0;
        let joined = concat(&a, &b).unwrap();
        assert_eq!(joined.len(), 64);
        assert_eq!(joined[0], 1.0);
        assert_eq!(joined[63], 1.0);
        assert_eq!(joined.iter().filter(|&&v| v != 0.0).count(), 2);
        // slicing recovers inputs
        assert_eq!(&joined[..32], &a[..]);
        assert_eq!(&joined[32..], &b[..]);
        // orthogonal blocks: squared norms add
        let n2: f64 = joined.iter().map(|v| v * v).sum();
        let na: f64 = a.iter().map(|v| v * v).sum();
        let nb: f64 = b.iter().map(|v| v * v).sum();
        assert!((n2 - na - nb).abs() < 1e-12);
        assert!(concat(&a, &b[..31]).is_err());
    }

    #[test]
    fn kronecker_matches_double_loop_and_norms_multiply() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let b: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let k = kronecker(&a, &b).unwrap();
        assert_eq!(k.len(), 2048);
        for i in 0..64 {
            for j in 0..32 {
                assert!((k[i * 32 + j] - a[i] * b[j]).abs() < 1e-12);
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&k) - norm(&a) * norm(&b)).abs() < 1e-9);
    }

    #[test]
    fn kronecker_one_hot_places_b_block() {
        let mut a = vec![0.0; 4];
        a[0] = 1.0;
        let b = vec![1.0, 2.0, 3.0];
        let k = kronecker(&a, &b).unwrap();
        assert_eq!(&k[..3], &[1.0, 2.0, 3.0]);
        assert!(k[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kronecker_is_bilinear() {
        let a1 = vec![1.0, -2.0, 0.5];
        let a2 = vec![0.25, 1.5, -1.0];
        let b = vec![2.0, -3.0];
        let alpha = 1.75;
        let scaled_a: Vec<f64> = a1.iter().map(|v| alpha * v).collect();
        let lhs = kronecker(&scaled_a, &b).unwrap();
        let rhs: Vec<f64> = kronecker(&a1, &b).unwrap().iter().map(|v| alpha * v).collect();
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-12);
        }
        let sum_a: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let lhs2 = kronecker(&sum_a, &b).unwrap();
        let k1 = kronecker(&a1, &b).unwrap();
        let k2 = kronecker(&a2, &b).unwrap();
        for i in 0..lhs2.len() {
            assert!((lhs2[i] - k1[i] - k2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_ihc_vector_zeroes_the_fusion() {
        let mut pooled = BTreeMap::new();
        pooled.insert(Modality::He, vec![1.0, 2.0]);
        pooled.insert(Modality::RecHe, vec![3.0, 4.0]);
        pooled.insert(Modality::Ihc, vec![0.0, 0.0]);
        let f = fuse_pooled(ModalityCombo::Triple, &pooled).unwrap();
        assert_eq!(f.len(), 8);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_classifier_gradients_check_out() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = Array2::<f64>::zeros((12, 10));
        for v in x.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let rel = dense_gradient_check(x.view(), &y, 8, 3, 150, 1e-5, 3).unwrap();
        assert!(rel <= 1e-4, "mlp rel err {rel}");
        let rel0 = dense_gradient_check(x.view(), &y, 0, 3, 100, 1e-5, 4).unwrap();
        assert!(rel0 <= 1e-4, "logistic rel err {rel0}");
    }

    #[test]
    fn separable_data_reaches_perfect_metrics() {
        let x = array![
            [-2.0, -2.0],
            [-1.8, -2.2],
            [-2.2, -1.9],
            [-2.1, -2.1],
            [2.0, 2.0],
            [1.8, 2.2],
            [2.2, 1.9],
            [2.1, 2.1],
        ];
        let y = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let cfg = FinalClassifierConfig {
            mlp_train: TrainConfig { learning_rate: 5e-3, ..Default::default() },
            ..Default::default()
        };
        for kind in [HeadKind::Forest, HeadKind::Mlp, HeadKind::Logistic, HeadKind::Knn] {
            let head = train_final(kind, x.view(), &y, None, 2, &cfg, 1).unwrap();
            let m = evaluate(&head, x.view(), &y, 2).unwrap();
            assert_eq!(m.accuracy, 1.0, "head {kind}");
            assert_eq!(m.auc, Some(1.0), "head {kind}");
        }
    }

    #[test]
    fn dense_training_is_deterministic() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Array2::<f64>::zeros((20, 6));
        for v in x.iter_mut() {
            *v = rng.random::<f64>();
        }
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let cfg = TrainConfig { max_epochs: 10, seed: 5, ..Default::default() };
        let a = train_dense(x.view(), &y, None, 4, 2, &cfg).unwrap();
        let b = train_dense(x.view(), &y, None, 4, 2, &cfg).unwrap();
        assert_eq!(a.w2, b.w2);
    }
}
