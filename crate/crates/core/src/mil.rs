//! Gated-attention multiple-instance network.
//!
//! Instances are compressed by a fully-connected ReLU layer, aggregated
//! into a bag embedding by gated attention (tanh and sigmoid gates
//! combined per instance, softmax over the bag), and classified by a
//! linear head. Training is per-bag Adam with explicit backpropagation;
//! the penultimate activation z is the bag-level representation handed
//! to downstream pooling.

use crate::data::io::{EmbeddingRow, EmbeddingTable};
use crate::data::{Bag, Cohort, Modality, SplitAssignment};
use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Layer sizes of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilDims {
    pub d_in: usize,
    pub d_h: usize,
    pub d_a: usize,
    pub classes: usize,
}

impl MilDims {
    pub fn new(d_in: usize, classes: usize) -> Self {
        MilDims { d_in, d_h: 512, d_a: 128, classes }
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilParams {
    pub dims: MilDims,
    /// d_h x d_in compression weights.
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    /// d_a x d_h tanh-gate weights.
    pub v: Array2<f64>,
    /// d_a x d_h sigmoid-gate weights.
    pub u: Array2<f64>,
    /// length d_a attention projection.
    pub w_atten: Array1<f64>,
    /// classes x d_h classifier head.
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Array2::<f64>::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    m
}

impl MilParams {
    /// Seed-controlled uniform Glorot initialization; biases start at zero.
    pub fn init(dims: MilDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_fc = glorot(&mut rng, dims.d_h, dims.d_in);
        let v = glorot(&mut rng, dims.d_a, dims.d_h);
        let u = glorot(&mut rng, dims.d_a, dims.d_h);
        let w_atten_m = glorot(&mut rng, 1, dims.d_a);
        let w_cls = glorot(&mut rng, dims.classes, dims.d_h);
        MilParams {
            dims,
            w_fc,
            b_fc: Array1::zeros(dims.d_h),
            v,
            u,
            w_atten: w_atten_m.row(0).to_owned(),
            w_cls,
            b_cls: Array1::zeros(dims.classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MilParams {
            dims: self.dims,
            w_fc: Array2::zeros(self.w_fc.raw_dim()),
            b_fc: Array1::zeros(self.b_fc.raw_dim()),
            v: Array2::zeros(self.v.raw_dim()),
            u: Array2::zeros(self.u.raw_dim()),
            w_atten: Array1::zeros(self.w_atten.raw_dim()),
            w_cls: Array2::zeros(self.w_cls.raw_dim()),
            b_cls: Array1::zeros(self.b_cls.raw_dim()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let ok = self.w_fc.dim() == (d.d_h, d.d_in)
            && self.b_fc.len() == d.d_h
            && self.v.dim() == (d.d_a, d.d_h)
            && self.u.dim() == (d.d_a, d.d_h)
            && self.w_atten.len() == d.d_a
            && self.w_cls.dim() == (d.classes, d.d_h)
            && self.b_cls.len() == d.classes;
        if !ok {
            return Err(Error::ShapeMismatch("network parameter shapes".into()));
        }
        if self.iter_groups().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    /// Parameter groups in a fixed order, as flat slices.
    pub fn iter_groups(&self) -> impl Iterator<Item = (&'static str, &[f64])> {
        [
            ("w_fc", self.w_fc.as_slice().expect("standard layout")),
            ("b_fc", self.b_fc.as_slice().expect("standard layout")),
            ("v", self.v.as_slice().expect("standard layout")),
            ("u", self.u.as_slice().expect("standard layout")),
            ("w_atten", self.w_atten.as_slice().expect("standard layout")),
            ("w_cls", self.w_cls.as_slice().expect("standard layout")),
            ("b_cls", self.b_cls.as_slice().expect("standard layout")),
        ]
        .into_iter()
    }

    fn group_mut(&mut self, g: usize) -> &mut [f64] {
        match g {
            0 => self.w_fc.as_slice_mut(),
            1 => self.b_fc.as_slice_mut(),
            2 => self.v.as_slice_mut(),
            3 => self.u.as_slice_mut(),
            4 => self.w_atten.as_slice_mut(),
            5 => self.w_cls.as_slice_mut(),
            6 => self.b_cls.as_slice_mut(),
            _ => unreachable!(),
        }
        .expect("standard layout")
    }

    pub const GROUPS: usize = 7;

    pub fn flat_len(&self) -> usize {
        self.iter_groups().map(|(_, g)| g.len()).sum()
    }

    /// Maps a flat index to (group, offset).
    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (g, (_, slice)) in self.iter_groups().enumerate() {
            if i < slice.len() {
                return (g, i);
            }
            i -= slice.len();
        }
        panic!("flat index out of range");
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        let (g, off) = self.locate(i);
        self.iter_groups().nth(g).expect("group").1[off]
    }

    pub fn add_flat(&mut self, i: usize, delta: f64) {
        let (g, off) = self.locate(i);
        self.group_mut(g)[off] += delta;
    }
}

/// Optimizer and schedule settings. Batch size is in bags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            max_epochs: 200,
            patience: 20,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be finite and >= 0".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Bag-level embedding with its provenance tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagEmbedding {
    pub z: Vec<f64>,
    pub patient_id: String,
    pub modality: Modality,
    pub label: usize,
}

/// Forward-pass products of one bag.
#[derive(Debug, Clone)]
pub struct BagForward {
    pub logits: Array1<f64>,
    pub z: Array1<f64>,
    pub attention: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

/// ReLU compression of every instance: row k of the output is
/// `relu(W_fc r_k + b)`.
pub fn compress_instances(bag: &Bag, params: &MilParams) -> Result<Array2<f64>> {
    if bag.feature_dim() != params.dims.d_in {
        return Err(Error::ShapeMismatch(format!(
            "bag dim {} vs network input {}",
            bag.feature_dim(),
            params.dims.d_in
        )));
    }
    let mut h = bag.instances.dot(&params.w_fc.t());
    for mut row in h.rows_mut() {
        row += &params.b_fc;
    }
    h.mapv_inplace(|v| v.max(0.0));
    Ok(h)
}

fn attention_logits(h: &ArrayView2<'_, f64>, params: &MilParams) -> Array1<f64> {
    let tv = h.dot(&params.v.t()).mapv(f64::tanh);
    let tu = h.dot(&params.u.t()).mapv(sigmoid);
    (&tv * &tu).dot(&params.w_atten)
}

/// Softmax-normalized gated attention over the instances of a bag.
pub fn attention_scores(h: &Array2<f64>, params: &MilParams) -> Result<Array1<f64>> {
    if h.ncols() != params.dims.d_h {
        return Err(Error::ShapeMismatch("compressed instance width".into()));
    }
    if h.nrows() == 0 {
        return Err(Error::Degenerate("empty bag".into()));
    }
    Ok(softmax(&attention_logits(&h.view(), params)))
}

/// Full bag pass: attention-weighted embedding plus classifier logits.
/// The attention distribution is checked to sum to one on every call.
pub fn bag_forward(bag: &Bag, params: &MilParams) -> Result<BagForward> {
    let h = compress_instances(bag, params)?;
    let a = attention_scores(&h, params)?;
    let sum: f64 = a.sum();
    if !((sum - 1.0).abs() < 1e-9) || a.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NonFinite(format!("attention distribution sums to {sum}")));
    }
    let z = h.t().dot(&a);
    let logits = params.w_cls.dot(&z) + &params.b_cls;
    Ok(BagForward { logits, z, attention: a })
}

fn cross_entropy(logits: &Array1<f64>, label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
    lse - logits[label]
}

/// Loss of one bag under the current parameters.
pub fn bag_loss(bag: &Bag, params: &MilParams) -> Result<f64> {
    let fwd = bag_forward(bag, params)?;
    Ok(cross_entropy(&fwd.logits, bag.label))
}

/// Backpropagation through the whole network for one bag.
/// Gradients are accumulated into `grads`; returns the bag loss.
fn accumulate_gradients(bag: &Bag, params: &MilParams, grads: &mut MilParams) -> Result<f64> {
    let r = &bag.instances;
    // forward, keeping intermediates
    let mut pre = r.dot(&params.w_fc.t());
    for mut row in pre.rows_mut() {
        row += &params.b_fc;
    }
    let h = pre.mapv(|v| v.max(0.0));
    let tv = h.dot(&params.v.t()).mapv(f64::tanh);
    let tu = h.dot(&params.u.t()).mapv(sigmoid);
    let g = &tv * &tu;
    let e = g.dot(&params.w_atten);
    let a = softmax(&e);
    let z = h.t().dot(&a);
    let logits = params.w_cls.dot(&z) + &params.b_cls;
    let loss = cross_entropy(&logits, bag.label);

    // backward
    let mut d_logits = softmax(&logits);
    d_logits[bag.label] -= 1.0;
    grads.w_cls += &d_logits
        .view()
        .insert_axis(Axis(1))
        .dot(&z.view().insert_axis(Axis(0)));
    grads.b_cls += &d_logits;
    let dz = params.w_cls.t().dot(&d_logits);

    let q = h.dot(&dz); // per-instance alignment with the embedding gradient
    let aq: f64 = a.iter().zip(q.iter()).map(|(x, y)| x * y).sum();
    let de: Array1<f64> = (&a * &q) - &(a.mapv(|v| v * aq));

    grads.w_atten += &g.t().dot(&de);
    let dg = de.view().insert_axis(Axis(1)).dot(&params.w_atten.view().insert_axis(Axis(0)));
    let dtv = &dg * &tu * &tv.mapv(|t| 1.0 - t * t);
    let dtu = &dg * &tv * &tu.mapv(|s| s * (1.0 - s));
    grads.v += &dtv.t().dot(&h);
    grads.u += &dtu.t().dot(&h);

    let mut dh = a.view().insert_axis(Axis(1)).dot(&dz.view().insert_axis(Axis(0)));
    dh += &dtv.dot(&params.v);
    dh += &dtu.dot(&params.u);
    let dpre =
        ndarray::Zip::from(&dh).and(&pre).map_collect(|&d, &p| if p > 0.0 { d } else { 0.0 });
    grads.w_fc += &dpre.t().dot(r);
    grads.b_fc += &dpre.sum_axis(Axis(0));

    Ok(loss)
}

struct Adam {
    m: MilParams,
    v: MilParams,
    t: u64,
}

impl Adam {
    fn new(template: &MilParams) -> Self {
        Adam { m: template.zeros_like(), v: template.zeros_like(), t: 0 }
    }

    /// One update with L2 regularization folded into the gradient, so a
    /// zero learning rate freezes the parameters entirely.
    fn step(&mut self, params: &mut MilParams, grads: &MilParams, cfg: &TrainConfig) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for g in 0..MilParams::GROUPS {
            let gr: Vec<f64> = grads.iter_groups().nth(g).expect("group").1.to_vec();
            let wd = cfg.weight_decay;
            let mut pv: Vec<f64> = params.group_mut(g).to_vec();
            {
                let ms = self.m.group_mut(g);
                let vs = self.v.group_mut(g);
                for i in 0..pv.len() {
                    let grad = gr[i] + wd * pv[i];
                    ms[i] = B1 * ms[i] + (1.0 - B1) * grad;
                    vs[i] = B2 * vs[i] + (1.0 - B2) * grad * grad;
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    pv[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + EPS);
                }
            }
            params.group_mut(g).copy_from_slice(&pv);
        }
    }
}

/// Trained network plus its training summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MilModel {
    pub params: MilParams,
    pub trained: bool,
    pub epochs_run: usize,
    pub best_val_loss: f64,
}

impl MilModel {
    pub fn untrained(params: MilParams) -> Self {
        MilModel { params, trained: false, epochs_run: 0, best_val_loss: f64::INFINITY }
    }
}

fn mean_loss(bags: &[&Bag], params: &MilParams) -> Result<f64> {
    let mut acc = 0.0;
    for bag in bags {
        acc += bag_loss(bag, params)?;
    }
    Ok(acc / bags.len() as f64)
}

/// Trains the network by per-bag Adam with early stopping on validation
/// loss; the best-validation parameter snapshot is restored at the end.
pub fn train_mil(
    train: &[&Bag],
    val: &[&Bag],
    dims: MilDims,
    cfg: &TrainConfig,
) -> Result<MilModel> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Degenerate("training needs nonempty train and val parts".into()));
    }
    for bag in train.iter().chain(val) {
        if bag.feature_dim() != dims.d_in {
            return Err(Error::ShapeMismatch("bag feature dim vs network input".into()));
        }
        if bag.label >= dims.classes {
            return Err(Error::InvalidConfig(format!("label {} out of range", bag.label)));
        }
    }
    let mut params = MilParams::init(dims, derive_seed(cfg.seed, "init", 0));
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order", 0));

    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        let mut grads = params.zeros_like();
        let mut in_batch = 0usize;
        for &i in &order {
            let loss = accumulate_gradients(train[i], &params, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch} on bag {}",
                    train[i].patient_id
                )));
            }
            in_batch += 1;
            if in_batch == cfg.batch_size {
                adam.step(&mut params, &grads, cfg);
                grads = params.zeros_like();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            adam.step(&mut params, &grads, cfg);
        }
        let val_loss = mean_loss(val, &params)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        if val_loss < best_val - 1e-12 {
            best_val = val_loss;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    Ok(MilModel { params: best, trained: true, epochs_run, best_val_loss: best_val })
}

/// Bag-level embeddings for every patient of the cohort under one
/// modality, tagged with split parts. Rejects untrained models.
pub fn extract_embeddings(
    model: &MilModel,
    cohort: &Cohort,
    split: &SplitAssignment,
    modality: Modality,
) -> Result<EmbeddingTable> {
    if !model.trained {
        return Err(Error::InvalidConfig("model has not been trained".into()));
    }
    let mut rows = Vec::new();
    for id in cohort.patient_ids() {
        let bag = cohort
            .bag(&id, modality)
            .ok_or_else(|| Error::ShapeMismatch(format!("patient {id} lacks {modality}")))?;
        let part = split.part(&id).ok_or_else(|| {
            Error::InvalidConfig(format!("patient {id} missing from split assignment"))
        })?;
        let fwd = bag_forward(bag, &model.params)?;
        rows.push(EmbeddingRow { patient_id: id, part, label: bag.label, z: fwd.z.to_vec() });
    }
    Ok(EmbeddingTable { modality, dim: model.params.dims.d_h, rows })
}

/// Accuracy of the network's own classifier head over bags.
pub fn mil_accuracy(model: &MilModel, bags: &[&Bag]) -> Result<f64> {
    let mut hits = 0usize;
    for bag in bags {
        let fwd = bag_forward(bag, &model.params)?;
        let pred = fwd
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if pred == bag.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / bags.len() as f64)
}

/// Class probabilities of the network head for one bag.
pub fn mil_proba(model: &MilModel, bag: &Bag) -> Result<Vec<f64>> {
    let fwd = bag_forward(bag, &model.params)?;
    Ok(softmax(&fwd.logits).to_vec())
}

/// Report of an analytic-vs-finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares analytic gradients of the summed bag loss against central
/// finite differences on `samples` parameters drawn round-robin from
/// every weight group.
pub fn gradient_check(
    params: &MilParams,
    bags: &[&Bag],
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut grads = params.zeros_like();
    for bag in bags {
        accumulate_gradients(bag, params, &mut grads)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group_sizes: Vec<usize> = params.iter_groups().map(|(_, g)| g.len()).collect();
    let group_offsets: Vec<usize> = group_sizes
        .iter()
        .scan(0usize, |acc, &n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    while checked < samples {
        let g = checked % group_sizes.len();
        let i = group_offsets[g] + rng.random_range(0..group_sizes[g]);
        let mut plus = params.clone();
        plus.add_flat(i, step);
        let mut minus = params.clone();
        minus.add_flat(i, -step);
        let mut lp = 0.0;
        let mut lm = 0.0;
        for bag in bags {
            lp += bag_loss(bag, &plus)?;
            lm += bag_loss(bag, &minus)?;
        }
        let fd = (lp - lm) / (2.0 * step);
        let an = grads.get_flat(i);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok(GradCheckReport { checked, max_rel_err: max_rel })
}
