//! Two-phase training plus the baseline and ablation trainers.
//!
//! Phase 1 fits the feature extractor and task predictor with plain
//! cross-entropy and then freezes them. Phase 2 trains the expert selector
//! and the experts jointly on `η·L_S + L_T`, where the selection labels and
//! weights come from [`crate::lgm`] and the expert weights from
//! [`crate::wgm`]. Labels and weights are constants for differentiation.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infer;
use crate::lgm::{
    generate_selection_labels, raw_tcp_labels, row_std_weights, selection_loss_weights,
    standardize_suitability, tcp_from_probs, SelectionLabelMatrix, SelectionLossWeights,
};
use crate::matrix::{argmax, Matrix};
use crate::models::{ArchConfig, Bundle, BundleKind, Delegator, Expert, Routing};
use crate::nn::{
    softmax_backward, softmax_rows, weighted_cross_entropy, ForwardCache, Mlp, MlpGrads, SgdState,
    PROB_FLOOR,
};
use crate::seed::{rng_for, sub_seed, Rng};
use crate::transport::Assignment;
use crate::wgm::{
    alpha_schedule, expert_weights, generate_assignment, normalize_weights, smooth_assignment,
    suitability_assignment, unconstrained_assignment, AssignmentMatrix, ExpertWeightMatrix,
    SelectionProbMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Coe,
    GateValueSoft,
    Ensemble,
    CategoryRandom,
    SingleExpert,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Coe => "coe",
            Mode::GateValueSoft => "gate_value_soft",
            Mode::Ensemble => "ensemble",
            Mode::CategoryRandom => "category_random",
            Mode::SingleExpert => "single_expert",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// No selection loss; the selector keeps its initial weights.
    #[serde(rename = "LGM_off")]
    LgmOff,
    /// Labels at the raw-TCP argmax, no standardisation or balance.
    #[serde(rename = "LGM_star")]
    LgmStar,
    /// Every expert trains on every sample with weight `1/m`.
    #[serde(rename = "WGM_off")]
    WgmOff,
    /// Expert partition taken from the selection labels.
    #[serde(rename = "WGM_star")]
    WgmStar,
    /// Partition at the row argmax of `P` with no balance and no smoothing.
    #[serde(rename = "WGM_circ")]
    WgmCirc,
    /// Smoothing factor held at `alpha_end` for the whole phase.
    #[serde(rename = "WGM_bullet")]
    WgmBullet,
    /// Selection-loss weights fixed at `1/m`.
    #[serde(rename = "SR_off")]
    SrOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_experts: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub seed: u64,
    pub mode: Mode,
    pub ablations: BTreeSet<Ablation>,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub momentum: f64,
    /// Precompute frozen-extractor features once per phase-2 run.
    pub cache_features: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            epochs_phase1: 10,
            epochs_phase2: 20,
            batch_size: 64,
            eta: 0.8,
            alpha_start: crate::wgm::DEFAULT_ALPHA_START,
            alpha_end: crate::wgm::DEFAULT_ALPHA_END,
            seed: 0,
            mode: Mode::Coe,
            ablations: BTreeSet::new(),
            lr_phase1: 0.05,
            lr_phase2: 0.02,
            momentum: SgdState::DEFAULT_MOMENTUM,
            cache_features: false,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::invalid("n_experts must be at least 1"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be a finite non-negative number"));
        }
        if self.batch_size < self.n_experts {
            return Err(Error::invalid(format!(
                "batch_size {} smaller than n_experts {}",
                self.batch_size, self.n_experts
            )));
        }
        for a in [self.alpha_start, self.alpha_end] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("alpha {a} outside [0, 1]")));
            }
        }
        for lr in [self.lr_phase1, self.lr_phase2] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid("learning rates must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        let exclusive = [Ablation::WgmOff, Ablation::WgmStar, Ablation::WgmCirc, Ablation::WgmBullet];
        if exclusive.iter().filter(|a| self.has(**a)).count() > 1 {
            return Err(Error::invalid("at most one WGM ablation may be set"));
        }
        if self.has(Ablation::WgmStar) && self.has(Ablation::LgmOff) {
            return Err(Error::invalid("WGM_star needs selection labels, which LGM_off disables"));
        }
        if self.mode != Mode::Coe && !self.ablations.is_empty() {
            return Err(Error::invalid("ablations apply to coe mode only"));
        }
        self.arch.validate(self.n_experts)
    }
}

/// Cosine decay from `lr0` at step 0 towards zero at `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (PI * step as f64 / total as f64).cos())
}

fn batches(len: usize, batch: usize, rng: &mut Rng, min_len: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
        .chunks(batch)
        .filter(|c| c.len() >= min_len)
        .map(<[usize]>::to_vec)
        .collect()
}

fn batch_count(len: usize, batch: usize, min_len: usize) -> usize {
    len / batch + usize::from(!len.is_multiple_of(batch) && len % batch >= min_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_total: Option<f64>,
    pub rough_train_acc: Option<f64>,
    pub rough_val_acc: Option<f64>,
    /// Samples per expert in the training partition, summed over batches.
    pub assignment_counts: Vec<usize>,
    pub selector_label_acc: Option<f64>,
    /// Accuracy with every sample refined by its routed expert.
    pub val_acc: Option<f64>,
}

/// Per-step phase-2 quantities kept in memory for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub batch: usize,
    pub alpha: f64,
    pub loss_s: f64,
    pub loss_t: f64,
    pub loss_total: f64,
    pub label_counts: Option<Vec<usize>>,
    pub assignment_counts: Vec<usize>,
    pub weight_col_sums: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn rough_accuracy(d: &Delegator, data: &Dataset) -> Result<f64> {
    let h = d.task_predictor.predict(&d.features(&data.features)?)?;
    let correct = h
        .iter_rows()
        .zip(&data.labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn check_data(d: &Delegator, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    if data.dim() != d.input_dim() {
        return Err(Error::shape(format!("{} features", d.input_dim()), data.dim()));
    }
    if data.classes > d.classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model predicts {}",
            data.classes,
            d.classes()
        )));
    }
    Ok(())
}

/// Fits the feature extractor and task predictor with uniform-weight
/// cross-entropy, then marks them frozen. The selector is not touched.
pub fn train_phase1(d: &mut Delegator, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    check_data(d, data)?;
    let mut rng = rng_for(cfg.seed, "train/phase1/shuffle");
    let mut opt_e = SgdState::new(&d.feature_extractor, cfg.lr_phase1, cfg.momentum)?;
    let mut opt_p = SgdState::new(&d.task_predictor, cfg.lr_phase1, cfg.momentum)?;
    let total = cfg.epochs_phase1 * batch_count(data.len(), cfg.batch_size, 1);
    let mut step = 0;
    let mut records = Vec::with_capacity(cfg.epochs_phase1);
    for epoch in 0..cfg.epochs_phase1 {
        let mut loss_sum = 0.0;
        for idx in batches(data.len(), cfg.batch_size, &mut rng, 1) {
            let x = data.features.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&j| data.labels[j]).collect();
            let (feat, fcache) = d.feature_extractor.forward(&x)?;
            let (logits, pcache) = d.task_predictor.forward(&feat)?;
            let probs = softmax_rows(&logits);
            let w = vec![1.0 / idx.len() as f64; idx.len()];
            let (loss, dlogits) = weighted_cross_entropy(&probs, &y, &w)?;
            let (gp, dfeat) = d.task_predictor.backward(&pcache, &dlogits)?;
            let (ge, _) = d.feature_extractor.backward(&fcache, &dfeat)?;
            let lr = cosine_lr(cfg.lr_phase1, step, total);
            opt_e.learning_rate = lr;
            opt_p.learning_rate = lr;
            opt_p.step(&mut d.task_predictor, &gp)?;
            opt_e.step(&mut d.feature_extractor, &ge)?;
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        records.push(EpochRecord {
            phase: 1,
            epoch,
            loss_p: Some(loss_sum / data.len() as f64),
            loss_s: None,
            loss_t: None,
            loss_total: None,
            rough_train_acc: Some(rough_accuracy(d, data)?),
            rough_val_acc: val.map(|v| rough_accuracy(d, v)).transpose()?,
            assignment_counts: Vec::new(),
            selector_label_acc: None,
            val_acc: None,
        });
    }
    d.frozen = true;
    Ok(records)
}

/// `Σ_j v_j · (−ln P[j][L_j])` and its gradient w.r.t. the selector logits.
pub fn selection_loss(p: &SelectionProbMatrix, l: &SelectionLabelMatrix, v: &SelectionLossWeights) -> Result<(f64, Matrix)> {
    let m = p.matrix().rows();
    if l.labels().len() != m || v.as_slice().len() != m {
        return Err(Error::shape(
            format!("{m} labels and weights"),
            format!("{} labels, {} weights", l.labels().len(), v.as_slice().len()),
        ));
    }
    if l.assignment().n_cols() != p.matrix().cols() {
        return Err(Error::shape(format!("{} experts", p.matrix().cols()), l.assignment().n_cols()));
    }
    weighted_cross_entropy(p.matrix(), l.labels(), v.as_slice())
}

/// `Σ_{j,k} w[j][k] · (−ln p_k[j][y_j])` and one logit gradient per expert.
/// An expert whose weight column is all zero gets a zero gradient.
pub fn expert_loss(expert_probs: &[Matrix], targets: &[usize], w: &ExpertWeightMatrix) -> Result<(f64, Vec<Matrix>)> {
    let wm = w.matrix();
    let (m, n) = wm.shape();
    if expert_probs.len() != n {
        return Err(Error::shape(format!("{n} experts"), expert_probs.len()));
    }
    if targets.len() != m {
        return Err(Error::shape(format!("{m} targets"), targets.len()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (k, probs) in expert_probs.iter().enumerate() {
        if probs.rows() != m {
            return Err(Error::shape(format!("{m} rows"), probs.rows()));
        }
        let col = wm.column(k);
        if col.iter().all(|&v| v == 0.0) {
            grads.push(Matrix::zeros(m, probs.cols()));
            continue;
        }
        let (loss, g) = weighted_cross_entropy(probs, targets, &col)?;
        total += loss;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Selector and expert forward passes on one batch, with caches for backprop.
pub struct Phase2Forward {
    pub selector_cache: ForwardCache,
    pub selection_probs: Matrix,
    pub expert_caches: Vec<ForwardCache>,
    pub expert_probs: Vec<Matrix>,
}

pub fn phase2_forward(selector: &Mlp, experts: &[Mlp], features: &Matrix, x: &Matrix) -> Result<Phase2Forward> {
    let (logits, selector_cache) = selector.forward(features)?;
    let mut expert_caches = Vec::with_capacity(experts.len());
    let mut expert_probs = Vec::with_capacity(experts.len());
    for e in experts {
        let (z, c) = e.forward(x)?;
        expert_probs.push(softmax_rows(&z));
        expert_caches.push(c);
    }
    Ok(Phase2Forward {
        selector_cache,
        selection_probs: softmax_rows(&logits),
        expert_caches,
        expert_probs,
    })
}

/// Constant targets for one phase-2 step.
#[derive(Debug, Clone)]
pub struct Phase2Targets {
    /// `None` skips the selection loss.
    pub selection: Option<(SelectionLabelMatrix, SelectionLossWeights)>,
    pub weights: ExpertWeightMatrix,
}

#[derive(Debug, Clone)]
pub struct Phase2Loss {
    pub loss_s: f64,
    pub loss_t: f64,
    pub loss_total: f64,
    pub selector_grads: MlpGrads,
    pub expert_grads: Vec<MlpGrads>,
}

/// `η·L_S + L_T` and gradients for the selector and every expert.
pub fn phase2_backward(
    selector: &Mlp,
    experts: &[Mlp],
    fwd: &Phase2Forward,
    targets: &[usize],
    t: &Phase2Targets,
    eta: f64,
) -> Result<Phase2Loss> {
    let (loss_s, selector_grads) = match &t.selection {
        Some((l, v)) => {
            let p = SelectionProbMatrix::new(fwd.selection_probs.clone())?;
            let (ls, mut g) = selection_loss(&p, l, v)?;
            g.scale(eta);
            (ls, selector.backward(&fwd.selector_cache, &g)?.0)
        }
        None => (0.0, MlpGrads::zeros_like(selector)),
    };
    let (loss_t, dlogits) = expert_loss(&fwd.expert_probs, targets, &t.weights)?;
    let expert_grads = experts
        .iter()
        .zip(&fwd.expert_caches)
        .zip(&dlogits)
        .map(|((e, c), g)| e.backward(c, g).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Phase2Loss {
        loss_s,
        loss_t,
        loss_total: eta * loss_s + loss_t,
        selector_grads,
        expert_grads,
    })
}

/// Selection labels/weights and expert weights for one batch under the
/// configured ablations. Returns the targets and the expert partition used.
pub fn phase2_targets(
    fwd: &Phase2Forward,
    targets: &[usize],
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<(Phase2Targets, Option<AssignmentMatrix>)> {
    let n = fwd.expert_probs.len();
    let m = targets.len();
    let selection = if cfg.has(Ablation::LgmOff) || n < 2 {
        None
    } else {
        let tcp = tcp_from_probs(&fwd.expert_probs, targets)?;
        let (l, v) = if cfg.has(Ablation::LgmStar) {
            (raw_tcp_labels(&tcp), row_std_weights(tcp.matrix())?)
        } else {
            let s = standardize_suitability(&tcp)?;
            (generate_selection_labels(&s)?, selection_loss_weights(&s)?)
        };
        let v = if cfg.has(Ablation::SrOff) {
            SelectionLossWeights::uniform(m)
        } else {
            v
        };
        Some((l, v))
    };
    let p = SelectionProbMatrix::new(fwd.selection_probs.clone())?;
    let (weights, a) = if cfg.has(Ablation::WgmOff) {
        (ExpertWeightMatrix::uniform(m, n), None)
    } else if cfg.has(Ablation::WgmCirc) {
        let a = unconstrained_assignment(&p);
        let abar = smooth_assignment(&a, 1.0)?;
        (normalize_weights(&abar, m, n)?, Some(a))
    } else {
        let a = if cfg.has(Ablation::WgmStar) {
            let (l, _) = selection
                .as_ref()
                .ok_or_else(|| Error::invalid("WGM_star needs selection labels"))?;
            suitability_assignment(l)
        } else if n == 1 {
            AssignmentMatrix::from_assignment(Assignment::new(vec![0; m], 1)?)
        } else {
            generate_assignment(&p)?
        };
        (expert_weights(&a, alpha)?, Some(a))
    };
    Ok((Phase2Targets { selection, weights }, a))
}

fn batch_xy(data: &Dataset, idx: &[usize]) -> (Matrix, Vec<usize>) {
    (data.features.select_rows(idx), idx.iter().map(|&j| data.labels[j]).collect())
}

fn coe_bundle(d: &Delegator, experts: &[Expert], routing: Routing, mode: &str, seed: u64) -> Result<Bundle> {
    Bundle::coe(d.clone(), experts.to_vec(), routing, mode, seed, 2)
}

fn expert_networks(experts: &[Expert]) -> Vec<Mlp> {
    experts.iter().map(|e| e.network.clone()).collect()
}

/// Joint training of the selector and experts. The extractor and predictor
/// must already be frozen and are checked to be bit-identical afterwards.
pub fn train_phase2(
    d: &mut Delegator,
    experts: &mut [Expert],
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_data(d, data)?;
    if !d.frozen {
        return Err(Error::invalid("phase 2 needs a delegator frozen by phase 1"));
    }
    if experts.len() != d.n_experts() {
        return Err(Error::shape(format!("{} experts", d.n_experts()), experts.len()));
    }
    let frozen_prints = (d.feature_extractor.fingerprint(), d.task_predictor.fingerprint());
    let n = experts.len();
    let cached = if cfg.cache_features {
        Some(d.features(&data.features)?)
    } else {
        None
    };
    let mut rng = rng_for(cfg.seed, "train/phase2/shuffle");
    let mut opt_s = SgdState::new(&d.expert_selector, cfg.lr_phase2, cfg.momentum)?;
    let mut opt_e = experts
        .iter()
        .map(|e| SgdState::new(&e.network, cfg.lr_phase2, cfg.momentum))
        .collect::<Result<Vec<_>>>()?;
    let per_epoch = batch_count(data.len(), cfg.batch_size, n);
    let total = cfg.epochs_phase2 * per_epoch;
    let rough_train = rough_accuracy(d, data)?;
    let rough_val = val.map(|v| rough_accuracy(d, v)).transpose()?;
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs_phase2 {
        let (mut ls_sum, mut lt_sum, mut lt_total) = (0.0, 0.0, 0.0);
        let mut counts = vec![0usize; n];
        let (mut label_hits, mut label_seen) = (0usize, 0usize);
        for idx in batches(data.len(), cfg.batch_size, &mut rng, n) {
            let (x, y) = batch_xy(data, &idx);
            let feat = match &cached {
                Some(f) => f.select_rows(&idx),
                None => d.features(&x)?,
            };
            let nets = expert_networks(experts);
            let fwd = phase2_forward(&d.expert_selector, &nets, &feat, &x)?;
            let alpha = if cfg.has(Ablation::WgmBullet) {
                cfg.alpha_end
            } else {
                alpha_schedule(step as u64, total as u64, cfg.alpha_start, cfg.alpha_end)?
            };
            let (targets, a) = phase2_targets(&fwd, &y, alpha, cfg)?;
            let loss = phase2_backward(&d.expert_selector, &nets, &fwd, &y, &targets, cfg.eta)?;
            let lr = cosine_lr(cfg.lr_phase2, step, total);
            if targets.selection.is_some() {
                opt_s.learning_rate = lr;
                opt_s.step(&mut d.expert_selector, &loss.selector_grads)?;
            }
            for ((e, opt), g) in experts.iter_mut().zip(&mut opt_e).zip(&loss.expert_grads) {
                opt.learning_rate = lr;
                opt.step(&mut e.network, g)?;
            }
            let a_counts = a.as_ref().map(AssignmentMatrix::column_counts).unwrap_or_default();
            for (c, v) in counts.iter_mut().zip(&a_counts) {
                *c += v;
            }
            let label_counts = targets.selection.as_ref().map(|(l, _)| {
                let preds = fwd.selection_probs.iter_rows().map(argmax);
                label_hits += preds.zip(l.labels()).filter(|(p, l)| p == *l).count();
                label_seen += l.labels().len();
                l.column_counts()
            });
            let mb = idx.len() as f64;
            ls_sum += loss.loss_s * mb;
            lt_sum += loss.loss_t * mb;
            lt_total += loss.loss_total * mb;
            report.steps.push(StepRecord {
                batch: idx.len(),
                alpha,
                loss_s: loss.loss_s,
                loss_t: loss.loss_t,
                loss_total: loss.loss_total,
                label_counts,
                assignment_counts: a_counts,
                weight_col_sums: targets.weights.matrix().col_sums(),
            });
            step += 1;
        }
        let seen: usize = report.steps[report.steps.len() - per_epoch..].iter().map(|s| s.batch).sum();
        let val_acc = match val {
            Some(v) => Some(infer::full_accuracy(&coe_bundle(d, experts, Routing::Selector, "coe", cfg.seed)?, v)?),
            None => None,
        };
        report.epochs.push(EpochRecord {
            phase: 2,
            epoch,
            loss_p: None,
            loss_s: Some(ls_sum / seen as f64),
            loss_t: Some(lt_sum / seen as f64),
            loss_total: Some(lt_total / seen as f64),
            rough_train_acc: Some(rough_train),
            rough_val_acc: rough_val,
            assignment_counts: counts,
            selector_label_acc: (label_seen > 0).then(|| label_hits as f64 / label_seen as f64),
            val_acc,
        });
    }
    assert_eq!(
        frozen_prints,
        (d.feature_extractor.fingerprint(), d.task_predictor.fingerprint()),
        "frozen delegator modules changed during phase 2"
    );
    Ok(report)
}

/// Mixture `q = Σ_k P_k · p_k`, loss `mean_j −ln q[j][y_j]`, and gradients
/// w.r.t. the selector logits and each expert's logits.
pub fn gate_value_loss(p: &Matrix, expert_probs: &[Matrix], targets: &[usize]) -> Result<(f64, Matrix, Vec<Matrix>)> {
    let (m, n) = p.shape();
    if expert_probs.len() != n || targets.len() != m {
        return Err(Error::shape(format!("{n} experts, {m} targets"), format!("{}, {}", expert_probs.len(), targets.len())));
    }
    let q = mixture(p, expert_probs)?;
    let mut loss = 0.0;
    let mut dp = Matrix::zeros(m, n);
    let mut dprobs: Vec<Matrix> = expert_probs.iter().map(|e| Matrix::zeros(m, e.cols())).collect();
    for (j, &y) in targets.iter().enumerate() {
        let qy = q[(j, y)];
        loss -= qy.max(PROB_FLOOR).ln();
        let s = -1.0 / (m as f64 * qy.max(PROB_FLOOR));
        for k in 0..n {
            dp[(j, k)] = s * expert_probs[k][(j, y)];
            dprobs[k][(j, y)] = s * p[(j, k)];
        }
    }
    let dsel = softmax_backward(p, &dp);
    let dexp = expert_probs
        .iter()
        .zip(&dprobs)
        .map(|(pk, g)| softmax_backward(pk, g))
        .collect();
    Ok((loss / m as f64, dsel, dexp))
}

/// Row-wise `Σ_k P[j][k] · p_k[j]`.
pub fn mixture(p: &Matrix, expert_probs: &[Matrix]) -> Result<Matrix> {
    let (m, n) = p.shape();
    let c = expert_probs.first().map_or(0, Matrix::cols);
    if expert_probs.len() != n || expert_probs.iter().any(|e| e.shape() != (m, c)) {
        return Err(Error::invalid("expert outputs do not match the gate shape"));
    }
    Ok(Matrix::from_fn(m, c, |j, cls| {
        (0..n).map(|k| p[(j, k)] * expert_probs[k][(j, cls)]).sum()
    }))
}

/// Soft gate-value baseline: the selector's probabilities weight a mixture of
/// expert outputs and one cross-entropy on the mixture trains both.
pub fn train_gate_value(
    d: &mut Delegator,
    experts: &mut [Expert],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_data(d, data)?;
    if !d.frozen {
        return Err(Error::invalid("gate-value training needs a delegator frozen by phase 1"));
    }
    let n = experts.len();
    let mut rng = rng_for(cfg.seed, "train/phase2/shuffle");
    let mut opt_s = SgdState::new(&d.expert_selector, cfg.lr_phase2, cfg.momentum)?;
    let mut opt_e = experts
        .iter()
        .map(|e| SgdState::new(&e.network, cfg.lr_phase2, cfg.momentum))
        .collect::<Result<Vec<_>>>()?;
    let total = cfg.epochs_phase2 * batch_count(data.len(), cfg.batch_size, 1);
    let rough_train = rough_accuracy(d, data)?;
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs_phase2 {
        let mut loss_sum = 0.0;
        for idx in batches(data.len(), cfg.batch_size, &mut rng, 1) {
            let (x, y) = batch_xy(data, &idx);
            let feat = d.features(&x)?;
            let nets = expert_networks(experts);
            let fwd = phase2_forward(&d.expert_selector, &nets, &feat, &x)?;
            let (loss, dsel, dexp) = gate_value_loss(&fwd.selection_probs, &fwd.expert_probs, &y)?;
            let lr = cosine_lr(cfg.lr_phase2, step, total);
            if n > 1 {
                let gs = d.expert_selector.backward(&fwd.selector_cache, &dsel)?.0;
                opt_s.learning_rate = lr;
                opt_s.step(&mut d.expert_selector, &gs)?;
            }
            for (k, e) in experts.iter_mut().enumerate() {
                let g = nets[k].backward(&fwd.expert_caches[k], &dexp[k])?.0;
                opt_e[k].learning_rate = lr;
                opt_e[k].step(&mut e.network, &g)?;
            }
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        report.epochs.push(EpochRecord {
            phase: 2,
            epoch,
            loss_p: None,
            loss_s: None,
            loss_t: Some(loss_sum / data.len() as f64),
            loss_total: Some(loss_sum / data.len() as f64),
            rough_train_acc: Some(rough_train),
            rough_val_acc: None,
            assignment_counts: Vec::new(),
            selector_label_acc: None,
            val_acc: None,
        });
    }
    Ok(report)
}

/// Plain uniform-weight cross-entropy training of one network.
pub fn train_plain(net: &mut Mlp, data: &Dataset, epochs: usize, lr0: f64, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    let mut opt = SgdState::new(net, lr0, cfg.momentum)?;
    let total = epochs * batch_count(data.len(), cfg.batch_size, 1);
    let mut step = 0;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut loss_sum = 0.0;
        for idx in batches(data.len(), cfg.batch_size, rng, 1) {
            let (x, y) = batch_xy(data, &idx);
            let (z, cache) = net.forward(&x)?;
            let w = vec![1.0 / idx.len() as f64; idx.len()];
            let (loss, g) = weighted_cross_entropy(&softmax_rows(&z), &y, &w)?;
            let grads = net.backward(&cache, &g)?.0;
            opt.learning_rate = cosine_lr(lr0, step, total);
            opt.step(net, &grads)?;
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        losses.push(loss_sum / data.len() as f64);
    }
    Ok(losses)
}

/// Epoch budget for networks trained without a delegator: both phases'
/// worth, so baselines see at least as many updates as a CoE expert.
pub fn standalone_epochs(cfg: &TrainConfig) -> usize {
    cfg.epochs_phase1 + cfg.epochs_phase2
}

/// Independently trained experts, one per seed. Expert `k` is initialised
/// and shuffled from `seeds[k]` alone, so equal seeds give equal experts.
pub fn train_ensemble(seeds: &[u64], arch: &ArchConfig, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<Expert>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ensemble needs at least one seed"));
    }
    seeds
        .iter()
        .map(|&s| {
            let mut e = Expert::new(&arch.expert_dims(0), s, 0)?;
            let mut rng = rng_for(s, "train/standalone/shuffle");
            train_plain(&mut e.network, data, standalone_epochs(cfg), cfg.lr_phase2, cfg, &mut rng)?;
            Ok(e)
        })
        .collect()
}

/// Seeded balanced random partition of `classes` into `n` groups; group
/// sizes differ by at most one. `groups[c]` is the group of class `c`.
pub fn random_class_partition(classes: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || classes < n {
        return Err(Error::invalid(format!("cannot split {classes} classes into {n} groups")));
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng_for(seed, "train/category/partition"));
    let mut groups = vec![0; classes];
    for (pos, &c) in order.iter().enumerate() {
        groups[c] = pos % n;
    }
    Ok(groups)
}

/// Experts trained on the partition given by the rough prediction's class
/// group, with the usual smoothing and normalisation. Returns the groups.
pub fn train_category_random(
    d: &Delegator,
    experts: &mut [Expert],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Vec<usize>, TrainReport)> {
    check_data(d, data)?;
    if !d.frozen {
        return Err(Error::invalid("category partition training needs a delegator frozen by phase 1"));
    }
    let n = experts.len();
    let groups = random_class_partition(d.classes(), n, cfg.seed)?;
    let rough: Vec<usize> = d
        .task_predictor
        .predict(&d.features(&data.features)?)?
        .iter_rows()
        .map(argmax)
        .collect();
    let mut rng = rng_for(cfg.seed, "train/phase2/shuffle");
    let mut opt_e = experts
        .iter()
        .map(|e| SgdState::new(&e.network, cfg.lr_phase2, cfg.momentum))
        .collect::<Result<Vec<_>>>()?;
    let total = cfg.epochs_phase2 * batch_count(data.len(), cfg.batch_size, 1);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs_phase2 {
        let mut loss_sum = 0.0;
        let mut counts = vec![0usize; n];
        for idx in batches(data.len(), cfg.batch_size, &mut rng, 1) {
            let (x, y) = batch_xy(data, &idx);
            let a = AssignmentMatrix::from_assignment(Assignment::new(
                idx.iter().map(|&j| groups[rough[j]]).collect(),
                n,
            )?);
            let alpha = alpha_schedule(step as u64, total as u64, cfg.alpha_start, cfg.alpha_end)?;
            let w = expert_weights(&a, alpha)?;
            let mut probs = Vec::with_capacity(n);
            let mut caches = Vec::with_capacity(n);
            for e in experts.iter() {
                let (z, c) = e.network.forward(&x)?;
                probs.push(softmax_rows(&z));
                caches.push(c);
            }
            let (loss, dlogits) = expert_loss(&probs, &y, &w)?;
            let lr = cosine_lr(cfg.lr_phase2, step, total);
            for k in 0..n {
                let g = experts[k].network.backward(&caches[k], &dlogits[k])?.0;
                opt_e[k].learning_rate = lr;
                opt_e[k].step(&mut experts[k].network, &g)?;
            }
            for (c, v) in counts.iter_mut().zip(a.column_counts()) {
                *c += v;
            }
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        report.epochs.push(EpochRecord {
            phase: 2,
            epoch,
            loss_p: None,
            loss_s: None,
            loss_t: Some(loss_sum / data.len() as f64),
            loss_total: Some(loss_sum / data.len() as f64),
            rough_train_acc: None,
            rough_val_acc: None,
            assignment_counts: counts,
            selector_label_acc: None,
            val_acc: None,
        });
    }
    Ok((groups, report))
}

fn fresh_experts(cfg: &TrainConfig, arch: &ArchConfig) -> Result<Vec<Expert>> {
    (0..cfg.n_experts)
        .map(|k| Expert::new(&arch.expert_dims(k), cfg.seed, k))
        .collect()
}

/// Fits the input width and class count to the data.
pub fn arch_for(cfg: &TrainConfig, data: &Dataset) -> ArchConfig {
    ArchConfig {
        input_dim: data.dim(),
        classes: data.classes,
        ..cfg.arch.clone()
    }
}

/// Runs the configured mode end to end and returns an inference bundle.
pub fn train(cfg: &TrainConfig, data: &Dataset, val: Option<&Dataset>) -> Result<(Bundle, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    let arch = arch_for(cfg, data);
    arch.validate(cfg.n_experts)?;
    let mode = cfg.mode.name();
    match cfg.mode {
        Mode::Coe | Mode::GateValueSoft | Mode::CategoryRandom => {
            let mut d = Delegator::new(&arch, cfg.n_experts, cfg.seed)?;
            let mut report = TrainReport {
                epochs: train_phase1(&mut d, data, val, cfg)?,
                steps: Vec::new(),
            };
            let mut experts = fresh_experts(cfg, &arch)?;
            let (routing, r2) = match cfg.mode {
                Mode::Coe => (Routing::Selector, train_phase2(&mut d, &mut experts, data, val, cfg)?),
                Mode::GateValueSoft => (Routing::Selector, train_gate_value(&mut d, &mut experts, data, cfg)?),
                _ => {
                    let (groups, r) = train_category_random(&d, &mut experts, data, cfg)?;
                    (Routing::ClassGroups(groups), r)
                }
            };
            report.epochs.extend(r2.epochs);
            report.steps = r2.steps;
            let bundle = Bundle::coe(d, experts, routing, mode, cfg.seed, 2)?;
            Ok((bundle, report))
        }
        Mode::Ensemble => {
            let seeds: Vec<u64> = (0..cfg.n_experts)
                .map(|k| sub_seed(cfg.seed, &format!("ensemble/{k}")))
                .collect();
            let experts = train_ensemble(&seeds, &arch, data, cfg)?;
            Ok((Bundle::experts_only(BundleKind::Ensemble, experts, mode, cfg.seed)?, TrainReport::default()))
        }
        Mode::SingleExpert => {
            let experts = train_ensemble(&[cfg.seed], &arch, data, cfg)?;
            Ok((Bundle::experts_only(BundleKind::Single, experts, mode, cfg.seed)?, TrainReport::default()))
        }
    }
}
