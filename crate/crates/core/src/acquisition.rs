//! Knowledge acquisition: ensembling soft labels over dreams and distilling
//! them into models, plus plain local cross-entropy training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{check_simplex, Dataset, DreamBuffer, SIMPLEX_TOL};
use crate::error::{Error, Result};
use crate::extraction::cross_entropy;
use crate::nn::{Mode, Model, ParamRole};
use crate::optim::SgdMomentum;
use crate::tensor::Tensor;

/// Dream inputs paired with probability targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SoftLabelSet {
    batches: Vec<(Tensor, Tensor)>,
}

impl SoftLabelSet {
    pub fn new() -> Self {
        SoftLabelSet::default()
    }

    pub fn push(&mut self, inputs: Tensor, targets: Tensor) -> Result<()> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Shape {
                op: "soft_label_set",
                left: inputs.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        check_simplex(&targets, SIMPLEX_TOL)?;
        self.batches.push((inputs, targets));
        Ok(())
    }

    pub fn from_buffer(buf: &DreamBuffer) -> Self {
        SoftLabelSet {
            batches: buf
                .entries()
                .map(|e| (e.inputs.clone(), e.soft_labels.clone()))
                .collect(),
        }
    }

    pub fn batches(&self) -> &[(Tensor, Tensor)] {
        &self.batches
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn num_samples(&self) -> usize {
        self.batches.iter().map(|(x, _)| x.rows()).sum()
    }
}

/// Weighted mean of client probability rows, renormalized per row.
pub fn aggregate_soft_labels(per_client: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    let first = per_client
        .first()
        .ok_or_else(|| Error::invalid("no client predictions to aggregate"))?;
    if weights.len() != per_client.len() {
        return Err(Error::invalid("one weight per client is required"));
    }
    let mut acc = Tensor::zeros(first.shape());
    for (p, &w) in per_client.iter().zip(weights) {
        check_simplex(p, 1e-6)?;
        acc.axpy(w, p)?;
    }
    let c = acc.cols();
    for row in acc.data_mut().chunks_mut(c) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(acc)
}

/// `tau^2 * mean_rows KL(target || softmax(logits / tau))`, using
/// `0 ln 0 = 0` for zero targets.
pub fn kd_loss(g: &mut Graph, student_logits: Var, targets: &Tensor, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let ls = g.value(student_logits).shape();
    if ls != targets.shape() {
        return Err(Error::Shape {
            op: "kd_loss",
            left: ls.to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let n = targets.rows() as f64;
    let neg_entropy: f64 = targets
        .data()
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum::<f64>()
        / n;
    let scaled = g.scale(student_logits, 1.0 / temperature)?;
    let lq = g.log_softmax(scaled)?;
    let t = g.constant(targets.clone());
    let ce = cross_entropy_from_log_probs(g, lq, t, n)?;
    let kl = g.add_scalar(ce, neg_entropy)?;
    g.scale(kl, temperature * temperature)
}

fn cross_entropy_from_log_probs(g: &mut Graph, lq: Var, targets: Var, n: f64) -> Result<Var> {
    let prod = g.mul(targets, lq)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / n)
}

/// How batchnorm behaves while distilling on dreams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DreamBnMode {
    /// Normalize by running statistics and leave them untouched, so a
    /// model's stored statistics keep describing its real data.
    Frozen,
    /// Normalize by batch statistics and fold them into the running stats.
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub dream_bn: DreamBnMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            temperature: 1.0,
            dream_bn: DreamBnMode::Frozen,
        }
    }
}

/// Mean loss per epoch, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn first(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

fn sgd_step(model: &mut Model, opt: &mut SgdMomentum, grad: &[f64]) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    let mut params = model.parameter_vector();
    opt.step(&mut params, grad);
    model.load_parameter_vector(&params)
}

/// SGD-with-momentum distillation of `model` on dream batches. Each stored
/// batch is one optimizer step; batch order is reshuffled every epoch.
pub fn train_on_dreams<R: Rng + ?Sized>(
    model: &mut Model,
    dreams: &SoftLabelSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if dreams.is_empty() {
        return Err(Error::invalid("train_on_dreams needs at least one dream batch"));
    }
    let mut opt = SgdMomentum::new(model.param_count(), cfg.lr, cfg.momentum);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..dreams.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &b in &order {
            let (x, y) = &dreams.batches[b];
            let loss = dream_step(model, &mut opt, x, y, cfg)?;
            total += loss;
        }
        report.epoch_losses.push(total / order.len() as f64);
    }
    Ok(report)
}

fn dream_step(model: &mut Model, opt: &mut SgdMomentum, x: &Tensor, y: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let temp = cfg.temperature;
    match cfg.dream_bn {
        DreamBnMode::Batch => {
            let (loss, grad, stats) = model.parameter_gradient(x, |g, out| kd_loss(g, out.logits, y, temp))?;
            sgd_step(model, opt, &grad)?;
            model.absorb_stats(&stats);
            Ok(loss)
        }
        DreamBnMode::Frozen => {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = model.forward_graph(&mut g, xv, Mode::Eval, ParamRole::Trainable)?;
            let l = kd_loss(&mut g, out.logits, y, temp)?;
            let mut grads = g.backward(l, &out.params)?;
            let mut flat = Vec::with_capacity(model.param_count());
            for p in &out.params {
                flat.extend(grads.take(*p).expect("param gradient").into_data());
            }
            sgd_step(model, opt, &flat)?;
            Ok(g.scalar(l))
        }
    }
}

/// Mean distillation loss of `model` over a dream set, eval mode.
pub fn dream_set_loss(model: &Model, dreams: &SoftLabelSet, temperature: f64) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in &dreams.batches {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = model.forward_graph(&mut g, xv, Mode::Eval, ParamRole::Frozen)?;
        let l = kd_loss(&mut g, out.logits, y, temperature)?;
        total += g.scalar(l);
    }
    Ok(total / dreams.len().max(1) as f64)
}

/// Cross-entropy training on a labelled dataset, batchnorm in train mode.
pub fn train_on_local<R: Rng + ?Sized>(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("train_on_local needs a nonempty dataset"));
    }
    let mut opt = SgdMomentum::new(model.param_count(), cfg.lr, cfg.momentum);
    let mut report = TrainReport::default();
    let classes = model.spec().num_classes;
    for _ in 0..cfg.epochs {
        let batches = data.batches(cfg.batch_size, rng);
        let mut total = 0.0;
        for idx in &batches {
            let x = data.features.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let onehot = Tensor::one_hot(&labels, classes)?;
            let (loss, grad, stats) = if idx.len() < 2 {
                frozen_ce_gradient(model, &x, &onehot)?
            } else {
                model.parameter_gradient(&x, |g, out| {
                    let t = g.constant(onehot.clone());
                    cross_entropy(g, out.logits, t)
                })?
            };
            sgd_step(model, &mut opt, &grad)?;
            model.absorb_stats(&stats);
            total += loss;
        }
        report.epoch_losses.push(total / batches.len() as f64);
    }
    Ok(report)
}

/// Single-sample fallback: batchnorm cannot use batch statistics, so
/// normalize by the running ones and skip the statistics update.
fn frozen_ce_gradient(model: &Model, x: &Tensor, onehot: &Tensor) -> Result<(f64, Vec<f64>, Vec<crate::nn::BatchStats>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward_graph(&mut g, xv, Mode::Eval, ParamRole::Trainable)?;
    let t = g.constant(onehot.clone());
    let l = cross_entropy(&mut g, out.logits, t)?;
    let mut grads = g.backward(l, &out.params)?;
    let mut flat = Vec::new();
    for p in &out.params {
        flat.extend(grads.take(*p).expect("param gradient").into_data());
    }
    Ok((g.scalar(l), flat, Vec::new()))
}

/// Cross-entropy training on soft targets over a fixed input set (used by
/// the AvgKD baseline); batchnorm in train mode.
pub fn train_on_soft_targets<R: Rng + ?Sized>(
    model: &mut Model,
    inputs: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    check_simplex(targets, 1e-6)?;
    let mut opt = SgdMomentum::new(model.param_count(), cfg.lr, cfg.momentum);
    let mut report = TrainReport::default();
    let n = inputs.rows();
    for _ in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut chunks: Vec<Vec<usize>> = idx.chunks(cfg.batch_size.max(2)).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
            let last = chunks.pop().expect("nonempty");
            chunks.last_mut().expect("nonempty").extend(last);
        }
        let mut total = 0.0;
        for chunk in &chunks {
            let x = inputs.select_rows(chunk);
            let y = targets.select_rows(chunk);
            let (loss, grad, stats) = if chunk.len() < 2 {
                frozen_ce_gradient(model, &x, &y)?
            } else {
                model.parameter_gradient(&x, |g, out| {
                    let t = g.constant(y.clone());
                    cross_entropy(g, out.logits, t)
                })?
            };
            sgd_step(model, &mut opt, &grad)?;
            model.absorb_stats(&stats);
            total += loss;
        }
        report.epoch_losses.push(total / chunks.len() as f64);
    }
    Ok(report)
}

/// Whether a client should keep training on its local data.
///
/// Returns false when the mean of the last `window` accuracies sits more
/// than `drop_threshold` below the best accuracy seen before that window.
pub fn divergence_guard(history: &[f64], window: usize, drop_threshold: f64) -> bool {
    let window = window.max(1);
    if history.len() <= window {
        return true;
    }
    let (before, recent) = history.split_at(history.len() - window);
    let best = before.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = recent.iter().sum::<f64>() / recent.len() as f64;
    best - mean <= drop_threshold
}

/// Sticky wrapper around [`divergence_guard`].
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceGuard {
    pub window: usize,
    pub drop_threshold: f64,
    history: Vec<f64>,
    tripped: bool,
}

impl DivergenceGuard {
    pub fn new(window: usize, drop_threshold: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("divergence guard window must be at least 1"));
        }
        Ok(DivergenceGuard {
            window,
            drop_threshold,
            history: Vec::new(),
            tripped: false,
        })
    }

    /// Records an accuracy and returns whether local training continues.
    pub fn record(&mut self, accuracy: f64) -> bool {
        self.history.push(accuracy);
        if !self.tripped && !divergence_guard(&self.history, self.window, self.drop_threshold) {
            self.tripped = true;
        }
        !self.tripped
    }

    pub fn allows_local_training(&self) -> bool {
        !self.tripped
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}
