use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{derive_seed, tags, AcquisitionPlacement, Client, FederationState, Method, RoundConfig, Scenario};
use crate::acquisition::{aggregate_soft_labels, dream_set_loss, train_on_dreams, SoftLabelSet};
use crate::aggregation::{aggregate_deltas, secure_masked_aggregate, PairSeeds, PseudoGradient, ServerOptimizerState};
use crate::error::Result;
use crate::extraction::{mean_entropy, DreamBatch};
use crate::metrics::{CommLedger, Direction, Payload, Subject};
use crate::nn::Model;
use crate::tensor::Tensor;

/// What one outer epoch produced.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub initial: Tensor,
    pub dreams: Tensor,
    pub soft_labels: Tensor,
    /// Mean over clients of the extraction loss at the last local step.
    pub extraction_loss: f64,
}

/// One global round: local extraction on every teacher, aggregation of the
/// pseudo-gradients, and the server update. Returns the new dreams and the
/// mean extraction loss at the last local step.
#[allow(clippy::too_many_arguments)]
pub fn dream_round(
    teachers: &[&Client],
    weights: &[f64],
    server: &Model,
    x: &Tensor,
    cfg: &RoundConfig,
    epoch: usize,
    round: usize,
    mask_seed: Option<u64>,
    server_opt: &mut ServerOptimizerState,
    ledger: &mut CommLedger,
) -> Result<(Tensor, f64)> {
    let total: f64 = weights.iter().sum();
    let local = cfg.local_dream();
    let elements = x.len();
    let batch = DreamBatch::new(x.clone(), epoch);
    let outcomes = teachers
        .par_iter()
        .map(|c| c.dream(&batch, server, &local))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Vec::with_capacity(teachers.len());
    let mut loss_sum = 0.0;
    for ((c, w), out) in teachers.iter().zip(weights).zip(outcomes) {
        ledger.record(epoch, c.id(), Direction::Down, Payload::DreamBroadcast, elements);
        ledger.record(epoch, c.id(), Direction::Up, Payload::PseudoGradient, elements);
        loss_sum += out.losses.last().copied().unwrap_or(0.0);
        grads.push(PseudoGradient::new(c.id(), out.delta, w / total)?);
    }
    let delta = match mask_seed {
        Some(s) => {
            let k = teachers.iter().map(|c| c.id()).max().unwrap_or(0) + 1;
            let seeds = PairSeeds::generate(k, derive_seed(s, (epoch * cfg.rounds + round) as u64));
            secure_masked_aggregate(&grads, &seeds)?.result
        }
        None => aggregate_deltas(&grads)?,
    };
    Ok((server_opt.apply(x, &delta)?, loss_sum / teachers.len() as f64))
}

/// All `cfg.rounds` global rounds on one dream batch with fixed teachers.
/// `teachers` may be any subset of the federation; weights are renormalized.
#[allow(clippy::too_many_arguments)]
pub fn collaborative_dream(
    teachers: &[&Client],
    weights: &[f64],
    server: &Model,
    x0: Tensor,
    cfg: &RoundConfig,
    epoch: usize,
    mask_seed: Option<u64>,
    ledger: &mut CommLedger,
) -> Result<(Tensor, f64)> {
    let mut server_opt = ServerOptimizerState::new(cfg.server_opt, cfg.lr_global)?;
    let mut x = x0;
    let mut loss = 0.0;
    for r in 0..cfg.rounds {
        (x, loss) = dream_round(teachers, weights, server, &x, cfg, epoch, r, mask_seed, &mut server_opt, ledger)?;
    }
    Ok((x, loss))
}

/// Weighted probability-space ensemble of the teachers on `x`.
pub fn ensemble_labels(teachers: &[&Client], weights: &[f64], x: &Tensor) -> Result<Tensor> {
    let total: f64 = weights.iter().sum();
    let probs = teachers
        .par_iter()
        .map(|c| c.soft_labels(x))
        .collect::<Result<Vec<_>>>()?;
    let w: Vec<f64> = weights.iter().map(|w| w / total).collect();
    aggregate_soft_labels(&probs, &w)
}

impl FederationState {
    pub(super) fn fresh_dreams(&self, epoch: usize, cfg: &RoundConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.seed, tags::DREAMS), epoch as u64));
        Tensor::randn(&[cfg.dream_batch, self.test.dim()], &mut rng)
    }

    /// One outer epoch: fresh dreams, `R` rounds of collaborative dreaming,
    /// then knowledge acquisition by the server and the clients.
    pub fn run_codream_round(&mut self, cfg: &RoundConfig, epoch: usize) -> Result<RoundOutcome> {
        self.epoch = epoch;
        let x0 = self.fresh_dreams(epoch, cfg);
        let mask_seed = cfg.secure_aggregation.then(|| derive_seed(self.seed, tags::MASKS));
        let mut server_opt = ServerOptimizerState::new(cfg.server_opt, cfg.lr_global)?;
        let mut x = x0.clone();
        let mut loss = 0.0;
        let mut soft_labels = None;
        for r in 0..cfg.rounds {
            let mut ledger = std::mem::take(&mut self.record.ledger);
            let teachers: Vec<&Client> = self.clients.iter().collect();
            let step = dream_round(
                &teachers,
                &self.weights,
                &self.server,
                &x,
                cfg,
                epoch,
                r,
                mask_seed,
                &mut server_opt,
                &mut ledger,
            );
            self.record.ledger = ledger;
            (x, loss) = step?;
            if cfg.placement == AcquisitionPlacement::EveryRound {
                soft_labels = Some(self.acquire(&x, cfg, epoch)?);
            }
        }
        let soft_labels = match soft_labels {
            Some(y) => y,
            None => self.acquire(&x, cfg, epoch)?,
        };
        Ok(RoundOutcome {
            initial: x0,
            dreams: x,
            soft_labels,
            extraction_loss: loss,
        })
    }

    /// Soft-label aggregation, buffer update, and distillation.
    pub fn acquire(&mut self, x: &Tensor, cfg: &RoundConfig, epoch: usize) -> Result<Tensor> {
        let n = x.rows();
        let classes = self.test.num_classes;
        for c in &self.clients {
            self.record
                .ledger
                .record(epoch, c.id(), Direction::Down, Payload::DreamBroadcast, x.len());
            self.record
                .ledger
                .record(epoch, c.id(), Direction::Up, Payload::SoftLabels, n * classes);
            self.record
                .ledger
                .record(epoch, c.id(), Direction::Down, Payload::DreamSet, n * classes);
        }
        let teachers: Vec<&Client> = self.clients.iter().collect();
        let y = ensemble_labels(&teachers, &self.weights, x)?;
        self.buffer.push(x.clone(), y.clone(), epoch)?;
        let dream_labels = y.argmax_rows();
        let set = SoftLabelSet::from_buffer(&self.buffer);

        if cfg.server_kd.epochs > 0 {
            train_on_dreams(&mut self.server, &set, &cfg.server_kd, &mut self.server_rng)?;
        }
        let kd_loss = dream_set_loss(&self.server, &set, cfg.server_kd.temperature)?;
        self.record.push(epoch, Subject::SERVER, "dreams", "kd_loss", kd_loss);
        self.record.push(epoch, Subject::SERVER, "dreams", "soft_label_entropy", label_entropy(&y));

        let dreams_first = cfg.dreams_before_local;
        let results = self
            .clients
            .par_iter_mut()
            .map(|c| {
                let acc = c.model.accuracy(x, &dream_labels)?;
                c.guard.record(acc);
                let local = c.guard.allows_local_training();
                if dreams_first {
                    c.train_dreams(&set, &cfg.client_kd)?;
                }
                if local {
                    c.train_local(&cfg.local)?;
                }
                if !dreams_first {
                    c.train_dreams(&set, &cfg.client_kd)?;
                }
                Ok((acc, local))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, (acc, local)) in results.into_iter().enumerate() {
            self.record.push(epoch, Subject::Client(i), "dreams", "dream_accuracy", acc);
            self.record
                .push(epoch, Subject::Client(i), "train", "local_training", if local { 1.0 } else { 0.0 });
        }
        Ok(y)
    }
}

fn label_entropy(p: &Tensor) -> f64 {
    let n = p.rows().max(1) as f64;
    -p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / n
}

/// Warmup, then `N` outer epochs of the full protocol.
pub fn run_codream(scenario: &Scenario, seed: u64) -> Result<crate::metrics::MetricsRecord> {
    let cfg = &scenario.round;
    let mut fed = FederationState::new(scenario, seed, Method::Codream)?;
    fed.run_warmup(cfg.warmup_epochs, &cfg.local)?;
    fed.log_accuracy(0, true)?;
    for epoch in 1..=cfg.epochs {
        let out = fed.run_codream_round(cfg, epoch)?;
        fed.record
            .push(epoch, Subject::SERVER, "dreams", "extraction_loss", out.extraction_loss);
        fed.record
            .push(epoch, Subject::SERVER, "dreams", "dream_logit_entropy", dream_entropy(&fed.server, &out.dreams)?);
        fed.log_accuracy(epoch, true)?;
    }
    Ok(fed.finish())
}

fn dream_entropy(model: &Model, x: &Tensor) -> Result<f64> {
    mean_entropy(&model.logits(x)?)
}
