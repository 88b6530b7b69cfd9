use rayon::prelude::*;

use super::{run_codream, FederationState, Method, Scenario};
use crate::acquisition::{train_on_local, train_on_soft_targets, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{Direction, MetricsRecord, Payload};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Runs `method` on the scenario. Every baseline runs warmup plus `N`
/// rounds so its round axis lines up with CoDream's.
pub fn run_baseline(method: Method, scenario: &Scenario, seed: u64) -> Result<MetricsRecord> {
    match method {
        Method::Codream => run_codream(scenario, seed),
        Method::Centralized => run_centralized(scenario, seed),
        Method::Independent => run_independent(scenario, seed),
        Method::Fedavg => run_fedavg(scenario, seed),
        Method::Avgkd => run_avgkd(scenario, seed),
    }
}

/// The server architecture trained on the union of all shards.
fn run_centralized(scenario: &Scenario, seed: u64) -> Result<MetricsRecord> {
    let cfg = &scenario.round;
    let mut fed = FederationState::new(scenario, seed, Method::Centralized)?;
    let union = {
        let feats: Vec<&Tensor> = fed.clients.iter().map(|c| &c.data.features).collect();
        let labels = fed.clients.iter().flat_map(|c| c.data.labels.iter().copied()).collect();
        crate::data::Dataset::new("union", Tensor::concat_rows(&feats)?, labels, fed.test.num_classes)?
    };
    let mut model = fed.server.clone();
    let mut rng = fed.server_rng.clone();
    let sync = |fed: &mut FederationState, model: &Model| {
        fed.server = model.clone();
        for c in &mut fed.clients {
            c.model = model.clone();
        }
    };
    if cfg.warmup_epochs > 0 {
        train_on_local(&mut model, &union, &TrainConfig { epochs: cfg.warmup_epochs, ..cfg.local }, &mut rng)?;
    }
    sync(&mut fed, &model);
    fed.log_accuracy(0, true)?;
    for epoch in 1..=cfg.epochs {
        fed.epoch = epoch;
        train_on_local(&mut model, &union, &cfg.local, &mut rng)?;
        sync(&mut fed, &model);
        fed.log_accuracy(epoch, true)?;
    }
    Ok(fed.finish())
}

/// Each client trains alone on its shard.
fn run_independent(scenario: &Scenario, seed: u64) -> Result<MetricsRecord> {
    let cfg = &scenario.round;
    let mut fed = FederationState::new(scenario, seed, Method::Independent)?;
    fed.run_warmup(cfg.warmup_epochs, &cfg.local)?;
    fed.log_accuracy(0, false)?;
    for epoch in 1..=cfg.epochs {
        fed.epoch = epoch;
        fed.clients
            .par_iter_mut()
            .map(|c| c.train_local(&cfg.local))
            .collect::<Result<Vec<_>>>()?;
        fed.log_accuracy(epoch, false)?;
    }
    Ok(fed.finish())
}

/// Parameter averaging with proportional weights. Warmup epochs are run as
/// ordinary FedAvg rounds.
fn run_fedavg(scenario: &Scenario, seed: u64) -> Result<MetricsRecord> {
    let first = &scenario.clients[0];
    if let Some(other) = scenario.clients.iter().find(|s| *s != first) {
        return Err(Error::contract(format!(
            "fedavg needs identical client architectures, got `{}` and `{}`",
            first.name, other.name
        )));
    }
    let cfg = &scenario.round;
    let mut fed = FederationState::new(scenario, seed, Method::Fedavg)?;
    let mut global = fed.clients[0].model.clone();
    let weights = crate::aggregation::client_weights(
        &fed.clients.iter().map(|c| c.data_size()).collect::<Vec<_>>(),
        crate::aggregation::WeightingScheme::Proportional,
    )?;
    let theta = global.param_count();
    let total_rounds = cfg.warmup_epochs + cfg.epochs;
    let mut round_fn = |fed: &mut FederationState, round: usize| -> Result<()> {
        for c in &mut fed.clients {
            c.model = global.clone();
            fed.record
                .ledger
                .record(round, c.id, Direction::Down, Payload::ModelParameters, theta);
        }
        fed.clients
            .par_iter_mut()
            .map(|c| c.train_local(&cfg.local))
            .collect::<Result<Vec<_>>>()?;
        for c in &fed.clients {
            fed.record
                .ledger
                .record(round, c.id, Direction::Up, Payload::ModelParameters, theta);
        }
        let models: Vec<&Model> = fed.clients.iter().map(|c| &c.model).collect();
        global = average_models(&models, &weights)?;
        fed.server = global.clone();
        for c in &mut fed.clients {
            c.model = global.clone();
        }
        Ok(())
    };
    for round in 1..=total_rounds {
        fed.epoch = round.saturating_sub(cfg.warmup_epochs);
        round_fn(&mut fed, round)?;
        if round >= cfg.warmup_epochs {
            fed.log_accuracy(round - cfg.warmup_epochs, true)?;
        }
    }
    Ok(fed.finish())
}

/// Weighted average of parameter vectors and batchnorm running statistics.
pub fn average_models(models: &[&Model], weights: &[f64]) -> Result<Model> {
    let first = models.first().ok_or_else(|| Error::invalid("average of no models"))?;
    if models.len() != weights.len() {
        return Err(Error::invalid("one weight per model required"));
    }
    let mut params = vec![0.0; first.param_count()];
    let mut stats = vec![0.0; first.running_stats_vector().len()];
    for (m, w) in models.iter().zip(weights) {
        if m.spec() != first.spec() {
            return Err(Error::contract("cannot average models of different architectures"));
        }
        for (acc, v) in params.iter_mut().zip(m.parameter_vector()) {
            *acc += w * v;
        }
        for (acc, v) in stats.iter_mut().zip(m.running_stats_vector()) {
            *acc += w * v;
        }
    }
    let mut out = first.with_parameter_vector(&params)?;
    out.load_running_stats_vector(&stats)?;
    Ok(out)
}

/// Soft targets for client `i`: the mean of its one-hot labels and every
/// peer's predictions on its inputs.
pub fn avgkd_targets(onehot: &Tensor, peer_predictions: &[Tensor]) -> Result<Tensor> {
    let k = (peer_predictions.len() + 1) as f64;
    let mut sum = onehot.clone();
    for p in peer_predictions {
        sum.axpy(1.0, p)?;
    }
    Ok(sum.scale(1.0 / k))
}

/// All-to-all model exchange; each client fits the averaged peer
/// predictions on its own data, then takes a local cross-entropy step.
fn run_avgkd(scenario: &Scenario, seed: u64) -> Result<MetricsRecord> {
    let cfg = &scenario.round;
    let mut fed = FederationState::new(scenario, seed, Method::Avgkd)?;
    fed.run_warmup(cfg.warmup_epochs, &cfg.local)?;
    fed.log_accuracy(0, false)?;
    let classes = fed.test.num_classes;
    let soft = TrainConfig { epochs: 1, ..cfg.local };
    for epoch in 1..=cfg.epochs {
        fed.epoch = epoch;
        let snapshot: Vec<Model> = fed.clients.iter().map(|c| c.model.clone()).collect();
        for (i, c) in fed.clients.iter().enumerate() {
            for (j, peer) in snapshot.iter().enumerate() {
                if i != j {
                    fed.record
                        .ledger
                        .record(epoch, c.id, Direction::PeerToPeer, Payload::ModelParameters, peer.param_count());
                }
            }
        }
        fed.clients
            .par_iter_mut()
            .enumerate()
            .map(|(i, c)| {
                let onehot = Tensor::one_hot(&c.data.labels, classes)?;
                let peers = snapshot
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, m)| m.predict_proba(&c.data.features))
                    .collect::<Result<Vec<_>>>()?;
                let targets = avgkd_targets(&onehot, &peers)?;
                train_on_soft_targets(&mut c.model, &c.data.features, &targets, &soft, &mut c.rng)?;
                c.train_local(&TrainConfig { epochs: 1, ..cfg.local })
            })
            .collect::<Result<Vec<_>>>()?;
        fed.log_accuracy(epoch, false)?;
    }
    Ok(fed.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avgkd_two_client_formula() {
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let peer = Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap();
        let next = avgkd_targets(&y, &[peer]).unwrap();
        assert!((next.data()[0] - 0.65).abs() < 1e-12);
        assert!((next.data()[1] - 0.35).abs() < 1e-12);
    }
}
