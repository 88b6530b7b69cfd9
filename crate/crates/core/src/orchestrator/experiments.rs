//! Paired experiments that compare protocol variants under one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codream::{collaborative_dream, ensemble_labels};
use super::{derive_seed, Client, FederationState, Method, Scenario};
use crate::acquisition::{train_on_dreams, SoftLabelSet};
use crate::data::DreamBuffer;
use crate::error::Result;
use crate::metrics::CommLedger;
use crate::nn::Model;

const ABLATION_STUDENT: u64 = 300;
const ABLATION_RNG: u64 = 301;

/// Test accuracy of two students distilled from the same warmed-up clients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollaborationResult {
    pub collaborative: f64,
    pub independent: f64,
    pub teacher_mean: f64,
}

struct Student {
    model: Model,
    buffer: DreamBuffer,
    rng: ChaCha8Rng,
}

impl Student {
    fn learn(&mut self, cfg: &crate::acquisition::TrainConfig) -> Result<()> {
        let set = SoftLabelSet::from_buffer(&self.buffer);
        train_on_dreams(&mut self.model, &set, cfg, &mut self.rng)?;
        Ok(())
    }
}

/// Co-dreams against independently optimized dreams.
///
/// Each epoch starts both arms from the same random batch. The
/// collaborative arm optimizes it with every client; in the independent arm
/// each client optimizes its own copy alone and the results are pooled.
/// All dreams are labelled by the client ensemble, and each arm trains its
/// own server-architecture student from the same initialization. Clients
/// stay frozen after warmup.
pub fn collaboration_ablation(scenario: &Scenario, seed: u64) -> Result<CollaborationResult> {
    let cfg = &scenario.round;
    let mut fed = FederationState::new(scenario, seed, Method::Codream)?;
    fed.run_warmup(cfg.warmup_epochs, &cfg.local)?;
    let k = fed.clients.len();
    let init = Model::new(&scenario.server, derive_seed(seed, ABLATION_STUDENT))?;
    let mk = |capacity: usize| -> Result<Student> {
        Ok(Student {
            model: init.clone(),
            buffer: DreamBuffer::new(capacity)?,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, ABLATION_RNG)),
        })
    };
    let mut co = mk(cfg.buffer_capacity)?;
    let mut solo = mk(cfg.buffer_capacity * k)?;
    let teachers: Vec<&Client> = fed.clients.iter().collect();
    let mut ledger = CommLedger::default();
    for epoch in 1..=cfg.epochs {
        let x0 = fed.fresh_dreams(epoch, cfg);
        let (x, _) = collaborative_dream(&teachers, &fed.weights, &co.model, x0.clone(), cfg, epoch, None, &mut ledger)?;
        let y = ensemble_labels(&teachers, &fed.weights, &x)?;
        co.buffer.push(x, y, epoch)?;
        co.learn(&cfg.server_kd)?;

        for (t, w) in teachers.iter().zip(&fed.weights) {
            let (x, _) = collaborative_dream(&[*t], &[*w], &solo.model, x0.clone(), cfg, epoch, None, &mut ledger)?;
            let y = ensemble_labels(&teachers, &fed.weights, &x)?;
            solo.buffer.push(x, y, epoch)?;
        }
        solo.learn(&cfg.server_kd)?;
    }
    let test = &fed.test;
    let teacher_mean = teachers
        .iter()
        .map(|c| c.accuracy(test))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum::<f64>()
        / k as f64;
    Ok(CollaborationResult {
        collaborative: co.model.accuracy(&test.features, &test.labels)?,
        independent: solo.model.accuracy(&test.features, &test.labels)?,
        teacher_mean,
    })
}

/// Test accuracy of a frozen single teacher and of the server-architecture
/// student distilled only from that teacher's dreams.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferResult {
    pub teacher: f64,
    pub student: f64,
}

/// Single-client run in which the teacher is trained during warmup and then
/// frozen, so the student learns from dreams alone.
pub fn knowledge_transfer(scenario: &Scenario, seed: u64) -> Result<TransferResult> {
    let mut s = scenario.clone();
    s.clients.truncate(1);
    s.round.client_kd.epochs = 0;
    s.round.local.epochs = 0;
    let warm = scenario.round.local;
    let cfg = s.round.clone();
    let mut fed = FederationState::new(&s, seed, Method::Codream)?;
    fed.run_warmup(cfg.warmup_epochs, &warm)?;
    let teacher = fed.clients[0].accuracy(&fed.test)?;
    for epoch in 1..=cfg.epochs {
        fed.run_codream_round(&cfg, epoch)?;
    }
    let student = fed.server.accuracy(&fed.test.features, &fed.test.labels)?;
    Ok(TransferResult { teacher, student })
}
