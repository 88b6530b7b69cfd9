//! The protocol driver: federation state, warmup, collaborative dreaming
//! rounds, the baselines, and communication accounting.

mod baselines;
mod codream;
pub mod experiments;

use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{train_on_dreams, train_on_local, DivergenceGuard, DreamBnMode, SoftLabelSet, TrainConfig};
use crate::aggregation::{ServerScheme, WeightingScheme};
use crate::data::{dirichlet_partition, gen_gaussian_mixture, Concentration, Dataset, DreamBuffer, DEFAULT_BUFFER_CAPACITY};
use crate::error::{Error, Result};
use crate::extraction::{DreamOptimizer, ExtractionCoefficients, LocalDreamConfig, LocalDreamOutcome};
use crate::metrics::{MetricsRecord, Subject};
use crate::nn::{ArchitectureSpec, Model};
use crate::tensor::Tensor;

pub use baselines::{average_models, avgkd_targets, run_baseline};
pub use codream::{collaborative_dream, dream_round, ensemble_labels, run_codream, RoundOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Codream,
    Centralized,
    Independent,
    Fedavg,
    Avgkd,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Codream,
        Method::Centralized,
        Method::Independent,
        Method::Fedavg,
        Method::Avgkd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Codream => "codream",
            Method::Centralized => "centralized",
            Method::Independent => "independent",
            Method::Fedavg => "fedavg",
            Method::Avgkd => "avgkd",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Where knowledge acquisition happens within an outer epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionPlacement {
    /// Once, after the dreams have gone through all global rounds.
    AfterDreams,
    /// After every global aggregation round.
    EveryRound,
}

/// Synthetic classification task shared by every client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub samples_per_client: usize,
    pub test_samples: usize,
    /// Dirichlet concentration; `inf` for IID shards.
    pub alpha: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            classes: 5,
            dims: 8,
            separation: 3.0,
            samples_per_client: 200,
            test_samples: 1000,
            alpha: f64::INFINITY,
        }
    }
}

/// Every knob of the protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Outer epochs N: one fresh dream batch each.
    pub epochs: usize,
    /// Global aggregation rounds R per dream batch.
    pub rounds: usize,
    /// Local dream steps M per global round.
    pub local_steps: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    pub dream_batch: usize,
    pub warmup_epochs: usize,
    pub coeffs: ExtractionCoefficients,
    pub weighting: WeightingScheme,
    pub server_opt: ServerScheme,
    pub dream_optimizer: DreamOptimizer,
    pub adaptive: bool,
    pub buffer_capacity: usize,
    pub placement: AcquisitionPlacement,
    /// Distil on dreams before local cross-entropy (otherwise after).
    pub dreams_before_local: bool,
    pub secure_aggregation: bool,
    pub client_kd: TrainConfig,
    pub server_kd: TrainConfig,
    pub local: TrainConfig,
    pub guard_window: usize,
    pub guard_threshold: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            epochs: 30,
            rounds: 10,
            local_steps: 5,
            lr_local: 0.05,
            lr_global: 1.0,
            dream_batch: 32,
            warmup_epochs: 20,
            coeffs: ExtractionCoefficients::default(),
            weighting: WeightingScheme::Proportional,
            server_opt: ServerScheme::SimpleAvg,
            dream_optimizer: DreamOptimizer::default(),
            adaptive: false,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            placement: AcquisitionPlacement::AfterDreams,
            dreams_before_local: true,
            secure_aggregation: false,
            client_kd: TrainConfig {
                epochs: 2,
                lr: 0.05,
                momentum: 0.9,
                batch_size: 32,
                temperature: 1.0,
                dream_bn: DreamBnMode::Frozen,
            },
            server_kd: TrainConfig {
                epochs: 2,
                lr: 0.05,
                momentum: 0.9,
                batch_size: 32,
                temperature: 1.0,
                dream_bn: DreamBnMode::Batch,
            },
            local: TrainConfig {
                epochs: 1,
                lr: 0.05,
                momentum: 0.9,
                batch_size: 32,
                temperature: 1.0,
                dream_bn: DreamBnMode::Frozen,
            },
            guard_window: 3,
            guard_threshold: 0.1,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("rounds", self.rounds),
            ("local_steps", self.local_steps),
            ("dream_batch", self.dream_batch),
            ("buffer_capacity", self.buffer_capacity),
            ("guard_window", self.guard_window),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("lr_local", self.lr_local), ("lr_global", self.lr_global)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, t) in [("client_kd", &self.client_kd), ("server_kd", &self.server_kd), ("local", &self.local)] {
            if !(t.lr >= 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) {
                return Err(Error::invalid(format!("{name}: lr must be >= 0 and momentum in [0, 1)")));
            }
            if !(t.temperature > 0.0) || t.batch_size == 0 {
                return Err(Error::invalid(format!("{name}: temperature and batch_size must be positive")));
            }
        }
        if !(self.guard_threshold >= 0.0) {
            return Err(Error::invalid("guard_threshold must be nonnegative"));
        }
        self.coeffs.validate()
    }

    pub fn local_dream(&self) -> LocalDreamConfig {
        LocalDreamConfig {
            steps: self.local_steps,
            lr: self.lr_local,
            coeffs: self.coeffs,
            optimizer: self.dream_optimizer,
            adaptive: self.adaptive,
        }
    }
}

/// A complete experiment: task, client and server architectures, protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub task: TaskConfig,
    pub clients: Vec<ArchitectureSpec>,
    pub server: ArchitectureSpec,
    pub round: RoundConfig,
}

impl Scenario {
    /// `k` clients sharing one architecture, which the server also uses.
    pub fn homogeneous(task: TaskConfig, k: usize, hidden: &[(usize, bool)], round: RoundConfig) -> Self {
        let spec = ArchitectureSpec::new("mlp", task.dims, hidden, task.classes);
        Scenario {
            clients: vec![spec.clone(); k],
            server: spec,
            task,
            round,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.round.validate()?;
        if self.clients.is_empty() {
            return Err(Error::invalid("at least one client is required"));
        }
        for s in self.clients.iter().chain(std::iter::once(&self.server)) {
            s.validate()?;
            if s.input_dim != self.task.dims || s.num_classes != self.task.classes {
                return Err(Error::invalid(format!(
                    "architecture `{}` is {} -> {}, task is {} -> {}",
                    s.name, s.input_dim, s.num_classes, self.task.dims, self.task.classes
                )));
            }
        }
        let t = &self.task;
        if t.samples_per_client == 0 || t.test_samples < t.classes {
            return Err(Error::invalid("samples_per_client must be positive and test_samples >= classes"));
        }
        Concentration::from_f64(t.alpha)?;
        Ok(())
    }

    pub fn architectures(&self) -> Vec<(String, usize)> {
        self.clients
            .iter()
            .chain(std::iter::once(&self.server))
            .map(|s| (s.name.clone(), s.param_count()))
            .collect()
    }
}

/// SplitMix64 finalizer over `(base, tag)`; used to derive independent
/// stream seeds from the run seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod tags {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SERVER_MODEL: u64 = 4;
    pub const SERVER_RNG: u64 = 5;
    pub const DREAMS: u64 = 6;
    pub const MASKS: u64 = 7;
    pub const CLIENT_MODEL: u64 = 100;
    pub const CLIENT_RNG: u64 = 200;
}

/// Training data split across clients plus a shared test set.
#[derive(Clone, Debug)]
pub struct FederatedData {
    pub shards: Vec<Dataset>,
    pub test: Dataset,
}

impl FederatedData {
    pub fn generate(task: &TaskConfig, clients: usize, seed: u64) -> Result<Self> {
        let total = task.samples_per_client * clients;
        let train = gen_gaussian_mixture(
            total,
            task.classes,
            task.dims,
            task.separation,
            derive_seed(seed, tags::TRAIN_DATA),
        )?;
        let test = gen_gaussian_mixture(
            task.test_samples,
            task.classes,
            task.dims,
            task.separation,
            derive_seed(seed, tags::TEST_DATA),
        )?;
        let shards = if clients == 1 {
            vec![train]
        } else {
            let plan = dirichlet_partition(
                &train.labels,
                clients,
                Concentration::from_f64(task.alpha)?,
                derive_seed(seed, tags::PARTITION),
            )?;
            plan.clients.iter().map(|idx| train.subset(idx)).collect()
        };
        Ok(FederatedData { shards, test })
    }

    pub fn union(&self) -> Result<Dataset> {
        let feats: Vec<&Tensor> = self.shards.iter().map(|s| &s.features).collect();
        let labels = self.shards.iter().flat_map(|s| s.labels.iter().copied()).collect();
        Dataset::new("union", Tensor::concat_rows(&feats)?, labels, self.test.num_classes)
    }
}

/// A participant. Only pseudo-gradients and soft labels leave a client
/// during the protocol; the model is readable for evaluation.
#[derive(Clone, Debug)]
pub struct Client {
    id: usize,
    model: Model,
    data: Dataset,
    rng: ChaCha8Rng,
    guard: DivergenceGuard,
}

impl Client {
    pub fn new(id: usize, model: Model, data: Dataset, rng_seed: u64, guard: DivergenceGuard) -> Self {
        Client {
            id,
            model,
            data,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            guard,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn data_size(&self) -> usize {
        self.data.len()
    }

    pub fn guard(&self) -> &DivergenceGuard {
        &self.guard
    }

    /// Local extraction on the broadcast dreams.
    pub fn dream(&self, batch: &crate::extraction::DreamBatch, server: &Model, cfg: &LocalDreamConfig) -> Result<LocalDreamOutcome> {
        crate::extraction::local_dream_update(&self.model, Some(server), batch, cfg, self.id)
    }

    /// Soft predictions on the dreams.
    pub fn soft_labels(&self, x: &Tensor) -> Result<Tensor> {
        self.model.predict_proba(x)
    }

    pub fn train_local(&mut self, cfg: &TrainConfig) -> Result<()> {
        if cfg.epochs > 0 {
            train_on_local(&mut self.model, &self.data, cfg, &mut self.rng)?;
        }
        Ok(())
    }

    pub fn train_dreams(&mut self, dreams: &SoftLabelSet, cfg: &TrainConfig) -> Result<()> {
        if cfg.epochs > 0 && !dreams.is_empty() {
            train_on_dreams(&mut self.model, dreams, cfg, &mut self.rng)?;
        }
        Ok(())
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        self.model.accuracy(&ds.features, &ds.labels)
    }
}

/// Everything the protocol carries between outer epochs.
#[derive(Clone, Debug)]
pub struct FederationState {
    pub clients: Vec<Client>,
    pub server: Model,
    pub buffer: DreamBuffer,
    pub test: Dataset,
    pub weights: Vec<f64>,
    pub epoch: usize,
    pub seed: u64,
    server_rng: ChaCha8Rng,
    pub record: MetricsRecord,
}

impl FederationState {
    pub fn new(scenario: &Scenario, seed: u64, method: Method) -> Result<Self> {
        scenario.validate()?;
        let k = scenario.clients.len();
        let data = FederatedData::generate(&scenario.task, k, seed)?;
        let cfg = &scenario.round;
        let clients = scenario
            .clients
            .iter()
            .zip(data.shards)
            .enumerate()
            .map(|(i, (spec, shard))| {
                let model = Model::new(spec, derive_seed(seed, tags::CLIENT_MODEL + i as u64))?;
                let guard = DivergenceGuard::new(cfg.guard_window, cfg.guard_threshold)?;
                Ok(Client::new(i, model, shard, derive_seed(seed, tags::CLIENT_RNG + i as u64), guard))
            })
            .collect::<Result<Vec<_>>>()?;
        let sizes: Vec<usize> = clients.iter().map(Client::data_size).collect();
        let weights = crate::aggregation::client_weights(&sizes, cfg.weighting)?;
        Ok(FederationState {
            server: Model::new(&scenario.server, derive_seed(seed, tags::SERVER_MODEL))?,
            buffer: DreamBuffer::new(cfg.buffer_capacity)?,
            test: data.test,
            weights,
            epoch: 0,
            seed,
            server_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, tags::SERVER_RNG)),
            record: MetricsRecord::new(method.name(), seed, scenario.architectures(), k),
            clients,
        })
    }

    /// Local cross-entropy pre-training on each client's shard.
    pub fn run_warmup(&mut self, epochs: usize, local: &TrainConfig) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let cfg = TrainConfig { epochs, ..*local };
        self.clients
            .par_iter_mut()
            .map(|c| c.train_local(&cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Test accuracy of every client and, when it is trained, the server.
    pub fn log_accuracy(&mut self, round: usize, with_server: bool) -> Result<f64> {
        let accs = self
            .clients
            .par_iter()
            .map(|c| c.accuracy(&self.test))
            .collect::<Result<Vec<_>>>()?;
        for (i, acc) in accs.iter().enumerate() {
            self.record.push(round, Subject::Client(i), "test", "accuracy", *acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        if with_server {
            let server = self.server.accuracy(&self.test.features, &self.test.labels)?;
            self.record.push(round, Subject::SERVER, "test", "accuracy", server);
        }
        self.record.push(round, Subject::SERVER, "test", "mean_client_accuracy", mean);
        Ok(mean)
    }

    /// Appends the headline metrics and hands back the record.
    pub fn finish(mut self) -> MetricsRecord {
        let round = self.epoch;
        if let Some(mean) = self.record.last(Subject::SERVER, "mean_client_accuracy") {
            self.record
                .push(round, Subject::SERVER, "test", crate::metrics::FINAL_CLIENT_ACCURACY, mean);
        }
        if let Some(server) = self.record.last(Subject::SERVER, "accuracy") {
            self.record
                .push(round, Subject::SERVER, "test", crate::metrics::FINAL_SERVER_ACCURACY, server);
        }
        self.record
    }
}
