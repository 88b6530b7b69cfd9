//! Experiment configuration: a TOML document with one section per module.

use std::path::{Path, PathBuf};

use codream::acquisition::TrainConfig;
use codream::aggregation::{ServerScheme, WeightingScheme};
use codream::extraction::{DreamOptimizer, ExtractionCoefficients};
use codream::nn::ArchitectureSpec;
use codream::optim::AdamConfig;
use codream::orchestrator::{AcquisitionPlacement, Method, RoundConfig, Scenario, TaskConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsSection {
    pub count: usize,
    /// Hidden layers shared by all clients, e.g. `"32bn,16"`.
    pub hidden: String,
    /// Per-client hidden layers; overrides `hidden` and `count` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architectures: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub hidden: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DreamOptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub epochs: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    pub dream_batch: usize,
    pub warmup_epochs: usize,
    pub weighting: WeightingScheme,
    pub server_opt: ServerScheme,
    pub dream_optimizer: DreamOptimizerKind,
    pub adaptive: bool,
    pub buffer_capacity: usize,
    pub placement: AcquisitionPlacement,
    pub dreams_before_local: bool,
    pub secure_aggregation: bool,
    pub guard_window: usize,
    pub guard_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub task: TaskConfig,
    pub clients: ClientsSection,
    pub server: ServerSection,
    pub protocol: ProtocolSection,
    pub extraction: ExtractionCoefficients,
    pub client_kd: TrainConfig,
    pub server_kd: TrainConfig,
    pub local: TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.experiment.seeds.is_empty() {
            return Err(ConfigError("experiment.seeds must list at least one seed".into()));
        }
        self.scenario()?;
        Ok(())
    }

    /// The default desk configuration.
    pub fn desk() -> Self {
        let round = RoundConfig::default();
        ExperimentConfig {
            experiment: ExperimentSection {
                method: Method::Codream,
                seeds: vec![0, 1, 2, 3, 4],
                out: PathBuf::from("runs/desk"),
            },
            task: TaskConfig::default(),
            clients: ClientsSection {
                count: 4,
                hidden: "32bn,32bn".into(),
                architectures: None,
            },
            server: ServerSection {
                hidden: "32bn,32bn".into(),
            },
            protocol: ProtocolSection {
                epochs: round.epochs,
                rounds: round.rounds,
                local_steps: round.local_steps,
                lr_local: round.lr_local,
                lr_global: round.lr_global,
                dream_batch: round.dream_batch,
                warmup_epochs: round.warmup_epochs,
                weighting: round.weighting,
                server_opt: round.server_opt,
                dream_optimizer: DreamOptimizerKind::Adam,
                adaptive: round.adaptive,
                buffer_capacity: round.buffer_capacity,
                placement: round.placement,
                dreams_before_local: round.dreams_before_local,
                secure_aggregation: round.secure_aggregation,
                guard_window: round.guard_window,
                guard_threshold: round.guard_threshold,
            },
            extraction: round.coeffs,
            client_kd: round.client_kd,
            server_kd: round.server_kd,
            local: round.local,
        }
    }

    pub fn round(&self) -> RoundConfig {
        let p = &self.protocol;
        RoundConfig {
            epochs: p.epochs,
            rounds: p.rounds,
            local_steps: p.local_steps,
            lr_local: p.lr_local,
            lr_global: p.lr_global,
            dream_batch: p.dream_batch,
            warmup_epochs: p.warmup_epochs,
            coeffs: self.extraction,
            weighting: p.weighting,
            server_opt: p.server_opt,
            dream_optimizer: match p.dream_optimizer {
                DreamOptimizerKind::Adam => DreamOptimizer::Adam(AdamConfig::DREAM),
                DreamOptimizerKind::Sgd => DreamOptimizer::Sgd,
            },
            adaptive: p.adaptive,
            buffer_capacity: p.buffer_capacity,
            placement: p.placement,
            dreams_before_local: p.dreams_before_local,
            secure_aggregation: p.secure_aggregation,
            client_kd: self.client_kd,
            server_kd: self.server_kd,
            local: self.local,
            guard_window: p.guard_window,
            guard_threshold: p.guard_threshold,
        }
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let t = &self.task;
        let arch = |name: String, hidden: &str, key: &str| {
            ArchitectureSpec::parse(&name, t.dims, hidden, t.classes).map_err(|e| ConfigError(format!("{key}: {e}")))
        };
        let clients = match &self.clients.architectures {
            Some(list) => {
                if list.is_empty() {
                    return Err(ConfigError("clients.architectures must not be empty".into()));
                }
                list.iter()
                    .enumerate()
                    .map(|(i, h)| arch(format!("client{i}"), h, "clients.architectures"))
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => {
                if self.clients.count == 0 {
                    return Err(ConfigError("clients.count must be at least 1".into()));
                }
                let spec = arch("mlp".into(), &self.clients.hidden, "clients.hidden")?;
                vec![spec; self.clients.count]
            }
        };
        let server = arch("server".into(), &self.server.hidden, "server.hidden")?;
        let scenario = Scenario {
            task: t.clone(),
            clients,
            server,
            round: self.round(),
        };
        scenario
            .validate()
            .map_err(|e| ConfigError(format!("invalid configuration: {e}")))?;
        Ok(scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trips() {
        let cfg = ExperimentConfig::desk();
        let text = cfg.to_toml();
        assert!(text.contains("alpha = inf"));
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = ExperimentConfig::desk().to_toml().replace("[task]\n", "[task]\nbogus = 1\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.0.contains("bogus"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let text = ExperimentConfig::desk().to_toml().replace("local_steps = 5\n", "");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.0.contains("local_steps"), "{err}");
    }

    #[test]
    fn range_errors_name_the_key() {
        let text = ExperimentConfig::desk().to_toml().replace("rounds = 10\n", "rounds = 0\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.0.contains("rounds"), "{err}");
    }
}
