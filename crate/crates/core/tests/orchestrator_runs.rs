use codream::aggregation::{ServerScheme, WeightingScheme};
use codream::autodiff::Graph;
use codream::extraction::{extraction_loss, DreamOptimizer};
use codream::metrics::{comm_report, Direction, MetricsRecord, Payload};
use codream::nn::ArchitectureSpec;
use codream::orchestrator::{
    average_models, run_baseline, run_codream, FederationState, Method, RoundConfig, Scenario, TaskConfig,
};
use codream::Error;

const HIDDEN: &[(usize, bool)] = &[(32, true), (32, true)];

fn small_task() -> TaskConfig {
    TaskConfig {
        samples_per_client: 80,
        test_samples: 200,
        ..TaskConfig::default()
    }
}

fn quick_round() -> RoundConfig {
    RoundConfig {
        epochs: 2,
        rounds: 2,
        local_steps: 2,
        warmup_epochs: 3,
        dream_batch: 16,
        ..RoundConfig::default()
    }
}

fn mean_final(method: Method, scenario: &Scenario, seeds: std::ops::Range<u64>) -> f64 {
    let n = (seeds.end - seeds.start) as f64;
    seeds
        .map(|s| run_baseline(method, scenario, s).unwrap().final_client_accuracy().unwrap())
        .sum::<f64>()
        / n
}

#[test]
fn warmup_fits_each_iid_shard() {
    let scenario = Scenario::homogeneous(TaskConfig::default(), 4, HIDDEN, RoundConfig::default());
    let mut fed = FederationState::new(&scenario, 0, Method::Codream).unwrap();
    fed.run_warmup(20, &scenario.round.local).unwrap();
    for c in &fed.clients {
        let acc = c.accuracy(c.data()).unwrap();
        assert!(acc >= 0.7, "client {}: {acc}", c.id());
    }
}

#[test]
fn single_client_run_completes() {
    let scenario = Scenario::homogeneous(small_task(), 1, HIDDEN, quick_round());
    let record = run_codream(&scenario, 1).unwrap();
    assert!(record.final_server_accuracy().is_some());
    assert!(record.final_client_accuracy().is_some());
}

#[test]
fn one_round_matches_a_step_on_the_ensemble_loss() {
    let round = RoundConfig {
        rounds: 1,
        local_steps: 1,
        dream_optimizer: DreamOptimizer::Sgd,
        server_opt: ServerScheme::SimpleAvg,
        lr_global: 1.0,
        weighting: WeightingScheme::Uniform,
        ..quick_round()
    };
    let scenario = Scenario::homogeneous(small_task(), 3, HIDDEN, round.clone());
    let mut fed = FederationState::new(&scenario, 4, Method::Codream).unwrap();
    fed.run_warmup(3, &round.local).unwrap();
    let before = fed.clone();
    let out = fed.run_codream_round(&round, 1).unwrap();

    let k = before.clients.len() as f64;
    let mut g = Graph::new();
    let xv = g.leaf(out.initial.clone());
    let mut total = None;
    for c in &before.clients {
        let l = extraction_loss(&mut g, c.model(), Some(&before.server), xv, &round.coeffs).unwrap();
        let l = g.scale(l, 1.0 / k).unwrap();
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l).unwrap(),
        });
    }
    let grad = g.backward(total.unwrap(), &[xv]).unwrap().take(xv).unwrap();
    let mut expected = out.initial.clone();
    expected.axpy(-round.lr_local, &grad).unwrap();
    let gap = out.dreams.max_abs_diff(&expected);
    assert!(gap <= 1e-12, "gap {gap:e}");
}

#[test]
fn heterogeneous_zoo_completes_a_round() {
    let task = small_task();
    let clients = vec![
        ArchitectureSpec::new("wide", task.dims, &[(64, true)], task.classes),
        ArchitectureSpec::new("deep", task.dims, &[(16, true), (16, true), (16, true)], task.classes),
        ArchitectureSpec::new("thin", task.dims, &[(12, false)], task.classes),
    ];
    let scenario = Scenario {
        server: ArchitectureSpec::new("server", task.dims, HIDDEN, task.classes),
        task,
        clients,
        round: RoundConfig {
            epochs: 1,
            ..quick_round()
        },
    };
    let record = run_codream(&scenario, 2).unwrap();
    assert!(record.final_client_accuracy().is_some());
    let err = run_baseline(Method::Fedavg, &scenario, 2).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn adaptive_teaching_changes_the_dreams() {
    let scenario = Scenario::homogeneous(small_task(), 2, HIDDEN, quick_round());
    let mut fed = FederationState::new(&scenario, 5, Method::Codream).unwrap();
    fed.run_warmup(3, &scenario.round.local).unwrap();
    let mut other = fed.clone();
    let plain = fed.run_codream_round(&scenario.round, 1).unwrap();
    let adaptive_cfg = RoundConfig {
        adaptive: true,
        ..scenario.round.clone()
    };
    let adaptive = other.run_codream_round(&adaptive_cfg, 1).unwrap();
    assert_eq!(plain.initial.data(), adaptive.initial.data());
    assert!(plain.dreams.max_abs_diff(&adaptive.dreams) > 1e-6);
}

#[test]
fn averaging_identical_models_returns_the_model() {
    let scenario = Scenario::homogeneous(small_task(), 3, HIDDEN, quick_round());
    let mut fed = FederationState::new(&scenario, 6, Method::Fedavg).unwrap();
    fed.run_warmup(2, &scenario.round.local).unwrap();
    let m = fed.clients[0].model();
    let avg = average_models(&[m, m, m], &[0.2, 0.5, 0.3]).unwrap();
    for (a, b) in avg.parameter_vector().iter().zip(m.parameter_vector()) {
        assert!((a - b).abs() <= 1e-12);
    }
    for (a, b) in avg.running_stats_vector().iter().zip(m.running_stats_vector()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn pseudo_gradient_upload_matches_the_formula() {
    let task = TaskConfig {
        dims: 64,
        samples_per_client: 40,
        test_samples: 40,
        ..TaskConfig::default()
    };
    let round = RoundConfig {
        epochs: 1,
        rounds: 10,
        local_steps: 1,
        warmup_epochs: 0,
        dream_batch: 32,
        ..RoundConfig::default()
    };
    let record = run_codream(&Scenario::homogeneous(task, 1, &[(8, false)], round), 0).unwrap();
    assert_eq!(record.ledger.bytes_by(Direction::Up, Payload::PseudoGradient), 163_840);
}

fn sized_scenario(hidden: usize) -> Scenario {
    let task = TaskConfig {
        classes: 10,
        dims: 64,
        samples_per_client: 30,
        test_samples: 30,
        ..TaskConfig::default()
    };
    let round = RoundConfig {
        epochs: 1,
        rounds: 3,
        local_steps: 1,
        warmup_epochs: 0,
        client_kd: codream::acquisition::TrainConfig {
            epochs: 1,
            ..RoundConfig::default().client_kd
        },
        ..RoundConfig::default()
    };
    Scenario::homogeneous(task, 2, &[(hidden, false)], round)
}

#[test]
fn codream_traffic_ignores_model_size() {
    let small = sized_scenario(14);
    let large = sized_scenario(1500);
    let (ps, pl) = (small.clients[0].param_count(), large.clients[0].param_count());
    assert!(pl >= 100 * ps, "{ps} vs {pl}");

    let cs = comm_report(&run_codream(&small, 0).unwrap());
    let cl = comm_report(&run_codream(&large, 0).unwrap());
    assert_eq!(cs.per_round_per_client, cl.per_round_per_client);
    assert_eq!(cs.total_bytes, cl.total_bytes);

    let fs = comm_report(&run_baseline(Method::Fedavg, &small, 0).unwrap());
    let fl = comm_report(&run_baseline(Method::Fedavg, &large, 0).unwrap());
    assert_eq!(fs.bytes_per_round_per_client, (2 * ps * 8) as f64);
    assert_eq!(fl.bytes_per_round_per_client, (2 * pl * 8) as f64);
    assert!(fl.bytes_per_round_per_client / fs.bytes_per_round_per_client >= 100.0);
}

#[test]
fn empty_ledger_reports_zero() {
    let record = MetricsRecord::new("codream", 0, vec![("a".into(), 10)], 2);
    let row = comm_report(&record);
    assert_eq!(row.total_bytes, 0);
    assert_eq!(row.bytes_per_round_per_client, 0.0);
}

#[test]
fn masked_aggregation_reproduces_plain_dreams() {
    let scenario = Scenario::homogeneous(small_task(), 4, HIDDEN, quick_round());
    let mut fed = FederationState::new(&scenario, 8, Method::Codream).unwrap();
    fed.run_warmup(3, &scenario.round.local).unwrap();
    let mut masked = fed.clone();
    let plain = fed.run_codream_round(&scenario.round, 1).unwrap();
    let secure_cfg = RoundConfig {
        secure_aggregation: true,
        ..scenario.round.clone()
    };
    let secure = masked.run_codream_round(&secure_cfg, 1).unwrap();
    let gap = plain.dreams.max_abs_diff(&secure.dreams);
    assert!(gap <= 1e-9, "gap {gap:e}");
}

#[test]
fn runs_are_deterministic() {
    let scenario = Scenario::homogeneous(small_task(), 3, HIDDEN, quick_round());
    for method in Method::ALL {
        let a = run_baseline(method, &scenario, 11).unwrap();
        let b = run_baseline(method, &scenario, 11).unwrap();
        assert_eq!(a, b, "{}", method.name());
    }
}

#[test]
fn centralized_beats_independent() {
    let round = RoundConfig {
        epochs: 10,
        ..RoundConfig::default()
    };
    let scenario = Scenario::homogeneous(TaskConfig::default(), 4, HIDDEN, round);
    let central = mean_final(Method::Centralized, &scenario, 0..3);
    let indep = mean_final(Method::Independent, &scenario, 0..3);
    println!("centralized {central:.4} independent {indep:.4}");
    assert!(central >= indep);
}

#[test]
fn codream_beats_independent_on_iid_shards() {
    let scenario = Scenario::homogeneous(TaskConfig::default(), 4, HIDDEN, RoundConfig::default());
    let co = mean_final(Method::Codream, &scenario, 0..3);
    let indep = mean_final(Method::Independent, &scenario, 0..3);
    println!("codream {co:.4} independent {indep:.4}");
    assert!(co >= indep + 0.02);
}

#[test]
fn codream_beats_independent_on_skewed_shards() {
    let task = TaskConfig {
        alpha: 0.1,
        ..TaskConfig::default()
    };
    let round = RoundConfig {
        epochs: 20,
        ..RoundConfig::default()
    };
    let scenario = Scenario::homogeneous(task, 4, HIDDEN, round);
    let co = mean_final(Method::Codream, &scenario, 0..3);
    let indep = mean_final(Method::Independent, &scenario, 0..3);
    println!("codream {co:.4} independent {indep:.4}");
    assert!(co > indep);
}
