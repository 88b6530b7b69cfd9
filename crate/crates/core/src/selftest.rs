//! Fast invariant checks shared by the `selftest` command and the test
//! suites: gradient checks, analytic loss values, aggregation equivalence,
//! mask cancellation and partition invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acquisition::kd_loss;
use crate::aggregation::{
    aggregate_deltas, client_weights, secure_masked_aggregate, PairSeeds, PseudoGradient, ServerOptimizerState,
    ServerScheme, WeightingScheme,
};
use crate::autodiff::{finite_difference_check, Graph};
use crate::data::{dirichlet_partition, Concentration};
use crate::error::{Error, Result};
use crate::extraction::{
    adv_regularizer, bn_regularizer, entropy_of_outputs, extraction_loss, local_dream_update, DreamBatch,
    DreamOptimizer, ExtractionCoefficients, LocalDreamConfig,
};
use crate::nn::{ArchitectureSpec, BatchNormState, Mode, Model};
use crate::tensor::Tensor;

pub const FD_EPSILON: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// A small model whose running statistics have been fit to shifted data.
pub fn calibrated_model(input_dim: usize, classes: usize, seed: u64) -> Result<Model> {
    let spec = ArchitectureSpec::new("probe", input_dim, &[(6, true), (5, true)], classes);
    let mut m = Model::new(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let x = Tensor::randn(&[16, input_dim], &mut rng).map(|v| 0.7 * v + 0.5);
    for _ in 0..10 {
        m.forward(&x, Mode::Train)?;
    }
    Ok(m)
}

/// Random probability rows with a few exact zeros.
pub fn random_simplex<R: Rng + ?Sized>(rows: usize, classes: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..classes)
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() + 1e-3 })
            .collect();
        if row.iter().all(|&v| v == 0.0) {
            row[0] = 1.0;
        }
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / s));
    }
    Tensor::new(&[rows, classes], data).expect("finite simplex rows")
}

/// Worst finite-difference error of every extraction and acquisition loss
/// over `trials` seeded draws, by loss name.
pub fn gradient_check_errors(trials: usize, base_seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut worst = [
        ("entropy_of_outputs", 0.0f64),
        ("bn_regularizer", 0.0),
        ("adv_regularizer", 0.0),
        ("extraction_loss", 0.0),
        ("adaptive_student_loss", 0.0),
        ("kd_loss", 0.0),
        ("kd_loss_parameters", 0.0),
    ];
    for t in 0..trials {
        let seed = base_seed.wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, c) = (4, 3, 3);
        let teacher = calibrated_model(d, c, seed)?;
        let student = calibrated_model(d, c, seed.wrapping_add(7919))?;
        let x = Tensor::randn(&[n, d], &mut rng);
        let logits = Tensor::randn(&[n, c], &mut rng).scale(2.0);
        let other = Tensor::randn(&[n, c], &mut rng).scale(2.0);
        let targets = random_simplex(n, c, &mut rng);
        let tau = 0.5 + 2.5 * rng.random::<f64>();

        let errs = [
            finite_difference_check(entropy_of_outputs, &logits, FD_EPSILON)?,
            finite_difference_check(
                |g, xv| {
                    let out = teacher.forward_graph(g, xv, Mode::Eval, crate::nn::ParamRole::Frozen)?;
                    bn_regularizer(g, &out.batch_stats, teacher.bn_states())
                },
                &x,
                FD_EPSILON,
            )?,
            finite_difference_check(
                |g, v| {
                    let o = g.constant(other.clone());
                    adv_regularizer(g, v, o)
                },
                &logits,
                FD_EPSILON,
            )?,
            finite_difference_check(
                |g, xv| extraction_loss(g, &teacher, Some(&student), xv, &ExtractionCoefficients::default()),
                &x,
                FD_EPSILON,
            )?,
            finite_difference_check(
                |g, xv| {
                    let coeffs = ExtractionCoefficients::default().without_adv();
                    extraction_loss(g, &student, None, xv, &coeffs)
                },
                &x,
                FD_EPSILON,
            )?,
            finite_difference_check(|g, v| kd_loss(g, v, &targets, tau), &logits, FD_EPSILON)?,
            parameter_fd_error(&student, &x, &targets, tau)?,
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            w.1 = w.1.max(e);
        }
    }
    Ok(worst.to_vec())
}

/// Denominator floor for the parameter-space check. Biases feeding a
/// batchnorm layer have an exactly zero gradient in train mode, where the
/// central difference only sees roundoff of order 1e-11.
pub const PARAMETER_FD_FLOOR: f64 = 1e-5;

/// Finite-difference check of the distillation loss with respect to model
/// parameters, batchnorm in train mode.
fn parameter_fd_error(model: &Model, x: &Tensor, targets: &Tensor, tau: f64) -> Result<f64> {
    let loss = |m: &Model| -> Result<f64> {
        Ok(m.parameter_gradient(x, |g, out| kd_loss(g, out.logits, targets, tau))?.0)
    };
    let (_, grad, _) = model.parameter_gradient(x, |g, out| kd_loss(g, out.logits, targets, tau))?;
    let theta = model.parameter_vector();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += FD_EPSILON;
        let mut minus = theta.clone();
        minus[i] -= FD_EPSILON;
        let fd = (loss(&model.with_parameter_vector(&plus)?)? - loss(&model.with_parameter_vector(&minus)?)?)
            / (2.0 * FD_EPSILON);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(PARAMETER_FD_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Analytic loss values; each entry is `(name, computed, expected)`.
pub fn analytic_values() -> Result<Vec<(&'static str, f64, f64)>> {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros(&[1, 4]));
    let h = entropy_of_outputs(&mut g, uniform)?;

    let p = g.constant(Tensor::from_rows(&[vec![800.0, 0.0]])?);
    let q = g.constant(Tensor::from_rows(&[vec![0.0, 800.0]])?);
    let jsd = adv_regularizer(&mut g, p, q)?;

    let mut state = BatchNormState::new(2);
    state.running_mean = vec![0.3, -1.0];
    state.running_var = vec![0.5, 2.0];
    let mean = g.constant(Tensor::from_rows(&[vec![0.3, -1.0]])?);
    let var = g.constant(Tensor::from_rows(&[vec![0.5, 2.0]])?);
    let rbn = bn_regularizer(&mut g, &[(mean, var)], std::slice::from_ref(&state))?;

    let target = Tensor::from_rows(&[vec![0.2, 0.5, 0.3, 0.0]])?;
    let fixed = g.constant(target.map(|v| if v > 0.0 { v.ln() } else { -800.0 }));
    let kl = kd_loss(&mut g, fixed, &target, 1.0)?;

    Ok(vec![
        ("entropy_of_outputs", g.scalar(h), 4f64.ln()),
        ("adv_regularizer", -g.scalar(jsd), 2f64.ln()),
        ("bn_regularizer", g.scalar(rbn), 0.0),
        ("kd_loss", g.scalar(kl), 0.0),
    ])
}

/// Max elementwise gap between one aggregated round (M = 1, plain SGD,
/// uniform weights, unit server rate) and a direct descent step on the mean
/// client loss.
pub fn distributed_equivalence_error(clients: usize, seed: u64) -> Result<f64> {
    let (n, d, c, lr) = (5, 3, 3, 0.1);
    let teachers = (0..clients)
        .map(|k| calibrated_model(d, c, seed.wrapping_mul(31).wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let server = calibrated_model(d, c, seed.wrapping_add(1_000_003))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[n, d], &mut rng);
    let coeffs = ExtractionCoefficients::default();
    let cfg = LocalDreamConfig {
        steps: 1,
        lr,
        coeffs,
        optimizer: DreamOptimizer::Sgd,
        adaptive: false,
    };
    let weights = client_weights(&vec![1; clients], WeightingScheme::Uniform)?;
    let batch = DreamBatch::new(x.clone(), 0);
    let grads = teachers
        .iter()
        .enumerate()
        .map(|(k, t)| PseudoGradient::new(k, local_dream_update(t, Some(&server), &batch, &cfg, k)?.delta, weights[k]))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = ServerOptimizerState::new(ServerScheme::SimpleAvg, 1.0)?;
    let federated = opt.apply(&x, &aggregate_deltas(&grads)?)?;

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let mut total = None;
    for t in &teachers {
        let l = extraction_loss(&mut g, t, Some(&server), xv, &coeffs)?;
        let l = g.scale(l, 1.0 / clients as f64)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let grad = g.backward(total.expect("clients"), &[xv])?.take(xv).expect("input gradient");
    let mut direct = x.clone();
    direct.axpy(-lr, &grad)?;
    Ok(federated.max_abs_diff(&direct))
}

/// Max elementwise gap between masked and plain aggregation.
pub fn mask_cancellation_error(clients: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..clients).map(|_| rng.random_range(10..200)).collect();
    let weights = client_weights(&sizes, WeightingScheme::Proportional)?;
    let grads = (0..clients)
        .map(|k| PseudoGradient::new(k, Tensor::randn(&[8, 6], &mut rng), weights[k]))
        .collect::<Result<Vec<_>>>()?;
    let plain = aggregate_deltas(&grads)?;
    let masked = secure_masked_aggregate(&grads, &PairSeeds::generate(clients, seed ^ 0xA5A5))?;
    Ok(masked.result.max_abs_diff(&plain))
}

/// Checks disjointness, completeness and nonemptiness of one partition.
pub fn partition_invariants(clients: usize, alpha: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..8);
    let n = clients + rng.random_range(0..300);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let plan = dirichlet_partition(&labels, clients, Concentration::from_f64(alpha)?, seed)?;
    if plan.num_clients() != clients {
        return Err(Error::contract("wrong number of shards"));
    }
    plan.validate(n)
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String>) -> Check {
    match f() {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn expect(ok: bool, detail: String) -> Result<String> {
    if ok {
        Ok(detail)
    } else {
        Err(Error::contract(detail))
    }
}

/// The whole suite; each property reports pass or fail with a detail line.
pub fn run_selftest() -> Vec<Check> {
    let mut out = Vec::new();
    match analytic_values() {
        Ok(values) => {
            for (name, got, want) in values {
                out.push(check(name, || {
                    expect((got - want).abs() <= 1e-9, format!("value {got:.12}, expected {want:.12}"))
                }));
            }
        }
        Err(e) => out.push(check("analytic_values", || Err(e))),
    }
    match gradient_check_errors(10, 2024) {
        Ok(errs) => {
            for (name, err) in errs {
                out.push(check(name, || {
                    expect(err <= FD_TOLERANCE, format!("gradient check max rel error {err:.2e}"))
                }));
            }
        }
        Err(e) => out.push(check("gradient_checks", || Err(e))),
    }
    out.push(check("distributed_equivalence", || {
        let mut worst = 0.0f64;
        for k in [2, 4, 8] {
            worst = worst.max(distributed_equivalence_error(k, k as u64)?);
        }
        expect(worst <= 1e-12, format!("max gap {worst:.2e}"))
    }));
    out.push(check("secure_mask_cancellation", || {
        let mut worst = 0.0f64;
        for k in 2..=8 {
            for s in 0..5 {
                worst = worst.max(mask_cancellation_error(k, s)?);
            }
        }
        expect(worst <= 1e-9, format!("max gap {worst:.2e}"))
    }));
    out.push(check("partition_invariants", || {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let k = rng.random_range(2..10);
            let alpha = [0.05, 0.1, 1.0, 10.0, f64::INFINITY][rng.random_range(0..5)];
            partition_invariants(k, alpha, rng.random())?;
        }
        Ok("100 random draws".into())
    }));
    out
}
