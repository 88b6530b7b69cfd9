//! Knowledge extraction: the losses that pull knowledge out of a frozen
//! teacher into the input space, and the local loop that turns them into a
//! pseudo-gradient on a dream batch.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, GraphForward, Mode, Model, ParamRole};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Weights of the entropy, batchnorm and adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionCoefficients {
    pub w_entropy: f64,
    pub w_bn: f64,
    pub w_adv: f64,
}

impl Default for ExtractionCoefficients {
    fn default() -> Self {
        ExtractionCoefficients {
            w_entropy: 1.0,
            w_bn: 1.0,
            w_adv: 1.0,
        }
    }
}

impl ExtractionCoefficients {
    pub fn new(w_entropy: f64, w_bn: f64, w_adv: f64) -> Result<Self> {
        let c = ExtractionCoefficients { w_entropy, w_bn, w_adv };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_entropy, self.w_bn, self.w_adv];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("extraction weights must be finite and nonnegative"));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("extraction weights are all zero"));
        }
        Ok(())
    }

    /// The same weights without the adversarial term.
    pub fn without_adv(self) -> Self {
        ExtractionCoefficients { w_adv: 0.0, ..self }
    }
}

/// Mean row entropy `-sum p ln p` of `softmax(logits)`, in `[0, ln C]`.
pub fn entropy_of_outputs(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.value(logits).rows() as f64;
    let lp = g.log_softmax(logits)?;
    let p = g.exp(lp)?;
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp)?;
    g.scale(s, -1.0 / n)
}

/// `sum_l ||mu_batch - mu_run|| + ||sd_batch - sd_run||` with
/// `sd = sqrt(var + eps)`; zero when the dream batch reproduces the stored
/// statistics.
pub fn bn_regularizer(g: &mut Graph, batch_stats: &[(Var, Var)], bn_states: &[BatchNormState]) -> Result<Var> {
    if batch_stats.len() != bn_states.len() {
        return Err(Error::contract(format!(
            "bn_regularizer: {} batch statistics for {} batchnorm layers",
            batch_stats.len(),
            bn_states.len()
        )));
    }
    let mut total = g.constant(Tensor::from_parts(vec![1], vec![0.0]));
    for (&(mu, var), state) in batch_stats.iter().zip(bn_states) {
        let w = state.width();
        if g.value(mu).len() != w {
            return Err(Error::Shape {
                op: "bn_regularizer",
                left: g.value(mu).shape().to_vec(),
                right: vec![1, w],
            });
        }
        let run_mu = g.constant(Tensor::from_parts(vec![1, w], state.running_mean.clone()));
        let run_sd = g.constant(Tensor::from_parts(vec![1, w], state.running_std()));
        let dmu = g.sub(mu, run_mu)?;
        let mu_term = g.l2_norm(dmu)?;
        let ve = g.add_scalar(var, state.epsilon)?;
        let sd = g.sqrt(ve)?;
        let dsd = g.sub(sd, run_sd)?;
        let sd_term = g.l2_norm(dsd)?;
        let layer = g.add(mu_term, sd_term)?;
        total = g.add(total, layer)?;
    }
    Ok(total)
}

static FLIP_ADV_SIGN: AtomicBool = AtomicBool::new(false);

/// Fault injection for the self-test: flips the sign of the adversarial term
/// process-wide.
#[doc(hidden)]
pub fn inject_adv_sign_flip(on: bool) {
    FLIP_ADV_SIGN.store(on, Ordering::SeqCst);
}

/// Negative mean Jensen-Shannon divergence (natural log) between the
/// teacher's and student's output distributions, in `[-ln 2, 0]`.
pub fn adv_regularizer(g: &mut Graph, teacher_logits: Var, student_logits: Var) -> Result<Var> {
    let (ts, ss) = (g.value(teacher_logits).shape(), g.value(student_logits).shape());
    if ts != ss {
        return Err(Error::Shape {
            op: "adv_regularizer",
            left: ts.to_vec(),
            right: ss.to_vec(),
        });
    }
    let n = ts[0] as f64;
    let lp = g.log_softmax(teacher_logits)?;
    let lq = g.log_softmax(student_logits)?;
    // ln m = ln((p + q) / 2), computed in log space.
    let lpq = g.logaddexp(lp, lq)?;
    let lm = g.add_scalar(lpq, -std::f64::consts::LN_2)?;
    let kl = |g: &mut Graph, l: Var| -> Result<Var> {
        let p = g.exp(l)?;
        let diff = g.sub(l, lm)?;
        let t = g.mul(p, diff)?;
        g.sum(t)
    };
    let kp = kl(g, lp)?;
    let kq = kl(g, lq)?;
    let both = g.add(kp, kq)?;
    let sign = if FLIP_ADV_SIGN.load(Ordering::Relaxed) { 1.0 } else { -1.0 };
    g.scale(both, sign * 0.5 / n)
}

fn teacher_forward(g: &mut Graph, model: &Model, x: Var) -> Result<GraphForward> {
    model.forward_graph(g, x, Mode::Eval, ParamRole::Frozen)
}

/// `w_entropy * H + w_bn * R_bn + w_adv * R_adv` for a frozen teacher.
///
/// The adversarial term needs a student; with `w_adv == 0` it is skipped and
/// any student is ignored.
pub fn extraction_loss(
    g: &mut Graph,
    teacher: &Model,
    student: Option<&Model>,
    x: Var,
    coeffs: &ExtractionCoefficients,
) -> Result<Var> {
    coeffs.validate()?;
    let out = teacher_forward(g, teacher, x)?;
    let mut total = g.constant(Tensor::from_parts(vec![1], vec![0.0]));
    if coeffs.w_entropy > 0.0 {
        let h = entropy_of_outputs(g, out.logits)?;
        let h = g.scale(h, coeffs.w_entropy)?;
        total = g.add(total, h)?;
    }
    if coeffs.w_bn > 0.0 {
        let r = bn_regularizer(g, &out.batch_stats, teacher.bn_states())?;
        let r = g.scale(r, coeffs.w_bn)?;
        total = g.add(total, r)?;
    }
    if coeffs.w_adv > 0.0 {
        let student = student.ok_or_else(|| Error::contract("adversarial weight is positive but no student was given"))?;
        let s = teacher_forward(g, student, x)?;
        let r = adv_regularizer(g, out.logits, s.logits)?;
        let r = g.scale(r, coeffs.w_adv)?;
        total = g.add(total, r)?;
    }
    Ok(total)
}

/// Cross-entropy to fixed target labels plus `w_bn * R_bn`.
pub fn deepdream_loss(g: &mut Graph, model: &Model, x: Var, targets: &[usize], w_bn: f64) -> Result<Var> {
    let out = teacher_forward(g, model, x)?;
    let c = model.spec().num_classes;
    if targets.len() != g.value(out.logits).rows() {
        return Err(Error::invalid("one target label per dream is required"));
    }
    let onehot = g.constant(Tensor::one_hot(targets, c)?);
    let ce = cross_entropy(g, out.logits, onehot)?;
    if w_bn == 0.0 {
        return Ok(ce);
    }
    let r = bn_regularizer(g, &out.batch_stats, model.bn_states())?;
    let r = g.scale(r, w_bn)?;
    g.add(ce, r)
}

/// Mean row cross-entropy `-sum t ln softmax(logits)` against target rows.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: Var) -> Result<Var> {
    let n = g.value(logits).rows() as f64;
    let lp = g.log_softmax(logits)?;
    let t = g.mul(targets, lp)?;
    let s = g.sum(t)?;
    g.scale(s, -1.0 / n)
}

/// Combined min-max direction: descend the teacher's loss, ascend the
/// student's.
pub fn adaptive_input_gradient(teacher_grad: &Tensor, student_grad: &Tensor) -> Result<Tensor> {
    teacher_grad.sub(student_grad)
}

/// Optimizer used for the local steps on a dream batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DreamOptimizer {
    Adam(AdamConfig),
    Sgd,
}

impl Default for DreamOptimizer {
    fn default() -> Self {
        DreamOptimizer::Adam(AdamConfig::DREAM)
    }
}

/// Dreams plus the optimizer state of their latest local optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct DreamBatch {
    pub inputs: Tensor,
    pub adam: AdamState,
    pub origin_round: usize,
}

impl DreamBatch {
    pub fn new(inputs: Tensor, origin_round: usize) -> Self {
        let len = inputs.len();
        DreamBatch {
            inputs,
            adam: AdamState::new(len, AdamConfig::DREAM),
            origin_round,
        }
    }

    /// `x ~ N(0, 1)` of shape `n x d`.
    pub fn random<R: rand::Rng + ?Sized>(n: usize, d: usize, origin_round: usize, rng: &mut R) -> Self {
        DreamBatch::new(Tensor::randn(&[n, d], rng), origin_round)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalDreamConfig {
    pub steps: usize,
    pub lr: f64,
    pub coeffs: ExtractionCoefficients,
    pub optimizer: DreamOptimizer,
    /// Subtract the student's own extraction gradient (adaptive teaching).
    pub adaptive: bool,
}

/// Gradient of the extraction loss at `x` for one teacher.
pub fn extraction_gradient(
    teacher: &Model,
    student: Option<&Model>,
    x: &Tensor,
    coeffs: &ExtractionCoefficients,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = extraction_loss(&mut g, teacher, student, xv, coeffs)?;
    let mut grads = g.backward(loss, &[xv])?;
    Ok((g.scalar(loss), grads.take(xv).expect("input gradient")))
}

/// Result of a client's local dream optimization.
#[derive(Clone, Debug)]
pub struct LocalDreamOutcome {
    pub batch: DreamBatch,
    /// `x_after - x_before`, the pseudo-gradient shared with the server.
    pub delta: Tensor,
    /// Extraction loss before each step.
    pub losses: Vec<f64>,
}

/// Runs `steps` optimizer steps on the dreams against a frozen client model.
///
/// The optimizer state is reset on entry. Steps are accumulated into the
/// returned delta, and the returned inputs are exactly `x_before + delta`.
pub fn local_dream_update(
    client: &Model,
    server: Option<&Model>,
    batch: &DreamBatch,
    cfg: &LocalDreamConfig,
    client_id: usize,
) -> Result<LocalDreamOutcome> {
    if cfg.steps == 0 {
        return Err(Error::invalid("local dream steps must be at least 1"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid("local dream rate must be positive"));
    }
    let before = &batch.inputs;
    let mut adam = batch.adam.clone();
    if let DreamOptimizer::Adam(c) = cfg.optimizer {
        adam = AdamState::new(before.len(), c);
    }
    let student_coeffs = cfg.coeffs.without_adv();
    let diverged = |step: usize| Error::DreamDiverged {
        round: batch.origin_round,
        client: client_id,
        step,
    };

    let mut delta = Tensor::zeros(before.shape());
    let mut x = before.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, mut grad) = extraction_gradient(client, server, &x, &cfg.coeffs).map_err(|e| {
            if e.is_numeric() {
                diverged(step)
            } else {
                e
            }
        })?;
        if !loss.is_finite() {
            return Err(diverged(step));
        }
        losses.push(loss);
        if cfg.adaptive {
            let server = server.ok_or_else(|| Error::contract("adaptive teaching needs the server model"))?;
            let (_, student_grad) =
                extraction_gradient(server, None, &x, &student_coeffs).map_err(|_| diverged(step))?;
            grad = adaptive_input_gradient(&grad, &student_grad)?;
        }
        let update = match cfg.optimizer {
            DreamOptimizer::Sgd => grad.scale(-cfg.lr),
            DreamOptimizer::Adam(_) => {
                let dir = adam.direction(grad.data())?;
                Tensor::from_parts(grad.shape().to_vec(), dir.into_iter().map(|d| -cfg.lr * d).collect())
            }
        };
        delta.axpy(1.0, &update)?;
        x = before.add(&delta)?;
        if !x.is_finite() {
            return Err(diverged(step));
        }
    }
    Ok(LocalDreamOutcome {
        batch: DreamBatch {
            inputs: x,
            adam,
            origin_round: batch.origin_round,
        },
        delta,
        losses,
    })
}

/// Value-level helpers for reporting.
pub fn mean_entropy(logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let h = entropy_of_outputs(&mut g, l)?;
    Ok(g.scalar(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::nn::ArchitectureSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Direct `-sum p ln p` over softmax rows.
    fn entropy_oracle(t: &Tensor) -> f64 {
        let mut total = 0.0;
        for i in 0..t.rows() {
            let row = t.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= row.iter().map(|v| {
                let p = v.exp() / z;
                p * p.ln()
            }).sum::<f64>();
        }
        total / t.rows() as f64
    }

    #[test]
    fn entropy_examples() {
        let uniform = logits(&[vec![0.3; 4], vec![-2.0; 4]]);
        assert!((mean_entropy(&uniform).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(mean_entropy(&logits(&[vec![50.0, 0.0, 0.0]])).unwrap() < 1e-18);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Tensor::randn(&[7, 5], &mut rng).scale(3.0);
        let h = mean_entropy(&r).unwrap();
        assert!((h - entropy_oracle(&r)).abs() <= 1e-10);
        assert!((0.0..=5f64.ln()).contains(&h));
    }

    fn adv_value(a: &Tensor, b: &Tensor) -> f64 {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let r = adv_regularizer(&mut g, va, vb).unwrap();
        g.scalar(r)
    }

    #[test]
    fn adv_examples() {
        let p = logits(&[vec![0.4, -1.0, 2.0]]);
        assert!(adv_value(&p, &p).abs() < 1e-15);
        let disjoint = adv_value(&logits(&[vec![800.0, 0.0]]), &logits(&[vec![0.0, 800.0]]));
        assert!((disjoint + 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = Tensor::randn(&[3, 4], &mut rng).scale(2.0);
            let b = Tensor::randn(&[3, 4], &mut rng).scale(2.0);
            let (ab, ba) = (adv_value(&a, &b), adv_value(&b, &a));
            assert!((ab - ba).abs() <= 1e-12);
            assert!((-2f64.ln()..=0.0).contains(&ab));
        }
    }

    #[test]
    fn bn_regularizer_examples() {
        let mut state = BatchNormState::new(2);
        state.running_mean = vec![1.0, 1.0];
        state.running_var = vec![0.5, 2.0];
        let mut g = Graph::new();
        let var = g.constant(Tensor::from_parts(vec![1, 2], vec![0.5, 2.0]));
        let same = g.constant(Tensor::from_parts(vec![1, 2], vec![1.0, 1.0]));
        let r = bn_regularizer(&mut g, &[(same, var)], std::slice::from_ref(&state)).unwrap();
        assert_eq!(g.scalar(r), 0.0);

        let shifted = g.constant(Tensor::from_parts(vec![1, 2], vec![4.0, 5.0]));
        let r = bn_regularizer(&mut g, &[(shifted, var)], std::slice::from_ref(&state)).unwrap();
        assert!((g.scalar(r) - 5.0).abs() < 1e-12);

        assert!(bn_regularizer(&mut g, &[], std::slice::from_ref(&state)).is_err());
    }

    fn teacher() -> Model {
        let spec = ArchitectureSpec::new("t", 3, &[(6, true), (5, true)], 3);
        let mut m = Model::new(&spec, 2).unwrap();
        // Give the running statistics something non-trivial to match.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[16, 3], &mut rng).map(|v| 0.5 * v + 1.0);
        for _ in 0..20 {
            m.forward(&x, Mode::Train).unwrap();
        }
        m
    }

    #[test]
    fn degenerate_weights_reduce_to_entropy() {
        let t = teacher();
        let x = Tensor::randn(&[4, 3], &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = extraction_loss(&mut g, &t, None, xv, &ExtractionCoefficients::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        let h = mean_entropy(&t.logits(&x).unwrap()).unwrap();
        assert!((g.scalar(l) - h).abs() < 1e-12);
    }

    #[test]
    fn missing_student_with_adv_weight_is_an_error() {
        let t = teacher();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[2, 3]));
        let err = extraction_loss(&mut g, &t, None, xv, &ExtractionCoefficients::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn full_loss_passes_gradient_check() {
        let t = teacher();
        let s = Model::new(t.spec(), 99).unwrap();
        let x = Tensor::randn(&[5, 3], &mut ChaCha8Rng::seed_from_u64(4));
        let coeffs = ExtractionCoefficients::default();
        let err = finite_difference_check(|g, xv| extraction_loss(g, &t, Some(&s), xv, &coeffs), &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
        let err = finite_difference_check(|g, xv| deepdream_loss(g, &t, xv, &[0, 1, 2, 1, 0], 1.0), &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn deepdream_cross_entropy_values() {
        let spec = ArchitectureSpec::new("d", 2, &[(4, false)], 4);
        let mut m = Model::new(&spec, 0).unwrap();
        let last = m.layers().len() - 1;
        m.layers_mut()[last].weight = Tensor::zeros(&[4, 4]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 2]));
        let l = deepdream_loss(&mut g, &m, x, &[0, 3], 0.0).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);

        m.layers_mut()[last].bias = Tensor::from_parts(vec![1, 4], vec![60.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 2]));
        let l = deepdream_loss(&mut g, &m, x, &[0, 0], 0.0).unwrap();
        assert!(g.scalar(l) < 1e-20);
        assert!(deepdream_loss(&mut g, &m, x, &[0, 4], 0.0).is_err());
    }

    #[test]
    fn sgd_single_step_delta_is_scaled_gradient() {
        let t = teacher();
        let batch = DreamBatch::random(6, 3, 0, &mut ChaCha8Rng::seed_from_u64(2));
        let coeffs = ExtractionCoefficients::new(1.0, 1.0, 0.0).unwrap();
        let cfg = LocalDreamConfig {
            steps: 1,
            lr: 0.05,
            coeffs,
            optimizer: DreamOptimizer::Sgd,
            adaptive: false,
        };
        let before = t.clone();
        let out = local_dream_update(&t, None, &batch, &cfg, 0).unwrap();
        let (_, grad) = extraction_gradient(&t, None, &batch.inputs, &coeffs).unwrap();
        assert_eq!(out.delta, grad.scale(-0.05));
        assert_eq!(out.batch.inputs, batch.inputs.add(&out.delta).unwrap());
        assert_eq!(t, before);
    }

    #[test]
    fn adaptive_gradient_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(&[3, 2], &mut rng);
        let b = Tensor::randn(&[3, 2], &mut rng);
        assert_eq!(adaptive_input_gradient(&a, &Tensor::zeros(&[3, 2])).unwrap(), a);
        assert!(adaptive_input_gradient(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(adaptive_input_gradient(&a, &Tensor::zeros(&[2, 3])).is_err());
        // Linearity in both arguments.
        let (c1, c2) = (0.7, -1.3);
        let lhs = adaptive_input_gradient(&a.scale(c1).add(&b.scale(c2)).unwrap(), &b.scale(c1).add(&a.scale(c2)).unwrap()).unwrap();
        let rhs = adaptive_input_gradient(&a, &b)
            .unwrap()
            .scale(c1)
            .add(&adaptive_input_gradient(&b, &a).unwrap().scale(c2))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn coefficients_validation() {
        assert!(ExtractionCoefficients::new(0.0, 0.0, 0.0).is_err());
        assert!(ExtractionCoefficients::new(-1.0, 1.0, 0.0).is_err());
        assert!(ExtractionCoefficients::new(0.0, 1.0, 0.0).is_ok());
    }
}
