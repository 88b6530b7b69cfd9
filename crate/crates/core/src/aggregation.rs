//! Server-side aggregation of pseudo-gradients in data space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingScheme {
    /// `|D_k| / sum_j |D_j|`.
    Proportional,
    Uniform,
    /// `(1/|D_k|) / sum_j (1/|D_j|)`.
    InverseSize,
}

/// Normalized client weights; every scheme sums to one.
pub fn client_weights(sizes: &[usize], scheme: WeightingScheme) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::invalid("client_weights of an empty client list"));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("client dataset sizes must be positive"));
    }
    let raw: Vec<f64> = match scheme {
        WeightingScheme::Proportional => sizes.iter().map(|&s| s as f64).collect(),
        WeightingScheme::Uniform => vec![1.0; sizes.len()],
        WeightingScheme::InverseSize => sizes.iter().map(|&s| 1.0 / s as f64).collect(),
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// One client's upload for a global round.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGradient {
    pub client_id: usize,
    pub delta: Tensor,
    pub weight: f64,
}

impl PseudoGradient {
    pub fn new(client_id: usize, delta: Tensor, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("client {client_id}: weight must be positive")));
        }
        if !delta.is_finite() {
            return Err(Error::NonFinite { op: "pseudo_gradient" });
        }
        Ok(PseudoGradient {
            client_id,
            delta,
            weight,
        })
    }
}

fn ordered(deltas: &[PseudoGradient]) -> Result<Vec<&PseudoGradient>> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::invalid("no pseudo-gradients to aggregate"))?;
    let mut sorted: Vec<&PseudoGradient> = deltas.iter().collect();
    sorted.sort_by_key(|p| p.client_id);
    for p in &sorted {
        if p.delta.shape() != first.delta.shape() {
            return Err(Error::Shape {
                op: "aggregate_deltas",
                left: first.delta.shape().to_vec(),
                right: p.delta.shape().to_vec(),
            });
        }
    }
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::invalid("duplicate client id in aggregation"));
    }
    let total: f64 = sorted.iter().map(|p| p.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("aggregation weights sum to {total}, not 1")));
    }
    Ok(sorted)
}

/// `sum_k w_k delta_k`, reduced in ascending client id.
pub fn aggregate_deltas(deltas: &[PseudoGradient]) -> Result<Tensor> {
    let sorted = ordered(deltas)?;
    let mut acc = Tensor::zeros(sorted[0].delta.shape());
    for p in sorted {
        acc.axpy(p.weight, &p.delta)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerScheme {
    SimpleAvg,
    FedAdam,
}

/// Moment settings for the adaptive server optimizer; `epsilon` plays the
/// role of the adaptivity floor tau.
pub const FED_ADAM: AdamConfig = AdamConfig {
    beta1: 0.9,
    beta2: 0.99,
    epsilon: 1e-3,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ServerOptimizerState {
    pub scheme: ServerScheme,
    pub lr: f64,
    adam: Option<AdamState>,
    fed_adam: AdamConfig,
}

impl ServerOptimizerState {
    pub fn new(scheme: ServerScheme, lr: f64) -> Result<Self> {
        ServerOptimizerState::with_config(scheme, lr, FED_ADAM)
    }

    pub fn with_config(scheme: ServerScheme, lr: f64, fed_adam: AdamConfig) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("global rate must be positive"));
        }
        if !(fed_adam.epsilon > 0.0) {
            return Err(Error::invalid("adaptivity floor tau must be positive"));
        }
        Ok(ServerOptimizerState {
            scheme,
            lr,
            adam: None,
            fed_adam,
        })
    }

    pub fn adam_state(&self) -> Option<&AdamState> {
        self.adam.as_ref()
    }

    /// Applies the aggregated pseudo-gradient to the dreams.
    ///
    /// `SimpleAvg` returns `x + lr * delta`. `FedAdam` treats `-delta` as the
    /// gradient: `x + lr * m_hat / (sqrt(v_hat) + tau)` with moments of `delta`.
    pub fn apply(&mut self, x: &Tensor, delta: &Tensor) -> Result<Tensor> {
        if x.shape() != delta.shape() {
            return Err(Error::Shape {
                op: "server_apply",
                left: x.shape().to_vec(),
                right: delta.shape().to_vec(),
            });
        }
        match self.scheme {
            ServerScheme::SimpleAvg => {
                let mut out = x.clone();
                out.axpy(self.lr, delta)?;
                Ok(out)
            }
            ServerScheme::FedAdam => {
                let cfg = self.fed_adam;
                let state = self.adam.get_or_insert_with(|| AdamState::new(x.len(), cfg));
                let dir = state.direction(delta.data())?;
                let dir = Tensor::from_parts(x.shape().to_vec(), dir);
                let mut out = x.clone();
                out.axpy(self.lr, &dir)?;
                Ok(out)
            }
        }
    }
}

/// Symmetric table of pairwise mask seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSeeds {
    table: Vec<Vec<u64>>,
}

impl PairSeeds {
    pub fn generate(clients: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = vec![vec![0u64; clients]; clients];
        for i in 0..clients {
            for j in i + 1..clients {
                let s = rand::Rng::random(&mut rng);
                table[i][j] = s;
                table[j][i] = s;
            }
        }
        PairSeeds { table }
    }

    pub fn from_table(table: Vec<Vec<u64>>) -> Result<Self> {
        let k = table.len();
        for (i, row) in table.iter().enumerate() {
            if row.len() != k {
                return Err(Error::invalid("pair seed table must be square"));
            }
            for j in 0..k {
                if i != j && row[j] != table[j][i] {
                    return Err(Error::contract(format!("pair seed table asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(PairSeeds { table })
    }

    pub fn seed(&self, i: usize, j: usize) -> u64 {
        self.table[i][j]
    }

    pub fn clients(&self) -> usize {
        self.table.len()
    }
}

/// Scale of the pseudo-random masks relative to unit-scale updates.
pub const MASK_SCALE: f64 = 100.0;

fn prg_mask(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, MASK_SCALE).expect("valid normal");
    let len = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..len).map(|_| normal.sample(&mut rng)).collect())
}

#[derive(Clone, Debug)]
pub struct MaskedAggregation {
    pub result: Tensor,
    /// What each client actually uploaded, in ascending client id.
    pub masked: Vec<Tensor>,
}

/// Pairwise-mask aggregation: client `i` uploads
/// `w_i delta_i + sum_{j>i} PRG(s_ij) - sum_{j<i} PRG(s_ji)`; the masks cancel
/// in the server's sum.
pub fn secure_masked_aggregate(deltas: &[PseudoGradient], seeds: &PairSeeds) -> Result<MaskedAggregation> {
    let sorted = ordered(deltas)?;
    if let Some(p) = sorted.iter().find(|p| p.client_id >= seeds.clients()) {
        return Err(Error::invalid(format!("no mask seeds for client {}", p.client_id)));
    }
    let shape = sorted[0].delta.shape().to_vec();
    let mut masked = Vec::with_capacity(sorted.len());
    for p in &sorted {
        let i = p.client_id;
        let mut upload = p.delta.scale(p.weight);
        for q in &sorted {
            let j = q.client_id;
            if j > i {
                upload.axpy(1.0, &prg_mask(seeds.seed(i, j), &shape))?;
            } else if j < i {
                upload.axpy(-1.0, &prg_mask(seeds.seed(j, i), &shape))?;
            }
        }
        masked.push(upload);
    }
    let mut result = Tensor::zeros(&shape);
    for m in &masked {
        result.axpy(1.0, m)?;
    }
    Ok(MaskedAggregation { result, masked })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pg(id: usize, v: &[f64], w: f64) -> PseudoGradient {
        PseudoGradient::new(id, Tensor::new(&[v.len()], v.to_vec()).unwrap(), w).unwrap()
    }

    #[test]
    fn weighting_schemes() {
        assert_eq!(client_weights(&[100, 300], WeightingScheme::Proportional).unwrap(), vec![0.25, 0.75]);
        let inv = client_weights(&[100, 300], WeightingScheme::InverseSize).unwrap();
        assert!((inv[0] - 0.75).abs() < 1e-15 && (inv[1] - 0.25).abs() < 1e-15);
        for scheme in [
            WeightingScheme::Proportional,
            WeightingScheme::Uniform,
            WeightingScheme::InverseSize,
        ] {
            let w = client_weights(&[50; 4], scheme).unwrap();
            assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
        assert!(client_weights(&[], WeightingScheme::Uniform).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let out = aggregate_deltas(&[pg(0, &[1.0, 3.0], 0.5), pg(1, &[3.0, 1.0], 0.5)]).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0]);
        let single = aggregate_deltas(&[pg(4, &[0.3, -0.7], 1.0)]).unwrap();
        assert_eq!(single.data(), &[0.3, -0.7]);
        assert!(aggregate_deltas(&[pg(0, &[1.0], 0.5), pg(1, &[1.0, 2.0], 0.5)]).is_err());
        assert!(aggregate_deltas(&[pg(0, &[1.0], 0.5)]).is_err());
    }

    #[test]
    fn simple_avg_and_fed_adam() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut s = ServerOptimizerState::new(ServerScheme::SimpleAvg, 1.0).unwrap();
        assert_eq!(s.apply(&x, &Tensor::zeros(&[3])).unwrap(), x);

        // First bias-corrected step moves each coordinate by ~lr.
        let mut a = ServerOptimizerState::new(ServerScheme::FedAdam, 0.1).unwrap();
        let d = Tensor::new(&[3], vec![0.5, -0.5, 2.0]).unwrap();
        let y = a.apply(&x, &d).unwrap();
        for ((yi, xi), di) in y.data().iter().zip(x.data()).zip(d.data()) {
            let expected = 0.1 * di.abs() / (di.abs() + 1e-3);
            assert!(((yi - xi).abs() - expected).abs() < 1e-12);
            assert_eq!((yi - xi).signum(), di.signum());
        }
    }

    #[test]
    fn masks_cancel_for_two_clients_and_single_client_is_unmasked() {
        let seeds = PairSeeds::generate(2, 7);
        let deltas = [pg(0, &[1.0, 2.0, 3.0], 0.4), pg(1, &[-1.0, 0.5, 0.0], 0.6)];
        let plain = aggregate_deltas(&deltas).unwrap();
        let masked = secure_masked_aggregate(&deltas, &seeds).unwrap();
        assert!(masked.result.max_abs_diff(&plain) <= 1e-9);

        let one = [pg(0, &[1.5, -2.5], 1.0)];
        let m = secure_masked_aggregate(&one, &PairSeeds::generate(1, 0)).unwrap();
        assert_eq!(m.masked[0].data(), &[1.5, -2.5]);
    }

    #[test]
    fn asymmetric_seed_table_rejected() {
        assert!(PairSeeds::from_table(vec![vec![0, 1], vec![2, 0]]).is_err());
        assert!(PairSeeds::from_table(vec![vec![0, 3], vec![3, 0]]).is_ok());
    }
}
