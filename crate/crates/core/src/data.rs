//! Synthetic datasets, Dirichlet label-skew partitioning, and the FIFO dream
//! buffer.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance for soft-label rows to count as lying on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::invalid("features must be n x d with one label per row"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Shuffled mini-batch index lists covering the dataset once.
    pub fn batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let mut out: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        // Avoid a trailing singleton, which batchnorm cannot normalize.
        if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
            let last = out.pop().expect("nonempty");
            out.last_mut().expect("nonempty").extend(last);
        }
        out
    }

    /// Reads header-free CSV rows of `d` floats followed by an integer label.
    pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let display = path.display().to_string();
        let err = |line: usize, detail: String| Error::Parse {
            path: display.clone(),
            line,
            detail,
        };
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
            if fields.len() < 2 {
                return Err(err(line, "expected at least one feature and a label".into()));
            }
            match width {
                None => width = Some(fields.len()),
                Some(w) if w != fields.len() => {
                    return Err(err(line, format!("ragged row: {} fields, expected {w}", fields.len())))
                }
                _ => {}
            }
            let (feat, label) = fields.split_at(fields.len() - 1);
            let mut row = Vec::with_capacity(feat.len());
            for f in feat {
                let v: f64 = f.parse().map_err(|_| err(line, format!("bad number `{f}`")))?;
                if !v.is_finite() {
                    return Err(err(line, format!("non-finite value `{f}`")));
                }
                row.push(v);
            }
            let l: usize = label[0]
                .parse()
                .map_err(|_| err(line, format!("bad label `{}`", label[0])))?;
            rows.push(row);
            labels.push(l);
        }
        if rows.is_empty() {
            return Err(err(0, "no rows".into()));
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let name = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
        Dataset::new(name, Tensor::from_rows(&rows)?, labels, classes)
    }
}

/// Balanced Gaussian mixture with unit-variance clouds.
///
/// Class means sit on a scaled simplex (`classes <= dims`) or on a circle in
/// the first two coordinates, with neighbouring means `separation` apart.
/// Labels cycle `0, 1, .., C-1`, so counts are balanced to within one.
pub fn gen_gaussian_mixture(n: usize, classes: usize, dims: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes || dims < 2 || separation.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid(format!(
            "gaussian mixture needs n >= C >= 2, d >= 2, separation > 0 (got n={n}, C={classes}, d={dims}, sep={separation})"
        )));
    }
    let means = class_means(classes, dims, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dims {
            let z: f64 = rng.sample(StandardNormal);
            data.push(means[c][j] + z);
        }
        labels.push(c);
    }
    Dataset::new(
        format!("gmm-c{classes}-d{dims}"),
        Tensor::new(&[n, dims], data)?,
        labels,
        classes,
    )
}

fn class_means(classes: usize, dims: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dims];
            if classes <= dims {
                m[c] = separation / 2f64.sqrt();
            } else {
                let radius = separation / (2.0 * (PI / classes as f64).sin());
                let theta = 2.0 * PI * c as f64 / classes as f64;
                m[0] = radius * theta.cos();
                m[1] = radius * theta.sin();
            }
            m
        })
        .collect()
}

/// Dirichlet concentration; `Iid` is the infinite-concentration limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Concentration {
    Finite(f64),
    Iid,
}

impl Concentration {
    pub fn from_f64(alpha: f64) -> Result<Self> {
        if alpha == f64::INFINITY {
            Ok(Concentration::Iid)
        } else if alpha > 0.0 && alpha.is_finite() {
            Ok(Concentration::Finite(alpha))
        } else {
            Err(Error::invalid(format!("dirichlet alpha must be positive, got {alpha}")))
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Concentration::Finite(a) => a,
            Concentration::Iid => f64::INFINITY,
        }
    }
}

/// A sample moved to fill an otherwise empty client.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Repair {
    pub from: usize,
    pub to: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    pub alpha: Concentration,
    pub repairs: Vec<Repair>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Checks disjointness, completeness over `0..n`, and nonempty clients.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, list) in self.clients.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::contract(format!("client {k} is empty")));
            }
            for &i in list {
                if i >= n || seen[i] {
                    return Err(Error::contract(format!("index {i} out of range or assigned twice")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("partition does not cover every index"));
        }
        Ok(())
    }

    /// Mean over clients of the Shannon entropy (nats) of their label histogram.
    pub fn mean_label_entropy(&self, labels: &[usize], classes: usize) -> f64 {
        let total: f64 = self
            .clients
            .iter()
            .map(|list| {
                let mut counts = vec![0usize; classes];
                for &i in list {
                    counts[labels[i]] += 1;
                }
                let n = list.len() as f64;
                counts
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / n;
                        -p * p.ln()
                    })
                    .sum::<f64>()
            })
            .sum();
        total / self.clients.len() as f64
    }
}

/// Per-class Dirichlet split of `labels` across `clients`.
///
/// For each class a proportion vector is drawn from `Dir(alpha * 1)` (exactly
/// uniform for [`Concentration::Iid`]); the class's shuffled samples are then
/// cut by those proportions, remainders going to the largest fractional
/// parts. Clients left empty receive one sample from the largest client.
pub fn dirichlet_partition(labels: &[usize], clients: usize, alpha: Concentration, seed: u64) -> Result<PartitionPlan> {
    if clients < 2 {
        return Err(Error::invalid("partition needs at least 2 clients"));
    }
    if clients > labels.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples across {clients} clients",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); clients];

    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let props = match alpha {
            Concentration::Iid => vec![1.0 / clients as f64; clients],
            Concentration::Finite(a) => dirichlet_draw(a, clients, &mut rng)?,
        };
        let counts = apportion(&props, idx.len(), c);
        let mut start = 0;
        for (k, &cnt) in counts.iter().enumerate() {
            out[k].extend_from_slice(&idx[start..start + cnt]);
            start += cnt;
        }
    }

    let mut repairs = Vec::new();
    for k in 0..clients {
        if out[k].is_empty() {
            let from = (0..clients)
                .max_by_key(|&j| (out[j].len(), std::cmp::Reverse(j)))
                .expect("clients nonempty");
            let index = out[from].pop().expect("largest client has samples");
            out[k].push(index);
            repairs.push(Repair { from, to: k, index });
        }
    }
    for list in &mut out {
        list.sort_unstable();
    }
    Ok(PartitionPlan {
        clients: out,
        alpha,
        repairs,
    })
}

fn dirichlet_draw<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma({alpha}): {e}")))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|v| *v /= total);
    } else {
        // Every gamma draw underflowed; the limit puts all mass on one client.
        let winner = rng.random_range(0..k);
        draws = (0..k).map(|j| if j == winner { 1.0 } else { 0.0 }).collect();
    }
    Ok(draws)
}

/// Integer counts summing to `n` in proportion to `props`. Ties in the
/// fractional remainders rotate with `offset` so uniform splits stay
/// balanced across classes.
fn apportion(props: &[f64], n: usize, offset: usize) -> Vec<usize> {
    let k = props.len();
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(((a + k - offset % k) % k).cmp(&((b + k - offset % k) % k)))
    });
    for &j in order.iter().take(n.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

/// One stored batch of dreams with their soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DreamEntry {
    pub inputs: Tensor,
    pub soft_labels: Tensor,
    pub round: usize,
}

/// Fixed-capacity FIFO of dream batches.
#[derive(Clone, Debug)]
pub struct DreamBuffer {
    capacity: usize,
    entries: VecDeque<DreamEntry>,
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 10;

/// Checks that every row of `p` is nonnegative and sums to one within `tol`.
pub fn check_simplex(p: &Tensor, tol: f64) -> Result<()> {
    for i in 0..p.rows() {
        let row = p.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| v < -tol) || (s - 1.0).abs() > tol {
            return Err(Error::contract(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

impl DreamBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be positive"));
        }
        Ok(DreamBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DreamEntry> {
        self.entries.iter()
    }

    /// Appends a batch, evicting the oldest when full.
    pub fn push(&mut self, inputs: Tensor, soft_labels: Tensor, round: usize) -> Result<()> {
        if inputs.rows() != soft_labels.rows() {
            return Err(Error::Shape {
                op: "buffer_push",
                left: inputs.shape().to_vec(),
                right: soft_labels.shape().to_vec(),
            });
        }
        check_simplex(&soft_labels, SIMPLEX_TOL)?;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(DreamEntry {
            inputs,
            soft_labels,
            round,
        });
        Ok(())
    }

    /// A uniformly chosen stored batch.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&DreamEntry> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok(&self.entries[rng.random_range(0..self.entries.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_balanced_and_deterministic() {
        let a = gen_gaussian_mixture(10, 3, 4, 2.0, 5).unwrap();
        let b = gen_gaussian_mixture(10, 3, 4, 2.0, 5).unwrap();
        assert_eq!(a, b);
        let counts = a.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);

        let one_each = gen_gaussian_mixture(3, 3, 2, 8.0, 0).unwrap();
        assert_eq!(one_each.class_counts(), vec![1, 1, 1]);

        assert!(gen_gaussian_mixture(2, 3, 2, 1.0, 0).is_err());
        assert!(gen_gaussian_mixture(9, 3, 1, 1.0, 0).is_err());
        assert!(gen_gaussian_mixture(9, 3, 2, 0.0, 0).is_err());
    }

    #[test]
    fn class_means_are_separation_apart() {
        for (c, d) in [(3, 2), (4, 8), (5, 2)] {
            let m = class_means(c, d, 6.0);
            let dist: f64 = m[0].iter().zip(&m[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((dist - 6.0).abs() < 1e-12, "{c} {d} {dist}");
        }
    }

    #[test]
    fn iid_partition_is_uniform_per_client() {
        let labels: Vec<usize> = (0..400).map(|i| i % 5).collect();
        let plan = dirichlet_partition(&labels, 4, Concentration::Iid, 1).unwrap();
        plan.validate(400).unwrap();
        for list in &plan.clients {
            let mut h = vec![0i64; 5];
            for &i in list {
                h[labels[i]] += 1;
            }
            assert!(h.iter().all(|&c| (c - 20).abs() <= 1), "{h:?}");
        }
        assert!(plan.repairs.is_empty());
    }

    #[test]
    fn skewed_partition_has_lower_entropy() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let mean = |alpha| {
            (0..20)
                .map(|s| {
                    dirichlet_partition(&labels, 4, alpha, s)
                        .unwrap()
                        .mean_label_entropy(&labels, 4)
                })
                .sum::<f64>()
                / 20.0
        };
        assert!(mean(Concentration::Finite(0.1)) < mean(Concentration::Iid));
    }

    #[test]
    fn empty_clients_are_repaired() {
        // Two samples of one class over several clients forces repairs.
        let labels = vec![0, 0, 0];
        let plan = dirichlet_partition(&labels, 3, Concentration::Finite(0.01), 4).unwrap();
        plan.validate(3).unwrap();
        assert!(dirichlet_partition(&labels, 4, Concentration::Iid, 0).is_err());
        assert!(dirichlet_partition(&labels, 1, Concentration::Iid, 0).is_err());
    }

    #[test]
    fn apportion_sums_to_n() {
        assert_eq!(apportion(&[0.25; 4], 10, 0).iter().sum::<usize>(), 10);
        assert_eq!(apportion(&[0.7, 0.3], 3, 0), vec![2, 1]);
    }

    #[test]
    fn buffer_fifo_and_sampling() {
        let mut buf = DreamBuffer::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample(&mut rng), Err(Error::EmptyBuffer)));
        let y = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        for r in 0..4 {
            buf.push(Tensor::filled(&[1, 2], r as f64), y.clone(), r).unwrap();
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.entries().next().unwrap().round, 1);

        let mut single = DreamBuffer::new(2).unwrap();
        single.push(Tensor::ones(&[1, 2]), y.clone(), 7).unwrap();
        assert_eq!(single.sample(&mut rng).unwrap().round, 7);

        let bad = Tensor::from_rows(&[vec![0.7, 0.5]]).unwrap();
        assert!(buf.push(Tensor::ones(&[1, 2]), bad, 9).is_err());
    }

    #[test]
    fn buffer_sampling_is_uniform() {
        let mut buf = DreamBuffer::new(5).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        for r in 0..5 {
            buf.push(Tensor::ones(&[1, 2]), y.clone(), r).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[buf.sample(&mut rng).unwrap().round] += 1;
        }
        let p = 0.2;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn csv_loader_reports_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        std::fs::write(&good, "0.5,1.0,0\n-1,2,1\n").unwrap();
        let ds = Dataset::load_csv(&good, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 2);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "0.5,1.0,0\n1,1\n").unwrap();
        let err = Dataset::load_csv(&bad, None).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn batches_cover_once_without_singletons() {
        let ds = gen_gaussian_mixture(33, 3, 2, 1.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ds.batches(16, &mut rng);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
        assert!(b.iter().all(|x| x.len() >= 2));
    }
}
