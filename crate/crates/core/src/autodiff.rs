//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only computation record. Every operation pushes a
//! node holding its forward value and the handles of its parents, so parents
//! always precede children and the append order is a valid topological order.
//! A record is rebuilt for every forward pass and dropped afterwards.
//!
//! Broadcasting is limited to a single-element operand combined with a tensor;
//! row broadcasts are expressed as a product with a column of ones.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation tags.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Relu,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    LogAddExp(Var, Var),
    LogSoftmax(Var),
    Reduce(Reduction, Var, Option<usize>),
    L2Norm(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(e, ..) | Op::Unary(e, _) => match e {
                Elementwise::Add => "add",
                Elementwise::Sub => "sub",
                Elementwise::Mul => "mul",
                Elementwise::Div => "div",
                Elementwise::Scale(_) => "scale",
                Elementwise::AddScalar(_) => "add_scalar",
                Elementwise::Exp => "exp",
                Elementwise::Log => "log",
                Elementwise::Relu => "relu",
                Elementwise::Sqrt => "sqrt",
            },
            Op::LogAddExp(..) => "logaddexp",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Reduce(Reduction::Sum, ..) => "sum",
            Op::Reduce(Reduction::Mean, ..) => "mean",
            Op::L2Norm(_) => "l2_norm",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar loss with respect to requested leaves.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: HashMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    /// Gradient for `v`; panics if `v` was not requested.
    pub fn of(&self, v: Var) -> &Tensor {
        self.grads
            .get(&v)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", v.0))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// The computation record.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parents of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::LogAddExp(a, b) => vec![*a, *b],
            Op::Unary(_, a) | Op::LogSoftmax(a) | Op::Reduce(_, a, _) | Op::L2Norm(a) => vec![*a],
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Registers a tensor as a leaf. Constants and differentiable inputs are
    /// both leaves; only the set passed to [`Graph::backward`] differs.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out)
    }

    /// Binary elementwise op; one operand may be a single element.
    fn binary(&mut self, e: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match e {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
            Elementwise::Div => x / y,
            _ => unreachable!("unary tag in binary op"),
        };
        if e == Elementwise::Div && tb.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, Op::Binary(e, a, b).name(), f)?
        } else if tb.len() == 1 {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.len() == 1 {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(shape_err(Op::Binary(e, a, b).name(), ta, tb));
        };
        self.push(Op::Binary(e, a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }

    fn unary(&mut self, e: Elementwise, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = match e {
            Elementwise::Scale(c) => t.map(|x| x * c),
            Elementwise::AddScalar(c) => t.map(|x| x + c),
            Elementwise::Exp => t.map(f64::exp),
            Elementwise::Log => {
                if let Some(&bad) = t.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                t.map(f64::ln)
            }
            Elementwise::Relu => t.map(|x| x.max(0.0)),
            Elementwise::Sqrt => {
                if let Some(&bad) = t.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                t.map(f64::sqrt)
            }
            _ => unreachable!("binary tag in unary op"),
        };
        self.push(Op::Unary(e, a), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Elementwise::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Elementwise::AddScalar(c), a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }

    /// Square root; strictly positive input only.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Dispatches on an [`Elementwise`] tag. Binary tags require `b`.
    pub fn elementwise(&mut self, e: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (e, b) {
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div, Some(b)) => {
                self.binary(e, a, b)
            }
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div, None) => {
                Err(Error::contract("binary elementwise op needs two operands"))
            }
            (_, None) => self.unary(e, a),
            (_, Some(_)) => Err(Error::contract("unary elementwise op given two operands")),
        }
    }

    /// `ln(exp(a) + exp(b))`, elementwise and overflow-free.
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "logaddexp", |x, y| {
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        })?;
        self.push(Op::LogAddExp(a, b), out)
    }

    /// Row-wise log-softmax of an `n x C` matrix, with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.shape()[1] < 2 {
            return Err(Error::invalid(format!(
                "log_softmax expects n x C with C >= 2, got {:?}",
                t.shape()
            )));
        }
        let c = t.shape()[1];
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(Op::LogSoftmax(a), out)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ls = self.log_softmax(a)?;
        self.exp(ls)
    }

    /// Sum or mean, over everything (result shape `[1]`) or over one axis
    /// (that axis kept with extent 1).
    pub fn reduce(&mut self, r: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let out = match axis {
            None => {
                let s = t.sum();
                let v = match r {
                    Reduction::Sum => s,
                    Reduction::Mean => s / t.len() as f64,
                };
                Tensor::from_parts(vec![1], vec![v])
            }
            Some(ax) => {
                if ax >= t.shape().len() {
                    return Err(Error::InvalidAxis {
                        axis: ax,
                        rank: t.shape().len(),
                    });
                }
                let (outer, mid, inner) = axis_split(t.shape(), ax);
                let mut out = vec![0.0; outer * inner];
                let d = t.data();
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                if r == Reduction::Mean {
                    out.iter_mut().for_each(|v| *v /= mid as f64);
                }
                let mut shape = t.shape().to_vec();
                shape[ax] = 1;
                Tensor::from_parts(shape, out)
            }
        };
        self.push(Op::Reduce(r, a, axis), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a, None)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Sum, a, Some(axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Mean, a, Some(axis))
    }

    /// Euclidean norm of all entries. The gradient at the origin is taken as
    /// zero (a valid subgradient).
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Op::L2Norm(a), Tensor::from_parts(vec![1], vec![n]))
    }

    /// Repeats a `1 x k` row `n` times, as `ones(n x 1) * row`.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let ones = self.constant(Tensor::ones(&[n, 1]));
        self.matmul(ones, row)
    }

    /// Reverse sweep from a single-element `loss`. Leaves that do not
    /// influence the loss receive zero gradients.
    pub fn backward(&self, loss: Var, leaves: &[Var]) -> Result<GradientMap> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let (ad, bd) = (ta.data(), tb.data());
                    {
                        // dA = G * B^T
                        let ga = acc(&mut grads[a.0], m * k);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    {
                        // dB = A^T * G
                        let gb = acc(&mut grads[b.0], k * n);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = ad[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[p * n..(p + 1) * n];
                                for (d, &x) in dst.iter_mut().zip(grow) {
                                    *d += av * x;
                                }
                            }
                        }
                    }
                }
                Op::Binary(e, a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let len = g.len();
                    let xa = |j: usize| if ta.len() == 1 { ta.data()[0] } else { ta.data()[j] };
                    let xb = |j: usize| if tb.len() == 1 { tb.data()[0] } else { tb.data()[j] };
                    let mut da = vec![0.0; len];
                    let mut db = vec![0.0; len];
                    for j in 0..len {
                        let (x, y) = (xa(j), xb(j));
                        let (pa, pb) = match e {
                            Elementwise::Add => (1.0, 1.0),
                            Elementwise::Sub => (1.0, -1.0),
                            Elementwise::Mul => (y, x),
                            Elementwise::Div => (1.0 / y, -x / (y * y)),
                            _ => unreachable!(),
                        };
                        da[j] = g[j] * pa;
                        db[j] = g[j] * pb;
                    }
                    scatter(&mut grads[a.0], ta.len(), &da);
                    scatter(&mut grads[b.0], tb.len(), &db);
                }
                Op::Unary(e, a) => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let ga = acc(&mut grads[a.0], x.len());
                    for j in 0..x.len() {
                        let d = match e {
                            Elementwise::Scale(c) => *c,
                            Elementwise::AddScalar(_) => 1.0,
                            Elementwise::Exp => y[j],
                            Elementwise::Log => 1.0 / x[j],
                            Elementwise::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Elementwise::Sqrt => 0.5 / y[j],
                            _ => unreachable!(),
                        };
                        ga[j] += g[j] * d;
                    }
                }
                Op::LogAddExp(a, b) => {
                    let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                    let y = node.value.data();
                    let len = y.len();
                    {
                        let ga = acc(&mut grads[a.0], len);
                        for j in 0..len {
                            ga[j] += g[j] * (xa[j] - y[j]).exp();
                        }
                    }
                    let gb = acc(&mut grads[b.0], len);
                    for j in 0..len {
                        gb[j] += g[j] * (xb[j] - y[j]).exp();
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let ga = acc(&mut grads[a.0], y.len());
                    for (r, (grow, yrow)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                }
                Op::Reduce(r, a, axis) => {
                    let shape = self.value(*a).shape().to_vec();
                    let len: usize = shape.iter().product();
                    let ga = acc(&mut grads[a.0], len);
                    match axis {
                        None => {
                            let s = match r {
                                Reduction::Sum => g[0],
                                Reduction::Mean => g[0] / len as f64,
                            };
                            ga.iter_mut().for_each(|v| *v += s);
                        }
                        Some(ax) => {
                            let (outer, mid, inner) = axis_split(&shape, *ax);
                            let norm = match r {
                                Reduction::Sum => 1.0,
                                Reduction::Mean => 1.0 / mid as f64,
                            };
                            for o in 0..outer {
                                for m in 0..mid {
                                    let base = (o * mid + m) * inner;
                                    for i in 0..inner {
                                        ga[base + i] += g[o * inner + i] * norm;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::L2Norm(a) => {
                    let x = self.value(*a).data();
                    let n = node.value.item();
                    let ga = acc(&mut grads[a.0], x.len());
                    if n > 0.0 {
                        for j in 0..x.len() {
                            ga[j] += g[0] * x[j] / n;
                        }
                    }
                }
            }
        }

        let mut out = GradientMap::default();
        for &leaf in leaves {
            let shape = self.value(leaf).shape().to_vec();
            let data = grads
                .get_mut(leaf.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            out.grads.insert(leaf, Tensor::from_parts(shape, data));
        }
        Ok(out)
    }
}

/// Adds `d` into a gradient slot, summing when the operand was a broadcast
/// scalar.
fn scatter(slot: &mut Option<Vec<f64>>, operand_len: usize, d: &[f64]) {
    let dst = slot.get_or_insert_with(|| vec![0.0; operand_len]);
    if operand_len == d.len() {
        for (a, b) in dst.iter_mut().zip(d) {
            *a += b;
        }
    } else {
        dst[0] += d.iter().sum::<f64>();
    }
}

/// Compares the reverse-mode gradient of `f` at `x` with central finite
/// differences and returns `max_i |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let loss = f(&mut g, leaf)?;
    let ad = g.backward(loss, &[leaf])?.take(leaf).expect("leaf gradient");

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(p.clone());
        let out = f(&mut g, leaf)?;
        Ok(g.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let a = ad.data()[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values_and_identity() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);

        let i = g.leaf(Tensor::eye(2));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai), g.value(a));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[4, 2], &mut rng);
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    oracle[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a), g.leaf(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let zero = g.constant(Tensor::zeros(&[3]));
        let s = g.add(x, zero).unwrap();
        assert_eq!(g.value(s), g.value(x));

        let p = g.leaf(t(&[3], &[0.5, 1.0, 7.25]));
        let l = g.log(p).unwrap();
        let e = g.exp(l).unwrap();
        assert!(g.value(e).max_abs_diff(g.value(p)) <= 1e-12);

        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
        let wrong = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.add(x, wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_softmax_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        let l = g.log_softmax(x).unwrap();
        for v in g.value(l).data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
        let big = g.leaf(t(&[1, 2], &[1000.0, 0.0]));
        let l = g.log_softmax(big).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
        assert!((g.value(l).data()[1] + 1000.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = g.leaf(Tensor::randn(&[4, 6], &mut rng).scale(5.0));
        let l = g.log_softmax(r).unwrap();
        for row in g.value(l).data().chunks(6) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.scalar(s), 6.0);
        let c = g.leaf(Tensor::filled(&[2, 5], 4.5));
        let m = g.mean(c).unwrap();
        assert_eq!(g.scalar(m), 4.5);

        let m23 = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut oracle = [0.0; 3];
        for i in 0..2 {
            for j in 0..3 {
                oracle[j] += m23.data()[i * 3 + j];
            }
        }
        let v = g.leaf(m23);
        let s0 = g.sum_axis(v, 0).unwrap();
        assert_eq!(g.value(s0).shape(), &[1, 3]);
        assert_eq!(g.value(s0).data(), &oracle);
        assert!(matches!(g.sum_axis(v, 2), Err(Error::InvalidAxis { axis: 2, rank: 2 })));
    }

    #[test]
    fn backward_analytic_cases() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l, &[x]).unwrap();
        assert_eq!(grads.of(x).data(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0).unwrap());
        let grads = g.backward(c, &[x]).unwrap();
        assert_eq!(grads.of(x).data(), &[0.0, 0.0]);

        assert!(matches!(g.backward(x, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let y = g.relu(x).unwrap();
        let z = g.matmul(y, x).unwrap();
        let l = g.log_softmax(z).unwrap();
        let _ = g.mean(l).unwrap();
        for i in 0..g.len() {
            for p in g.parents(Var(i)) {
                assert!(p.0 < i);
            }
        }
    }

    #[test]
    fn finite_difference_quadratic_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[4, 4], &mut rng);
        let x = Tensor::randn(&[4, 1], &mut rng);
        let err = finite_difference_check(
            |g, v| {
                let a = g.constant(a.clone());
                let ax = g.matmul(a, v)?;
                let p = g.mul(ax, v)?;
                g.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");

        let err = finite_difference_check(|g, v| g.scale_to_zero(v), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    impl Graph {
        fn scale_to_zero(&mut self, v: Var) -> Result<Var> {
            let z = self.scale(v, 0.0)?;
            self.sum(z)
        }
    }
}
