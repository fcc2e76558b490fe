//! Wengert tape: eager-valued graph recording, reverse-mode adjoints and
//! on-tape forward tangents.
//!
//! Tangent propagation emits ordinary tape nodes (e.g. the tangent of
//! `selu(z)` is recorded as `selu'(z) ⊙ ż`), so a Jacobian assembled by
//! [`jacobian_on`] is itself a differentiable subgraph. That single property
//! carries the entropy term of the training loss: reverse mode can
//! differentiate `logabsdet(jacobian(T, x))` with respect to the map
//! parameters in one pass.

use std::collections::HashMap;

use super::linalg::{lu_inverse, lu_logabsdet};
use super::tensor::Tensor;
use super::DiffError;

const SELU_LAMBDA: f64 = 1.0507009873554805;
const SELU_ALPHA: f64 = 1.6732632423543772;

/// Elementwise activation primitives. The `*Prime` kinds exist so that a
/// forward-tangent pass can record `act'(z)` as a node that reverse mode can
/// differentiate once more.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Sigmoid,
    Selu,
    SeluPrime,
    Celu,
    CeluPrime,
}

impl Activation {
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp_m1()
                }
            }
            Activation::SeluPrime => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
            Activation::Celu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::CeluPrime => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }

    /// Pointwise derivative, used by the reverse sweep.
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(z),
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Selu => Activation::SeluPrime.value(z),
            Activation::SeluPrime => {
                if z > 0.0 {
                    0.0
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
            Activation::Celu => Activation::CeluPrime.value(z),
            Activation::CeluPrime => {
                if z > 0.0 {
                    0.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A recorded primitive. Usizes are indices of earlier nodes.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Matmul(usize, usize),
    /// `B×N` plus a length-`N` row, broadcast over rows.
    AddRowBroadcast(usize, usize),
    Act(usize, Activation),
    Sum(usize),
    Mean(usize),
    /// Contiguous range of another node's flat data, reshaped.
    Slice { input: usize, start: usize, shape: Vec<usize> },
    ConcatCols(usize, usize),
    /// Whole input stacked `times` times along rows.
    TileRows(usize, usize),
    /// Each input row repeated `times` consecutive times.
    RepeatRows(usize, usize),
    /// D length-D vectors become the columns of a D×D matrix.
    StackCols(Vec<usize>),
    LogAbsDet(usize),
    /// Inputs are the D Jacobian column batches (each B×D); output is the
    /// length-B vector of per-row clamped log-abs-determinants.
    BatchedLogAbsDet(Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation graph. Nodes are appended in evaluation order, so
/// the acyclicity invariant is structural.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, id: usize) -> &Op {
        &self.nodes[id].op
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| -x);
        self.push(Op::Neg(a.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| c * x);
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(Op::AddScalar(a.0, c), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::Matmul(a.0, b.0), v)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        let n = av.cols();
        assert_eq!(rv.len(), n, "broadcast row length");
        let mut out = av.clone();
        for r in 0..av.rows() {
            for c in 0..n {
                out.data_mut()[r * n + c] += rv.data()[c];
            }
        }
        self.push(Op::AddRowBroadcast(a.0, row.0), out)
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Var {
        let v = self.nodes[a.0].value.map(|x| kind.value(x));
        self.push(Op::Act(a.0, kind), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a.0), Tensor::scalar(s))
    }

    pub fn slice(&mut self, a: Var, start: usize, shape: Vec<usize>) -> Var {
        let len: usize = shape.iter().product();
        let data = self.nodes[a.0].value.data()[start..start + len].to_vec();
        self.push(Op::Slice { input: a.0, start, shape: shape.clone() }, Tensor::new(shape, data))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let rows = av.rows();
        assert_eq!(rows, bv.rows(), "concat_cols rows");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        self.push(Op::ConcatCols(a.0, b.0), Tensor::matrix(rows, ca + cb, data))
    }

    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(av.len() * times);
        for _ in 0..times {
            data.extend_from_slice(av.data());
        }
        let out = Tensor::matrix(av.rows() * times, av.cols(), data);
        self.push(Op::TileRows(a.0, times), out)
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(av.len() * times);
        for r in 0..av.rows() {
            for _ in 0..times {
                data.extend_from_slice(av.row(r));
            }
        }
        let out = Tensor::matrix(av.rows() * times, av.cols(), data);
        self.push(Op::RepeatRows(a.0, times), out)
    }

    pub fn stack_cols(&mut self, cols: &[Var]) -> Var {
        let d = cols.len();
        let mut data = vec![0.0; d * d];
        for (j, &c) in cols.iter().enumerate() {
            let cv = &self.nodes[c.0].value;
            assert_eq!(cv.len(), d, "stack_cols column length");
            for r in 0..d {
                data[r * d + j] = cv.data()[r];
            }
        }
        self.push(Op::StackCols(cols.iter().map(|v| v.0).collect()), Tensor::matrix(d, d, data))
    }

    pub fn logabsdet(&mut self, a: Var) -> Var {
        let (ld, _sign, _clamped) = lu_logabsdet(&self.nodes[a.0].value).expect("square matrix");
        self.push(Op::LogAbsDet(a.0), Tensor::scalar(ld))
    }

    pub fn batched_logabsdet(&mut self, cols: &[Var]) -> Var {
        let d = cols.len();
        let b = self.nodes[cols[0].0].value.rows();
        let mut out = Vec::with_capacity(b);
        let mut m = vec![0.0; d * d];
        for i in 0..b {
            for (j, &c) in cols.iter().enumerate() {
                let cv = &self.nodes[c.0].value;
                for r in 0..d {
                    m[r * d + j] = cv.data()[i * d + r];
                }
            }
            let (ld, _, _) = lu_logabsdet(&Tensor::matrix(d, d, m.clone())).expect("square");
            out.push(ld);
        }
        self.push(Op::BatchedLogAbsDet(cols.iter().map(|v| v.0).collect()), Tensor::vector(out))
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => t.axpy(1.0, &delta),
        None => *slot = Some(delta),
    }
}

/// Reverse-mode gradient of a recorded scalar with respect to `wrt` nodes.
///
/// Fails with the offending node index if any recorded value is non-finite.
pub fn gradient(tape: &Tape, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, DiffError> {
    let out_val = tape.value(output);
    if out_val.len() != 1 {
        return Err(DiffError::NotScalar(out_val.shape().to_vec()));
    }
    for id in 0..=output.0 {
        if !tape.nodes[id].value.all_finite() {
            return Err(DiffError::NonFinite { node: id });
        }
    }

    let mut adj: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
    adj[output.0] = Some(Tensor::scalar(1.0));

    for id in (0..=output.0).rev() {
        let g = match adj[id].take() {
            Some(g) => g,
            None => continue,
        };
        let value_of = |i: usize| &tape.nodes[i].value;
        match &tape.nodes[id].op {
            Op::Input | Op::Const => {
                // Leaves: keep the adjoint available for wrt collection.
                adj[id] = Some(g);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[*a], g.clone());
                accumulate(&mut adj[*b], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[*a], g.clone());
                accumulate(&mut adj[*b], g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(&mut adj[*a], g.zip(value_of(*b), |x, y| x * y));
                accumulate(&mut adj[*b], g.zip(value_of(*a), |x, y| x * y));
            }
            Op::Neg(a) => accumulate(&mut adj[*a], g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(&mut adj[*a], g.map(|x| c * x));
            }
            Op::AddScalar(a, _) => accumulate(&mut adj[*a], g),
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let mut ga = g.matmul_nt(value_of(b));
                ga = Tensor::new(value_of(a).shape().to_vec(), ga.data().to_vec());
                accumulate(&mut adj[a], ga);
                let mut gb = value_of(a).matmul_tn(&g);
                gb = Tensor::new(value_of(b).shape().to_vec(), gb.data().to_vec());
                accumulate(&mut adj[b], gb);
            }
            Op::AddRowBroadcast(a, row) => {
                let n = value_of(*a).cols();
                let mut gr = Tensor::zeros(value_of(*row).shape().to_vec());
                for r in 0..value_of(*a).rows() {
                    for c in 0..n {
                        gr.data_mut()[c] += g.data()[r * n + c];
                    }
                }
                accumulate(&mut adj[*a], g);
                accumulate(&mut adj[*row], gr);
            }
            Op::Act(a, kind) => {
                let kind = *kind;
                accumulate(&mut adj[*a], g.zip(value_of(*a), |gz, z| gz * kind.deriv(z)));
            }
            Op::Sum(a) => {
                accumulate(&mut adj[*a], Tensor::filled(value_of(*a).shape().to_vec(), g.item()));
            }
            Op::Mean(a) => {
                let n = value_of(*a).len() as f64;
                accumulate(&mut adj[*a], Tensor::filled(value_of(*a).shape().to_vec(), g.item() / n));
            }
            Op::Slice { input, start, shape } => {
                let len: usize = shape.iter().product();
                let mut gi = Tensor::zeros(value_of(*input).shape().to_vec());
                gi.data_mut()[*start..*start + len].copy_from_slice(g.data());
                accumulate(&mut adj[*input], gi);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (value_of(*a).cols(), value_of(*b).cols());
                let rows = value_of(*a).rows();
                let mut ga = Tensor::zeros(value_of(*a).shape().to_vec());
                let mut gb = Tensor::zeros(value_of(*b).shape().to_vec());
                for r in 0..rows {
                    let grow = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                    gb.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                }
                accumulate(&mut adj[*a], ga);
                accumulate(&mut adj[*b], gb);
            }
            Op::TileRows(a, times) => {
                let len = value_of(*a).len();
                let mut ga = Tensor::zeros(value_of(*a).shape().to_vec());
                for t in 0..*times {
                    for i in 0..len {
                        ga.data_mut()[i] += g.data()[t * len + i];
                    }
                }
                accumulate(&mut adj[*a], ga);
            }
            Op::RepeatRows(a, times) => {
                let cols = value_of(*a).cols();
                let rows = value_of(*a).rows();
                let mut ga = Tensor::zeros(value_of(*a).shape().to_vec());
                for r in 0..rows {
                    for t in 0..*times {
                        let src = (r * times + t) * cols;
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] += g.data()[src + c];
                        }
                    }
                }
                accumulate(&mut adj[*a], ga);
            }
            Op::StackCols(cols) => {
                let d = cols.len();
                for (j, &cid) in cols.iter().enumerate() {
                    let mut gc = Tensor::zeros(value_of(cid).shape().to_vec());
                    for r in 0..d {
                        gc.data_mut()[r] = g.data()[r * d + j];
                    }
                    accumulate(&mut adj[cid], gc);
                }
            }
            Op::LogAbsDet(a) => {
                let m = value_of(*a);
                let (_, _, clamped) = lu_logabsdet(m)?;
                if !clamped {
                    let inv = lu_inverse(m)?;
                    let d = m.rows();
                    let mut gm = Tensor::zeros(vec![d, d]);
                    for r in 0..d {
                        for c in 0..d {
                            gm.data_mut()[r * d + c] = g.item() * inv.data()[c * d + r];
                        }
                    }
                    accumulate(&mut adj[*a], gm);
                }
            }
            Op::BatchedLogAbsDet(cols) => {
                let d = cols.len();
                let b = value_of(cols[0]).rows();
                let mut grads: Vec<Tensor> =
                    cols.iter().map(|&c| Tensor::zeros(value_of(c).shape().to_vec())).collect();
                let mut m = vec![0.0; d * d];
                for i in 0..b {
                    for (j, &c) in cols.iter().enumerate() {
                        for r in 0..d {
                            m[r * d + j] = value_of(c).data()[i * d + r];
                        }
                    }
                    let mt = Tensor::matrix(d, d, m.clone());
                    let (_, _, clamped) = lu_logabsdet(&mt)?;
                    if clamped {
                        continue;
                    }
                    let inv = lu_inverse(&mt)?;
                    for (j, gc) in grads.iter_mut().enumerate() {
                        for r in 0..d {
                            gc.data_mut()[i * d + r] += g.data()[i] * inv.data()[j * d + r];
                        }
                    }
                }
                for (&c, gc) in cols.iter().zip(grads) {
                    accumulate(&mut adj[c], gc);
                }
            }
        }
    }

    Ok(wrt
        .iter()
        .map(|v| adj[v.0].clone().unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape().to_vec())))
        .collect())
}

/// Propagate a forward tangent through the nodes recorded in
/// `[range_start, output]`, seeding node `wrt` with `seed`.
///
/// Tangents are emitted as new tape nodes, so the result can feed further
/// recorded computation (and reverse mode can differentiate through it).
/// Returns a zero constant if the output does not depend on `wrt`.
pub fn forward_tangents(
    tape: &mut Tape,
    range_start: usize,
    output: Var,
    wrt: Var,
    seed: Var,
) -> Result<Var, DiffError> {
    let mut tangent: HashMap<usize, Var> = HashMap::new();
    tangent.insert(wrt.0, seed);
    for id in range_start..=output.0 {
        if tangent.contains_key(&id) {
            continue;
        }
        let op = tape.nodes[id].op.clone();
        let t = match op {
            Op::Input | Op::Const => None,
            Op::Add(a, b) => match (tangent.get(&a).copied(), tangent.get(&b).copied()) {
                (Some(ta), Some(tb)) => Some(tape.add(ta, tb)),
                (Some(ta), None) => Some(ta),
                (None, Some(tb)) => Some(tb),
                (None, None) => None,
            },
            Op::Sub(a, b) => match (tangent.get(&a).copied(), tangent.get(&b).copied()) {
                (Some(ta), Some(tb)) => Some(tape.sub(ta, tb)),
                (Some(ta), None) => Some(ta),
                (None, Some(tb)) => Some(tape.neg(tb)),
                (None, None) => None,
            },
            Op::Mul(a, b) => {
                let ta = tangent.get(&a).copied();
                let tb = tangent.get(&b).copied();
                match (ta, tb) {
                    (Some(ta), Some(tb)) => {
                        let left = tape.mul(ta, Var(b));
                        let right = tape.mul(Var(a), tb);
                        Some(tape.add(left, right))
                    }
                    (Some(ta), None) => Some(tape.mul(ta, Var(b))),
                    (None, Some(tb)) => Some(tape.mul(Var(a), tb)),
                    (None, None) => None,
                }
            }
            Op::Neg(a) => tangent.get(&a).map(|&ta| tape.neg(ta)),
            Op::Scale(a, c) => tangent.get(&a).map(|&ta| tape.scale(ta, c)),
            Op::AddScalar(a, _) => tangent.get(&a).copied(),
            Op::Matmul(a, b) => {
                let ta = tangent.get(&a).copied();
                let tb = tangent.get(&b).copied();
                match (ta, tb) {
                    (Some(ta), Some(tb)) => {
                        let left = tape.matmul(ta, Var(b));
                        let right = tape.matmul(Var(a), tb);
                        Some(tape.add(left, right))
                    }
                    (Some(ta), None) => Some(tape.matmul(ta, Var(b))),
                    (None, Some(tb)) => Some(tape.matmul(Var(a), tb)),
                    (None, None) => None,
                }
            }
            Op::AddRowBroadcast(a, row) => {
                let ta = tangent.get(&a).copied();
                let tr = tangent.get(&row).copied();
                match (ta, tr) {
                    (Some(ta), Some(tr)) => Some(tape.add_row_broadcast(ta, tr)),
                    (Some(ta), None) => Some(ta),
                    (None, Some(tr)) => {
                        let zero = tape.constant(Tensor::zeros(tape.value(Var(a)).shape().to_vec()));
                        Some(tape.add_row_broadcast(zero, tr))
                    }
                    (None, None) => None,
                }
            }
            Op::Act(a, kind) => match tangent.get(&a).copied() {
                None => None,
                Some(ta) => {
                    let prime = match kind {
                        Activation::Softplus => tape.act(Var(a), Activation::Sigmoid),
                        Activation::Selu => tape.act(Var(a), Activation::SeluPrime),
                        Activation::Celu => tape.act(Var(a), Activation::CeluPrime),
                        Activation::Sigmoid => {
                            let s = tape.act(Var(a), Activation::Sigmoid);
                            let ns = tape.neg(s);
                            let one_minus = tape.add_scalar(ns, 1.0);
                            tape.mul(s, one_minus)
                        }
                        Activation::SeluPrime | Activation::CeluPrime => {
                            return Err(DiffError::UnsupportedTangent { node: id })
                        }
                    };
                    Some(tape.mul(prime, ta))
                }
            },
            Op::Sum(a) => tangent.get(&a).map(|&ta| tape.sum(ta)),
            Op::Mean(a) => tangent.get(&a).map(|&ta| tape.mean(ta)),
            Op::Slice { input, start, shape } => {
                tangent.get(&input).map(|&ti| tape.slice(ti, start, shape.clone()))
            }
            Op::ConcatCols(a, b) => {
                let ta = tangent.get(&a).copied();
                let tb = tangent.get(&b).copied();
                match (ta, tb) {
                    (None, None) => None,
                    _ => {
                        let ta = ta.unwrap_or_else(|| {
                            let z = Tensor::zeros(tape.value(Var(a)).shape().to_vec());
                            tape.constant(z)
                        });
                        let tb = tb.unwrap_or_else(|| {
                            let z = Tensor::zeros(tape.value(Var(b)).shape().to_vec());
                            tape.constant(z)
                        });
                        Some(tape.concat_cols(ta, tb))
                    }
                }
            }
            Op::TileRows(a, times) => tangent.get(&a).map(|&ta| tape.tile_rows(ta, times)),
            Op::RepeatRows(a, times) => tangent.get(&a).map(|&ta| tape.repeat_rows(ta, times)),
            Op::StackCols(cols) => {
                if cols.iter().all(|c| !tangent.contains_key(c)) {
                    None
                } else {
                    let tcols: Vec<Var> = cols
                        .iter()
                        .map(|c| {
                            tangent.get(c).copied().unwrap_or_else(|| {
                                let z = Tensor::zeros(tape.value(Var(*c)).shape().to_vec());
                                tape.constant(z)
                            })
                        })
                        .collect();
                    Some(tape.stack_cols(&tcols))
                }
            }
            Op::LogAbsDet(_) | Op::BatchedLogAbsDet(_) => {
                if matches!(&tape.nodes[id].op, Op::LogAbsDet(a) if !tangent.contains_key(a))
                    || matches!(&tape.nodes[id].op, Op::BatchedLogAbsDet(cs) if cs.iter().all(|c| !tangent.contains_key(c)))
                {
                    None
                } else {
                    return Err(DiffError::UnsupportedTangent { node: id });
                }
            }
        };
        if let Some(t) = t {
            tangent.insert(id, t);
        }
    }
    Ok(match tangent.get(&output.0) {
        Some(&t) => t,
        None => {
            let z = Tensor::zeros(tape.value(output).shape().to_vec());
            tape.constant(z)
        }
    })
}

/// Jacobian columns of a recorded map: one forward-tangent pass per input
/// coordinate, seeded with basis rows. Input and output must both be B×D.
pub fn jacobian_columns(
    tape: &mut Tape,
    range_start: usize,
    output: Var,
    x: Var,
) -> Result<Vec<Var>, DiffError> {
    let d = tape.value(x).cols();
    let b = tape.value(x).rows();
    let out = tape.value(output);
    if out.cols() != d || out.rows() != b {
        return Err(DiffError::Shape(format!(
            "jacobian needs matching input/output shapes, got {:?} to {:?}",
            tape.value(x).shape(),
            out.shape()
        )));
    }
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let seed = tape.constant(Tensor::basis_rows(b, d, j));
        cols.push(forward_tangents(tape, range_start, output, x, seed)?);
    }
    Ok(cols)
}

/// D×D Jacobian of a recorded single-point map, as a differentiable node.
pub fn jacobian_on(tape: &mut Tape, range_start: usize, output: Var, x: Var) -> Result<Var, DiffError> {
    if tape.value(x).rows() != 1 {
        return Err(DiffError::Shape("jacobian_on expects a single row point".into()));
    }
    let cols = jacobian_columns(tape, range_start, output, x)?;
    Ok(tape.stack_cols(&cols))
}

/// Jacobian of `f` at `x` as a plain tensor (fresh tape).
pub fn jacobian_tensor(
    f: impl FnOnce(&mut Tape, Var) -> Var,
    x: &Tensor,
) -> Result<Tensor, DiffError> {
    let d = x.cols();
    let mut tape = Tape::new();
    let xv = tape.input(Tensor::matrix(1, d, x.data().to_vec()));
    let start = tape.len();
    let y = f(&mut tape, xv);
    let m = jacobian_on(&mut tape, start, y, xv)?;
    Ok(tape.value(m).clone())
}

/// Gradient of a scalar-valued recorded function at `params` (fresh tape).
///
/// The function body may itself record Jacobians and log-dets; they are
/// ordinary tape nodes, so this differentiates through them.
pub fn gradient_fn(
    f: impl FnOnce(&mut Tape, Var) -> Var,
    params: &Tensor,
) -> Result<Tensor, DiffError> {
    let mut tape = Tape::new();
    let p = tape.input(params.clone());
    let out = f(&mut tape, p);
    let grads = gradient(&tape, out, &[p])?;
    Ok(grads.into_iter().next().expect("one wrt"))
}

/// `log|det M|` with sign, clamped at 1e-12 (value-level).
pub fn logabsdet(m: &Tensor) -> Result<(f64, f64), DiffError> {
    let (ld, sign, _) = lu_logabsdet(m)?;
    Ok((ld, sign))
}

/// Per-row clamped `log|det|` for a batch of Jacobians given as column
/// batches (each B×D). Value-level companion of the tape op.
pub fn batched_logabsdet_values(cols: &[&Tensor]) -> Result<Vec<f64>, DiffError> {
    let d = cols.len();
    let b = cols[0].rows();
    let mut out = Vec::with_capacity(b);
    let mut m = vec![0.0; d * d];
    for i in 0..b {
        for (j, c) in cols.iter().enumerate() {
            for r in 0..d {
                m[r * d + j] = c.data()[i * d + r];
            }
        }
        let (ld, _, _) = lu_logabsdet(&Tensor::matrix(d, d, m.clone()))?;
        out.push(ld);
    }
    Ok(out)
}
