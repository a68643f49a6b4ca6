//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is a 2-D [`Tensor`]; scalars are `1 x 1`. The op
//! set is exactly what the GAT forward pass and modularity loss use, plus two
//! sparse edge primitives ([`Tape::edge_scores`], [`Tape::neighbor_aggregate`])
//! that let attention run over ragged neighbourhoods without dense masking.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Neighborhoods;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Selu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Selu => "selu",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "selu" => Ok(Activation::Selu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Deliberate backward-rule faults for exercising the gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    NegateSiluBackward,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    LeakyRelu(Var, T),
    Silu(Var),
    Selu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Arc<Vec<usize>>),
    SumRows(Var),
    FrobeniusNorm(Var),
    TraceQuad(Var, Arc<Tensor<T>>),
    EdgeScores(Var, Arc<Neighborhoods>),
    NeighborAggregate(Var, Var, Arc<Neighborhoods>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward pass in topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<Fault>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.shape().len() == 2);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn as_matrix(t: Tensor<T>) -> Tensor<T> {
        if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(vec![r, c]).expect("same element count")
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Self::as_matrix(value), Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Self::as_matrix(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient; zeros when nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b)).map_err(|_| mismatch("matmul", self.shape(a), self.shape(b)))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `1 x c` row vector to every row of an `n x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(mismatch("add_row", va.shape(), vr.shape()));
        }
        let c = va.cols();
        let value = Tensor::from_fn(va.rows(), c, |i, j| va.get(i, j) + vr.get(0, j));
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols inputs"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let (l, al) = (T::lit(SELU_LAMBDA), T::lit(SELU_ALPHA));
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { l * x } else { l * al * (x.exp() - T::one()) });
        let rg = self.rg(&[a]);
        self.push(value, Op::Selu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Silu => self.silu(a),
            Activation::Selu => self.selu(a),
            Activation::Relu => self.relu(a),
        }
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Softmax over each contiguous row segment `offsets[s]..offsets[s+1]` of a
    /// single-column input.
    pub fn segment_softmax(&mut self, a: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let valid = va.cols() == 1
            && offsets.first() == Some(&0)
            && offsets.last() == Some(&va.rows())
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !valid {
            return Err(mismatch("segment_softmax", va.shape(), &[offsets.last().copied().unwrap_or(0), 1]));
        }
        let mut value = va.clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut value.data_mut()[w[0]..w[1]]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SegmentSoftmax(a, offsets), rg))
    }

    /// Column sums `sum_i a_i` as a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut sums = vec![T::zero(); c];
        for i in 0..va.rows() {
            for (s, &x) in sums.iter_mut().zip(va.row(i)) {
                *s += x;
            }
        }
        let value = Tensor::new(vec![1, c], sums).expect("row shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let norm = self.value(a).data().iter().map(|&x| x * x).sum::<T>().sqrt();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(norm), Op::FrobeniusNorm(a), rg)
    }

    /// `Tr(C^T B C)` for a constant square `B`.
    pub fn trace_quadratic_form(&mut self, c: Var, b: Arc<Tensor<T>>) -> Result<Var> {
        let vc = self.value(c);
        if b.rows() != b.cols() || b.cols() != vc.rows() {
            return Err(mismatch("trace_quadratic_form", b.shape(), vc.shape()));
        }
        let bc = b.matmul(vc)?;
        let tr: T = bc.data().iter().zip(vc.data()).map(|(&x, &y)| x * y).sum();
        let rg = self.rg(&[c]);
        Ok(self.push(Tensor::scalar(tr), Op::TraceQuad(c, b), rg))
    }

    /// Per-edge attention logits `s[src, 0] + s[dst, 1]` from an `n x 2` score
    /// matrix, one row per directed edge in neighbourhood order.
    pub fn edge_scores(&mut self, s: Var, nbrs: Arc<Neighborhoods>) -> Result<Var> {
        let vs = self.value(s);
        if vs.cols() != 2 || vs.rows() != nbrs.nodes() {
            return Err(mismatch("edge_scores", vs.shape(), &[nbrs.nodes(), 2]));
        }
        let data: Vec<T> = nbrs
            .sources()
            .iter()
            .zip(nbrs.targets())
            .map(|(&i, &j)| vs.get(i, 0) + vs.get(j, 1))
            .collect();
        let value = Tensor::new(vec![nbrs.num_edges(), 1], data)?;
        let rg = self.rg(&[s]);
        Ok(self.push(value, Op::EdgeScores(s, nbrs), rg))
    }

    /// `out_i = sum_{e in N(i)} alpha_e * values[target(e)]`.
    pub fn neighbor_aggregate(&mut self, alpha: Var, values: Var, nbrs: Arc<Neighborhoods>) -> Result<Var> {
        let (va, vv) = (self.value(alpha), self.value(values));
        if va.cols() != 1 || va.rows() != nbrs.num_edges() {
            return Err(mismatch("neighbor_aggregate", va.shape(), &[nbrs.num_edges(), 1]));
        }
        if vv.rows() != nbrs.nodes() {
            return Err(mismatch("neighbor_aggregate", vv.shape(), &[nbrs.nodes(), vv.cols()]));
        }
        let f = vv.cols();
        let mut out = Tensor::zeros(&[nbrs.nodes(), f]);
        for i in 0..nbrs.nodes() {
            let row = out.row_mut(i);
            for e in nbrs.range(i) {
                let w = va.data()[e];
                for (o, &x) in row.iter_mut().zip(vv.row(nbrs.targets()[e])) {
                    *o += w * x;
                }
            }
        }
        let rg = self.rg(&[alpha, values]);
        Ok(self.push(out, Op::NeighborAggregate(alpha, values, nbrs), rg))
    }

    /// Resets every gradient to zero and re-arms [`Self::backward`].
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(T::zero());
            }
        }
        self.consumed = false;
    }

    /// Accumulates `d root / d node` into every node that requires grad.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.consumed = true;
        let one = Tensor::filled(self.shape(root), T::one());
        accumulate(&mut self.nodes[root.0], one);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (parent, delta) in contributions {
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut self.nodes[parent.0], delta);
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()).expect("shapes checked");
                let db = val(*a).transpose().matmul(g).expect("shapes checked");
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, r) => {
                let c = g.cols();
                let mut dr = vec![T::zero(); c];
                for i in 0..g.rows() {
                    for (s, &x) in dr.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                vec![(*a, g.clone()), (*r, Tensor::new(vec![1, c], dr).expect("row"))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).cols();
                        let d = Tensor::from_fn(g.rows(), w, |i, j| g.get(i, offset + j));
                        offset += w;
                        (p, d)
                    })
                    .collect()
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                vec![(*a, zip_map(g, x, |g, x| if x > T::zero() { g } else { g * *slope }))]
            }
            Op::Silu(a) => {
                let x = val(*a);
                let sign = if self.fault == Some(Fault::NegateSiluBackward) {
                    -T::one()
                } else {
                    T::one()
                };
                vec![(
                    *a,
                    zip_map(g, x, |g, x| {
                        let s = sigmoid(x);
                        sign * g * s * (T::one() + x * (T::one() - s))
                    }),
                )]
            }
            Op::Selu(a) => {
                let x = val(*a);
                let (l, al) = (T::lit(SELU_LAMBDA), T::lit(SELU_ALPHA));
                vec![(*a, zip_map(g, x, |g, x| if x > T::zero() { g * l } else { g * l * al * x.exp() }))]
            }
            Op::Relu(a) => {
                let x = val(*a);
                vec![(*a, zip_map(g, x, |g, x| if x > T::zero() { g } else { T::zero() }))]
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for i in 0..y.rows() {
                    softmax_backward(d.row_mut(i), y.row(i));
                }
                vec![(*a, d)]
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut d = g.clone();
                for w in offsets.windows(2) {
                    softmax_backward(&mut d.data_mut()[w[0]..w[1]], &y.data()[w[0]..w[1]]);
                }
                vec![(*a, d)]
            }
            Op::SumRows(a) => {
                let x = val(*a);
                vec![(*a, Tensor::from_fn(x.rows(), x.cols(), |_, j| g.get(0, j)))]
            }
            Op::FrobeniusNorm(a) => {
                let norm = y.item();
                let gs = g.item();
                let x = val(*a);
                let d = if norm == T::zero() {
                    Tensor::zeros(x.shape())
                } else {
                    x.map(|v| gs * v / norm)
                };
                vec![(*a, d)]
            }
            Op::TraceQuad(c, b) => {
                let x = val(*c);
                let gs = g.item();
                let bc = b.matmul(x).expect("shapes checked");
                let btc = b.transpose().matmul(x).expect("shapes checked");
                vec![(*c, zip_map(&bc, &btc, |p, q| gs * (p + q)))]
            }
            Op::EdgeScores(s, nbrs) => {
                let mut d = Tensor::zeros(val(*s).shape());
                for (e, (&i, &j)) in nbrs.sources().iter().zip(nbrs.targets()).enumerate() {
                    let ge = g.data()[e];
                    d.row_mut(i)[0] += ge;
                    d.row_mut(j)[1] += ge;
                }
                vec![(*s, d)]
            }
            Op::NeighborAggregate(alpha, values, nbrs) => {
                let (va, vv) = (val(*alpha), val(*values));
                let mut dalpha = Tensor::zeros(va.shape());
                let mut dvalues = Tensor::zeros(vv.shape());
                for i in 0..nbrs.nodes() {
                    let gi = g.row(i);
                    for e in nbrs.range(i) {
                        let j = nbrs.targets()[e];
                        let dot: T = gi.iter().zip(vv.row(j)).map(|(&a, &b)| a * b).sum();
                        dalpha.data_mut()[e] = dot;
                        let w = va.data()[e];
                        for (o, &x) in dvalues.row_mut(j).iter_mut().zip(gi) {
                            *o += w * x;
                        }
                    }
                }
                vec![(*alpha, dalpha), (*values, dvalues)]
            }
        }
    }
}

fn accumulate<T: Scalar>(node: &mut Node<T>, delta: Tensor<T>) {
    match node.grad.as_mut() {
        Some(g) => {
            for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => node.grad = Some(delta),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Max-shifted softmax of one group.
pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// In place: `g <- y ⊙ (g - <g, y>)`.
fn softmax_backward<T: Scalar>(g: &mut [T], y: &[T]) {
    let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
    for (gi, &yi) in g.iter_mut().zip(y) {
        *gi = yi * (*gi - dot);
    }
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error)` in parameter order.
    pub per_param: Vec<(String, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|(_, e)| *e < self.tol)
    }

    /// Name of the parameter with the largest error.
    pub fn worst(&self) -> Option<&str> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n.as_str())
    }
}

/// Compares backward-pass gradients with central finite differences.
///
/// `build` receives a fresh tape and one trainable leaf per parameter (in
/// order) and must return a scalar root. Relative error per entry is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<T, F>(build: F, params: &mut [(String, Tensor<T>)], step: T, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let eval = |params: &[(String, Tensor<T>)]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(_, p)| tape.param(p.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, p)| tape.param(p.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let first = tape.value(root).item();
    let second = eval(params)?;
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(Error::NonDeterministic {
            first: first.as_f64(),
            second: second.as_f64(),
        });
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let two = T::lit(2.0);
    let mut per_param = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut worst = 0.0f64;
        for e in 0..params[p].1.len() {
            let orig = params[p].1.data()[e];
            params[p].1.data_mut()[e] = orig + step;
            let plus = eval(params);
            params[p].1.data_mut()[e] = orig - step;
            let minus = eval(params);
            params[p].1.data_mut()[e] = orig;
            let numeric = ((plus? - minus?) / (two * step)).as_f64();
            let a = analytic[p].data()[e].as_f64();
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        per_param.push((params[p].0.clone(), worst));
    }
    Ok(GradCheckReport { per_param, tol })
}
