//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every forward operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Nodes only reference earlier nodes, so the tape is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{gemm_into, Matrix, Real};

/// Denominator guard used by [`Tape::row_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Which operand is broadcast in an elementwise add/sub.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// rhs is `1 × cols`, repeated down the rows.
    Row,
    /// rhs is `rows × 1`, repeated across the columns.
    Col,
}

/// CSR neighbor lists for the masked window average: row `i` of the output is
/// the mean of the input rows `neighbors[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowIndex {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl WindowIndex {
    pub fn new(offsets: Vec<usize>, neighbors: Vec<usize>) -> Result<Self> {
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&neighbors.len())
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::contract(
                "window index offsets must start at 0, end at the neighbor count, and leave no row empty",
            ));
        }
        let n = offsets.len() - 1;
        if neighbors.iter().any(|&j| j >= n) {
            return Err(Error::contract("window neighbor out of range"));
        }
        Ok(WindowIndex { offsets, neighbors })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    BlockRowL2Norm { input: usize, block: usize },
    RowNormalize(usize),
    Hadamard(usize, usize),
    FrobeniusSq(usize),
    Sum(usize),
    Log(usize),
    Transpose(usize),
    GatherRows { input: usize, index: Arc<[usize]> },
    ScatterMean { input: usize, index: Arc<[usize]>, counts: Arc<[usize]> },
    MaskedMeanFilter { input: usize, window: Arc<WindowIndex> },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to the requires-grad leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `leaf`, or `None` if the leaf was created without
    /// requires-grad.
    pub fn get(&self, leaf: Var) -> Option<&Matrix<T>> {
        self.grads.get(leaf.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, leaf: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(leaf.id).and_then(|g| g.take())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }
}

fn dim_err(op: &'static str, a: Var, b: Var) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn val(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.id].value
    }

    /// Records an input. Leaves have no provenance.
    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        self.val(v)
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.val(v).data()[0]
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.id].op, Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(dim_err("matmul", a, b));
        }
        let mut out = Matrix::zeros(a.rows, b.cols);
        gemm_into(T::one(), self.val(a), false, self.val(b), false, T::zero(), &mut out, "matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a.id, b.id), rg))
    }

    fn broadcast_kind(op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            Ok(Broadcast::None)
        } else if b.rows == 1 && b.cols == a.cols {
            Ok(Broadcast::Row)
        } else if b.cols == 1 && b.rows == a.rows {
            Ok(Broadcast::Col)
        } else {
            Err(dim_err(op, a, b))
        }
    }

    fn elementwise(&self, a: Var, b: Var, kind: Broadcast, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let av = self.val(a);
        let bv = self.val(b);
        Matrix::from_fn(a.rows, a.cols, |i, j| {
            let rhs = match kind {
                Broadcast::None => bv[(i, j)],
                Broadcast::Row => bv[(0, j)],
                Broadcast::Col => bv[(i, 0)],
            };
            f(av[(i, j)], rhs)
        })
    }

    /// `a + b`, where `b` may also be a row or column vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = Self::broadcast_kind("add", a, b)?;
        let out = self.elementwise(a, b, kind, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a.id, b.id, kind), rg))
    }

    /// `a - b`, where `b` may also be a row or column vector.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = Self::broadcast_kind("sub", a, b)?;
        let out = self.elementwise(a, b, kind, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a.id, b.id, kind), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.val(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a.id, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.val(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a.id), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a.id), rg)
    }

    /// Euclidean norm of each row: `n × c → n × 1`.
    pub fn row_l2norm(&mut self, a: Var) -> Result<Var> {
        self.block_row_l2norm(a, a.cols)
    }

    /// Euclidean norm of each row restricted to consecutive column blocks of
    /// width `block`: `n × (k·block) → n × k`.
    pub fn block_row_l2norm(&mut self, a: Var, block: usize) -> Result<Var> {
        if block == 0 || a.cols % block != 0 {
            return Err(Error::Dimension {
                op: "block_row_l2norm",
                lhs: a.shape(),
                rhs: (1, block),
            });
        }
        let k = a.cols / block;
        let av = self.val(a);
        let out = Matrix::from_fn(a.rows, k, |i, j| {
            let row = &av.row(i)[j * block..(j + 1) * block];
            row.iter().fold(T::zero(), |s, &x| s + x * x).sqrt()
        });
        let rg = self.rg(a);
        Ok(self.push(out, Op::BlockRowL2Norm { input: a.id, block }, rg))
    }

    /// Divides every row by its sum (plus [`NORMALIZE_EPS`]).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let eps = T::of(NORMALIZE_EPS);
        let mut out = self.val(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let s = row.iter().fold(T::zero(), |acc, &x| acc + x) + eps;
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::RowNormalize(a.id), rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(dim_err("hadamard", a, b));
        }
        let out = self.elementwise(a, b, Broadcast::None, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Hadamard(a.id, b.id), rg))
    }

    /// Squared Frobenius norm, a `1 × 1` value.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.val(a).frobenius_sq());
        let rg = self.rg(a);
        self.push(out, Op::FrobeniusSq(a.id), rg)
    }

    /// Sum of all entries, a `1 × 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a.id), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(out, Op::Log(a.id), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.val(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a.id), rg)
    }

    /// `out[i] = a[index[i]]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        if let Some(&bad) = index.iter().find(|&&i| i >= a.rows) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: a.shape(),
                rhs: (bad, 0),
            });
        }
        let out = self.val(a).select_rows(&index);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows { input: a.id, index }, rg))
    }

    /// `out[g] = mean{ a[i] : index[i] = g }` for `g in 0..groups`. Every group
    /// must have at least one member.
    pub fn scatter_mean(&mut self, a: Var, index: Arc<[usize]>, groups: usize) -> Result<Var> {
        if index.len() != a.rows {
            return Err(Error::Dimension {
                op: "scatter_mean",
                lhs: a.shape(),
                rhs: (index.len(), 1),
            });
        }
        let mut counts = vec![0usize; groups];
        for &g in index.iter() {
            if g >= groups {
                return Err(Error::contract(format!(
                    "scatter_mean index {g} out of range for {groups} groups"
                )));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::contract(format!("scatter_mean group {empty} is empty")));
        }
        let av = self.val(a);
        let mut out = Matrix::zeros(groups, a.cols);
        for (i, &g) in index.iter().enumerate() {
            for (o, &x) in out.row_mut(g).iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            let inv = T::one() / T::of(c as f64);
            for o in out.row_mut(g) {
                *o *= inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::ScatterMean {
                input: a.id,
                index,
                counts: counts.into(),
            },
            rg,
        ))
    }

    /// Row `i` of the output is the mean of the input rows listed for `i` in
    /// `window` (the in-mask pixels of its spatial window).
    pub fn masked_mean_filter(&mut self, a: Var, window: Arc<WindowIndex>) -> Result<Var> {
        if window.len() != a.rows {
            return Err(Error::Dimension {
                op: "masked_mean_filter",
                lhs: a.shape(),
                rhs: (window.len(), a.cols),
            });
        }
        let av = self.val(a);
        let mut out = Matrix::zeros(a.rows, a.cols);
        for i in 0..a.rows {
            let nb = window.neighbors(i);
            let inv = T::one() / T::of(nb.len() as f64);
            let row = out.row_mut(i);
            for &j in nb {
                for (o, &x) in row.iter_mut().zip(av.row(j)) {
                    *o += x;
                }
            }
            for o in row.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedMeanFilter { input: a.id, window }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if loss.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Matrix<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Matrix::filled(1, 1, T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads)?;
        }

        for (id, node) in nodes.iter().enumerate() {
            let keep = node.requires_grad && matches!(node.op, Op::Leaf);
            if keep {
                if grads[id].is_none() {
                    let (r, c) = node.value.shape();
                    grads[id] = Some(Matrix::zeros(r, c));
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Matrix<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'a mut Matrix<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let (r, c) = nodes[id].value.shape();
    Some(grads[id].get_or_insert_with(|| Matrix::zeros(r, c)))
}

fn accumulate_broadcast<T: Real>(target: &mut Matrix<T>, g: &Matrix<T>, kind: Broadcast, sign: T) {
    match kind {
        Broadcast::None => {
            for (t, &x) in target.data_mut().iter_mut().zip(g.data()) {
                *t += sign * x;
            }
        }
        Broadcast::Row => {
            for i in 0..g.rows() {
                for (t, &x) in target.data_mut().iter_mut().zip(g.row(i)) {
                    *t += sign * x;
                }
            }
        }
        Broadcast::Col => {
            for i in 0..g.rows() {
                let s = g.row(i).iter().fold(T::zero(), |acc, &x| acc + x);
                target.data_mut()[i] += sign * s;
            }
        }
    }
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Matrix<T>,
    grads: &mut [Option<Matrix<T>>],
) -> Result<()> {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                gemm_into(T::one(), g, false, val(*b), true, T::one(), ga, "matmul backward")?;
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gemm_into(T::one(), val(*a), true, g, false, T::one(), gb, "matmul backward")?;
            }
        }
        Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if let Some(ga) = slot(grads, nodes, *a) {
                accumulate_broadcast(ga, g, Broadcast::None, T::one());
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                accumulate_broadcast(gb, g, *kind, sign);
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (t, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *t += *c * x;
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (t, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *t += x;
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((t, &x), &v) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    if v > T::zero() {
                        *t += x;
                    }
                }
            }
        }
        Op::BlockRowL2Norm { input, block } => {
            let av = val(*input);
            let norms = &node.value;
            if let Some(ga) = slot(grads, nodes, *input) {
                let k = norms.cols();
                for i in 0..av.rows() {
                    for j in 0..k {
                        let nrm = norms[(i, j)];
                        // Subgradient 0 at the origin.
                        if nrm <= T::zero() {
                            continue;
                        }
                        let coef = g[(i, j)] / nrm;
                        for c in j * block..(j + 1) * block {
                            ga[(i, c)] += coef * av[(i, c)];
                        }
                    }
                }
            }
        }
        Op::RowNormalize(a) => {
            let av = val(*a);
            let eps = T::of(NORMALIZE_EPS);
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..av.rows() {
                    let x = av.row(i);
                    let gr = g.row(i);
                    let s = x.iter().fold(T::zero(), |acc, &v| acc + v) + eps;
                    let dot = x.iter().zip(gr).fold(T::zero(), |acc, (&v, &w)| acc + v * w);
                    let corr = dot / (s * s);
                    for (t, &w) in ga.row_mut(i).iter_mut().zip(gr) {
                        *t += w / s - corr;
                    }
                }
            }
        }
        Op::Hadamard(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((t, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(val(*b).data()) {
                    *t += x * y;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((t, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(val(*a).data()) {
                    *t += x * y;
                }
            }
        }
        Op::FrobeniusSq(a) => {
            let two_g = T::of(2.0) * g.data()[0];
            if let Some(ga) = slot(grads, nodes, *a) {
                for (t, &x) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                    *t += two_g * x;
                }
            }
        }
        Op::Sum(a) => {
            let g0 = g.data()[0];
            if let Some(ga) = slot(grads, nodes, *a) {
                for t in ga.data_mut() {
                    *t += g0;
                }
            }
        }
        Op::Log(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((t, &x), &v) in ga.data_mut().iter_mut().zip(g.data()).zip(val(*a).data()) {
                    *t += x / v;
                }
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga[(j, i)] += g[(i, j)];
                    }
                }
            }
        }
        Op::GatherRows { input, index } => {
            if let Some(ga) = slot(grads, nodes, *input) {
                for (i, &src) in index.iter().enumerate() {
                    for (t, &x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *t += x;
                    }
                }
            }
        }
        Op::ScatterMean {
            input,
            index,
            counts,
        } => {
            if let Some(ga) = slot(grads, nodes, *input) {
                for (i, &grp) in index.iter().enumerate() {
                    let inv = T::one() / T::of(counts[grp] as f64);
                    for (t, &x) in ga.row_mut(i).iter_mut().zip(g.row(grp)) {
                        *t += inv * x;
                    }
                }
            }
        }
        Op::MaskedMeanFilter { input, window } => {
            if let Some(ga) = slot(grads, nodes, *input) {
                for i in 0..window.len() {
                    let nb = window.neighbors(i);
                    let inv = T::one() / T::of(nb.len() as f64);
                    for &j in nb {
                        for (t, &x) in ga.row_mut(j).iter_mut().zip(g.row(i)) {
                            *t += inv * x;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over leaves and entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(leaf, entry)` where the max was attained.
    pub worst: Option<(usize, usize)>,
    /// First `(leaf, entry)` where either gradient was NaN or infinite.
    pub non_finite: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tol
    }
}

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences, at 64-bit precision.
pub fn grad_check<F>(f: F, leaves: &[Matrix<f64>]) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Matrix<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
    };
    let mut probe: Vec<Matrix<f64>> = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf requires grad");
        for e in 0..leaves[li].data().len() {
            let orig = leaves[li].data()[e];
            probe[li].data_mut()[e] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[li].data_mut()[e] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[li].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            if !a.is_finite() || !numeric.is_finite() {
                if report.non_finite.is_none() {
                    report.non_finite = Some((li, e));
                }
                continue;
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((li, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows)
    }

    #[test]
    fn row_l2norm_handles_zero_row() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[&[3.0, 4.0], &[0.0, 0.0]]), false);
        let n = t.row_l2norm(x).unwrap();
        assert_eq!(t.value(n).data(), &[5.0, 0.0]);
    }

    #[test]
    fn scatter_mean_averages_groups() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[&[1.0], &[3.0], &[5.0]]), false);
        let s = t.scatter_mean(x, vec![0, 0, 1].into(), 2).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, 5.0]);
    }

    #[test]
    fn scatter_mean_rejects_empty_group() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(&[&[1.0], &[3.0]]), false);
        assert!(matches!(
            t.scatter_mean(x, vec![0, 0].into(), 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[&[3.0]]), true);
        let y = t.frobenius_sq(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[&[1.0, 2.0]]), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_without_grad_leaves_is_noop() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0]]));
        let y = t.frobenius_sq(x);
        let g = t.backward(y).unwrap();
        assert!(g.is_empty());
        assert!(g.get(x).is_none());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Matrix::zeros(2, 3), false);
        let b = t.leaf(Matrix::zeros(2, 3), false);
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "dimension mismatch in matmul: (2, 3) vs (2, 3)");
        let c = t.leaf(Matrix::zeros(3, 2), false);
        assert!(matches!(t.hadamard(a, c), Err(Error::Dimension { op: "hadamard", .. })));
        assert!(matches!(t.add(a, c), Err(Error::Dimension { op: "add", .. })));
    }

    #[test]
    fn broadcast_add_sums_gradient_over_rows() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(3, 2), false);
        let b = t.leaf(m(&[&[1.0, 2.0]]), true);
        let y = t.add(x, b).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn kl_at_minimum_has_zero_row_sum_gradient() {
        // KL(p || q) with p = q, q row-normalized from raw scores.
        let p = m(&[&[0.2, 0.3, 0.5], &[0.6, 0.1, 0.3]]);
        let mut t = Tape::new();
        let raw = t.leaf(p.clone(), true);
        let q = t.row_normalize(raw);
        let target = t.constant(p);
        let lq = t.log(q);
        let cross = t.hadamard(target, lq).unwrap();
        let s = t.sum(cross);
        let loss = t.scale(s, -1.0);
        let g = t.backward(loss).unwrap();
        let gq = g.get(raw).unwrap();
        for i in 0..2 {
            let row: f64 = gq.row(i).iter().sum();
            assert!(row.abs() < 1e-9, "row {i} sums to {row}");
        }
    }

    #[test]
    fn grad_check_reports_nan_entry() {
        // The negative entry poisons the loss, so every probe sees NaN.
        let leaf = m(&[&[1.0, -1.0]]);
        let rep = grad_check(
            |t, v| {
                let l = t.log(v[0]);
                Ok(t.sum(l))
            },
            &[leaf],
        )
        .unwrap();
        assert!(rep.non_finite.is_some());
        assert!(!rep.passed(1e-4));
    }
}
