//! Dense-matrix reverse-mode automatic differentiation.
//!
//! Every quantity is a 64-bit matrix; vectors are `k x 1` and scalars are
//! `1 x 1`. Operations record themselves into a computation graph, and
//! [`Tensor::backward`] replays the reachable subgraph in reverse creation
//! order (a Wengert tape) to accumulate gradients into the leaves that were
//! created with `requires_grad`.
//!
//! The op set is exactly what the forecasting architecture needs: matrix
//! products, elementwise activations, structural ops (transpose, concat,
//! slice, reshape), row softmax (plain and masked), bias broadcasts, and a
//! fused weighted-absolute-difference aggregation used by the cross-modal
//! fusion layers.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{FtnError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A node in the computation graph: either a leaf (parameter or constant)
/// or the output of a recorded operation.
///
/// `Tensor` is a cheap handle (`Rc`); cloning shares the node. Values are
/// immutable after creation; only leaf gradient buffers are written, and
/// only during [`Tensor::backward`].
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.value.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

struct Node {
    id: u64,
    value: Array2<f64>,
    grad: RefCell<Option<Array2<f64>>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Hadamard(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    Abs(Tensor),
    Transpose(Tensor),
    Concat(Vec<Tensor>, usize),
    Slice(Tensor, usize, Range<usize>),
    Sum(Tensor, Option<usize>),
    SoftmaxRows(Tensor),
    /// Row softmax restricted to entries where the (constant) mask is
    /// nonzero; fully masked rows produce all-zero rows.
    MaskedSoftmaxRows(Tensor, Rc<Array2<f64>>),
    /// out[i,j] = x[i,j] + b[j,0]
    AddRowBias(Tensor, Tensor),
    /// out[i,j] = x[i,j] + b[i,0]
    AddColBias(Tensor, Tensor),
    /// out[i,j] = u[i,0] + v[j,0]
    OuterSum(Tensor, Tensor),
    Reshape(Tensor),
    /// out[i,f] = sum_j w[i,j] * |q[i,f] - r[j,f]|
    WeightedAbsDiffAgg {
        weights: Tensor,
        left: Tensor,
        right: Tensor,
    },
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddColBias(a, b)
            | Op::OuterSum(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Transpose(a)
            | Op::Slice(a, _, _)
            | Op::Sum(a, _)
            | Op::SoftmaxRows(a)
            | Op::MaskedSoftmaxRows(a, _)
            | Op::Reshape(a) => vec![a],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::WeightedAbsDiffAgg {
                weights,
                left,
                right,
            } => vec![weights, left, right],
        }
    }
}

fn dim_err(op: &'static str, lhs: &Array2<f64>, rhs: &Array2<f64>) -> FtnError {
    FtnError::Dimension {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Tensor {
    fn new(value: Array2<f64>, requires_grad: bool, op: Op) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                value,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    fn derived(value: Array2<f64>, op: Op) -> Tensor {
        let requires = op.inputs().iter().any(|t| t.node.requires_grad);
        Tensor::new(value, requires, op)
    }

    /// Leaf with gradient tracking (a learnable parameter).
    pub fn param(value: Array2<f64>) -> Tensor {
        Tensor::new(value, true, Op::Leaf)
    }

    /// Leaf without gradient tracking (input data).
    pub fn constant(value: Array2<f64>) -> Tensor {
        Tensor::new(value, false, Op::Leaf)
    }

    /// 1x1 constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(Array2::from_elem((1, 1), v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::constant(Array2::zeros((rows, cols)))
    }

    /// Row-major construction; errors if the buffer length does not match.
    pub fn from_shape_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| FtnError::Contract(format!("tensor construction: {e}")))?;
        Ok(Tensor::constant(arr))
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.node.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.node.value.dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient of a leaf; `None` before any backward pass and
    /// always `None` on derived nodes.
    pub fn grad(&self) -> Option<Array2<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.node.value.len() != 1 {
            return Err(FtnError::Contract(format!(
                "scalar_value on tensor of shape {:?}",
                self.node.value.shape()
            )));
        }
        Ok(self.node.value[(0, 0)])
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (_, k1) = self.shape();
        let (k2, _) = rhs.shape();
        if k1 != k2 {
            return Err(dim_err("matmul", self.value(), rhs.value()));
        }
        let out = self.value().dot(rhs.value());
        Ok(Tensor::derived(out, Op::Matmul(self.clone(), rhs.clone())))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(dim_err("add", self.value(), rhs.value()));
        }
        let out = self.value() + rhs.value();
        Ok(Tensor::derived(out, Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(dim_err("sub", self.value(), rhs.value()));
        }
        let out = self.value() - rhs.value();
        Ok(Tensor::derived(out, Op::Sub(self.clone(), rhs.clone())))
    }

    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(dim_err("hadamard", self.value(), rhs.value()));
        }
        let out = self.value() * rhs.value();
        Ok(Tensor::derived(
            out,
            Op::Hadamard(self.clone(), rhs.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.value() * factor;
        Tensor::derived(out, Op::Scale(self.clone(), factor))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.value().mapv(|x| x.max(0.0));
        Tensor::derived(out, Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let out = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        Tensor::derived(out, Op::LeakyRelu(self.clone(), slope))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Tensor::derived(out, Op::Sigmoid(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        let out = self.value().mapv(f64::abs);
        Tensor::derived(out, Op::Abs(self.clone()))
    }

    pub fn transpose(&self) -> Tensor {
        let out = self.value().t().to_owned();
        Tensor::derived(out, Op::Transpose(self.clone()))
    }

    pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
        Tensor::concat_many(&[a.clone(), b.clone()], axis)
    }

    pub fn concat_many(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(FtnError::Contract("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(FtnError::Contract(format!("concat axis {axis} out of range")));
        }
        let first = parts[0].shape();
        for p in &parts[1..] {
            let sh = p.shape();
            let same_other = if axis == 0 { sh.1 == first.1 } else { sh.0 == first.0 };
            if !same_other {
                return Err(dim_err("concat", parts[0].value(), p.value()));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| FtnError::Contract(format!("concat: {e}")))?;
        Ok(Tensor::derived(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Contiguous range along `axis` (0 = rows, 1 = columns).
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Tensor> {
        let (r, c) = self.shape();
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || range.end > extent || range.start > range.end {
            return Err(FtnError::Contract(format!(
                "slice {range:?} along axis {axis} of shape [{r}, {c}]"
            )));
        }
        let out = if axis == 0 {
            self.value().slice(s![range.clone(), ..]).to_owned()
        } else {
            self.value().slice(s![.., range.clone()]).to_owned()
        };
        Ok(Tensor::derived(out, Op::Slice(self.clone(), axis, range)))
    }

    /// Sum over one axis, or over all entries when `axis` is `None`
    /// (yielding a 1x1 scalar).
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        let out = match axis {
            None => Array2::from_elem((1, 1), self.value().sum()),
            Some(0) => {
                let v = self.value().sum_axis(Axis(0));
                v.insert_axis(Axis(0))
            }
            Some(1) => {
                let v = self.value().sum_axis(Axis(1));
                v.insert_axis(Axis(1))
            }
            Some(a) => {
                return Err(FtnError::Contract(format!("sum axis {a} out of range")));
            }
        };
        Ok(Tensor::derived(out, Op::Sum(self.clone(), axis)))
    }

    pub fn sum_all(&self) -> Tensor {
        self.sum(None).expect("sum over all entries cannot fail")
    }

    /// Numerically stabilized row softmax; every row sums to one.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.value().iter().any(|x| x.is_nan()) {
            return Err(FtnError::Numeric {
                op: "softmax_rows",
                detail: "NaN in input".into(),
            });
        }
        let mut out = self.value().clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        Ok(Tensor::derived(out, Op::SoftmaxRows(self.clone())))
    }

    /// Row softmax over entries where `mask` is nonzero. Rows with no
    /// admissible entry come out all zero (the empty-candidate convention).
    pub fn masked_softmax_rows(&self, mask: &Array2<f64>) -> Result<Tensor> {
        if self.shape() != mask.dim() {
            return Err(dim_err("masked_softmax_rows", self.value(), mask));
        }
        if self.value().iter().any(|x| x.is_nan()) {
            return Err(FtnError::Numeric {
                op: "masked_softmax_rows",
                detail: "NaN in input".into(),
            });
        }
        let mut out = Array2::zeros(self.shape());
        for (i, row) in self.value().rows().into_iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if mask[(i, j)] != 0.0 {
                    max = max.max(x);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row
            }
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if mask[(i, j)] != 0.0 {
                    let e = (x - max).exp();
                    out[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..row.len() {
                out[(i, j)] /= sum;
            }
        }
        Ok(Tensor::derived(
            out,
            Op::MaskedSoftmaxRows(self.clone(), Rc::new(mask.clone())),
        ))
    }

    /// Broadcast a column vector `b` (`ncols x 1`) across rows:
    /// `out[i,j] = x[i,j] + b[j]`.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.shape();
        if bias.shape() != (c, 1) {
            return Err(dim_err("add_row_bias", self.value(), bias.value()));
        }
        let b = bias.value().column(0);
        let out = self.value() + &b.insert_axis(Axis(0));
        Ok(Tensor::derived(
            out,
            Op::AddRowBias(self.clone(), bias.clone()),
        ))
    }

    /// Broadcast a column vector `b` (`nrows x 1`) across columns:
    /// `out[i,j] = x[i,j] + b[i]`.
    pub fn add_col_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (r, _) = self.shape();
        if bias.shape() != (r, 1) {
            return Err(dim_err("add_col_bias", self.value(), bias.value()));
        }
        let b = bias.value().column(0);
        let out = self.value() + &b.insert_axis(Axis(1));
        Ok(Tensor::derived(
            out,
            Op::AddColBias(self.clone(), bias.clone()),
        ))
    }

    /// Pairwise sums of two column vectors: `out[i,j] = u[i] + v[j]`.
    pub fn outer_sum(u: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (m, cu) = u.shape();
        let (n, cv) = v.shape();
        if cu != 1 || cv != 1 {
            return Err(dim_err("outer_sum", u.value(), v.value()));
        }
        let mut out = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                out[(i, j)] = u.value()[(i, 0)] + v.value()[(j, 0)];
            }
        }
        Ok(Tensor::derived(out, Op::OuterSum(u.clone(), v.clone())))
    }

    /// Row-major reshape to another 2-D extent with the same element count.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.value().len() {
            return Err(FtnError::Dimension {
                op: "reshape",
                lhs: self.value().shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let flat: Vec<f64> = self.value().iter().cloned().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("checked size");
        Ok(Tensor::derived(out, Op::Reshape(self.clone())))
    }

    /// Fused aggregation `out[i,f] = sum_j w[i,j] * |q[i,f] - r[j,f]|`,
    /// the kernel of the attention-weighted absolute-difference fusion.
    pub fn weighted_abs_diff_agg(weights: &Tensor, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        let (m, c) = weights.shape();
        let (ml, d) = left.shape();
        let (cr, dr) = right.shape();
        if ml != m || cr != c || dr != d {
            return Err(FtnError::Contract(format!(
                "weighted_abs_diff_agg shapes w{:?} q{:?} r{:?}",
                weights.value().shape(),
                left.value().shape(),
                right.value().shape()
            )));
        }
        let w = weights.value();
        let q = left.value();
        let r = right.value();
        let mut out = Array2::zeros((m, d));
        for i in 0..m {
            for j in 0..c {
                let wij = w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                for f in 0..d {
                    out[(i, f)] += wij * (q[(i, f)] - r[(j, f)]).abs();
                }
            }
        }
        Ok(Tensor::derived(
            out,
            Op::WeightedAbsDiffAgg {
                weights: weights.clone(),
                left: left.clone(),
                right: right.clone(),
            },
        ))
    }

    /// Reverse-mode gradient accumulation from a scalar.
    ///
    /// Gradients are added into every reachable `requires_grad` leaf, so
    /// calling twice without zeroing doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.node.value.len() != 1 {
            return Err(FtnError::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.node.value.shape()
            )));
        }
        if !self.node.requires_grad {
            return Ok(()); // constant scalar: nothing to do
        }
        let tape = Tape::record(self);
        tape.replay(self);
        Ok(())
    }
}

/// The reachable gradient-requiring subgraph of one scalar, in creation
/// order. Creation order is topological: an operation's inputs always
/// carry smaller ids.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Collects every node that both influences `root` and requires a
    /// gradient, sorted by creation id (ascending = topological order).
    pub fn record(root: &Tensor) -> Tape {
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.node.requires_grad || seen.contains_key(&t.node.id) {
                continue;
            }
            seen.insert(t.node.id, ());
            for input in t.node.op.inputs() {
                stack.push(input.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.node.id);
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when every operation appears after all operations producing
    /// its inputs.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .windows(2)
            .all(|w| w[0].node.id < w[1].node.id)
            && self.nodes.iter().all(|t| {
                t.node
                    .op
                    .inputs()
                    .iter()
                    .all(|input| input.node.id < t.node.id)
            })
    }

    fn replay(&self, root: &Tensor) {
        let mut scratch: HashMap<u64, Array2<f64>> = HashMap::new();
        scratch.insert(root.node.id, Array2::ones((1, 1)));
        for t in self.nodes.iter().rev() {
            let g = match scratch.remove(&t.node.id) {
                Some(g) => g,
                None => continue, // no path from the root through this node
            };
            if let Op::Leaf = t.node.op {
                let mut slot = t.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
                continue;
            }
            propagate(&t.node, &g, &mut scratch);
        }
    }
}

fn accumulate(scratch: &mut HashMap<u64, Array2<f64>>, input: &Tensor, contribution: Array2<f64>) {
    if !input.node.requires_grad {
        return;
    }
    match scratch.entry(input.node.id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            *e.get_mut() += &contribution;
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contribution);
        }
    }
}

/// Local gradient rule of one recorded op: distributes the upstream
/// gradient `g` onto the op's inputs.
fn propagate(node: &Node, g: &Array2<f64>, scratch: &mut HashMap<u64, Array2<f64>>) {
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the replay loop"),
        Op::Matmul(a, b) => {
            accumulate(scratch, a, g.dot(&b.value().t()));
            accumulate(scratch, b, a.value().t().dot(g));
        }
        Op::Add(a, b) => {
            accumulate(scratch, a, g.clone());
            accumulate(scratch, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(scratch, a, g.clone());
            accumulate(scratch, b, -g.clone());
        }
        Op::Hadamard(a, b) => {
            accumulate(scratch, a, g * b.value());
            accumulate(scratch, b, g * a.value());
        }
        Op::Scale(a, s) => accumulate(scratch, a, g * *s),
        Op::Relu(a) => {
            let mask = a.value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            accumulate(scratch, a, g * &mask);
        }
        Op::LeakyRelu(a, slope) => {
            let mask = a.value().mapv(|x| if x > 0.0 { 1.0 } else { *slope });
            accumulate(scratch, a, g * &mask);
        }
        Op::Sigmoid(a) => {
            let d = node.value.mapv(|y| y * (1.0 - y));
            accumulate(scratch, a, g * &d);
        }
        Op::Abs(a) => {
            // subgradient 0 at the kink
            let sign = a.value().mapv(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            accumulate(scratch, a, g * &sign);
        }
        Op::Transpose(a) => accumulate(scratch, a, g.t().to_owned()),
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for p in parts {
                let extent = if *axis == 0 { p.shape().0 } else { p.shape().1 };
                let piece = if *axis == 0 {
                    g.slice(s![offset..offset + extent, ..]).to_owned()
                } else {
                    g.slice(s![.., offset..offset + extent]).to_owned()
                };
                accumulate(scratch, p, piece);
                offset += extent;
            }
        }
        Op::Slice(a, axis, range) => {
            let mut da = Array2::zeros(a.shape());
            if *axis == 0 {
                da.slice_mut(s![range.clone(), ..]).assign(g);
            } else {
                da.slice_mut(s![.., range.clone()]).assign(g);
            }
            accumulate(scratch, a, da);
        }
        Op::Sum(a, axis) => {
            let (r, c) = a.shape();
            let da = match axis {
                None => Array2::from_elem((r, c), g[(0, 0)]),
                Some(0) => {
                    let row = g.row(0);
                    Array2::from_shape_fn((r, c), |(_, j)| row[j])
                }
                Some(1) => {
                    let col = g.column(0);
                    Array2::from_shape_fn((r, c), |(i, _)| col[i])
                }
                Some(_) => unreachable!("axis validated at construction"),
            };
            accumulate(scratch, a, da);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut da = Array2::zeros(a.shape());
            for i in 0..y.nrows() {
                let dot: f64 = (0..y.ncols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                for j in 0..y.ncols() {
                    da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                }
            }
            accumulate(scratch, a, da);
        }
        Op::MaskedSoftmaxRows(a, _mask) => {
            // y is zero at masked entries, which zeroes their gradient too.
            let y = &node.value;
            let mut da = Array2::zeros(a.shape());
            for i in 0..y.nrows() {
                let dot: f64 = (0..y.ncols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                for j in 0..y.ncols() {
                    da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                }
            }
            accumulate(scratch, a, da);
        }
        Op::AddRowBias(x, b) => {
            accumulate(scratch, x, g.clone());
            let db = g.sum_axis(Axis(0)).insert_axis(Axis(1));
            accumulate(scratch, b, db);
        }
        Op::AddColBias(x, b) => {
            accumulate(scratch, x, g.clone());
            let db = g.sum_axis(Axis(1)).insert_axis(Axis(1));
            accumulate(scratch, b, db);
        }
        Op::OuterSum(u, v) => {
            accumulate(scratch, u, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            accumulate(scratch, v, g.sum_axis(Axis(0)).insert_axis(Axis(1)));
        }
        Op::Reshape(a) => {
            let (r, c) = a.shape();
            let flat: Vec<f64> = g.iter().cloned().collect();
            let da = Array2::from_shape_vec((r, c), flat).expect("same element count");
            accumulate(scratch, a, da);
        }
        Op::WeightedAbsDiffAgg {
            weights,
            left,
            right,
        } => {
            let w = weights.value();
            let q = left.value();
            let r = right.value();
            let (m, c) = w.dim();
            let d = q.ncols();
            let mut dw = Array2::zeros((m, c));
            let mut dq = Array2::zeros((m, d));
            let mut dr = Array2::zeros((c, d));
            for i in 0..m {
                for j in 0..c {
                    let wij = w[(i, j)];
                    let mut dw_acc = 0.0;
                    for f in 0..d {
                        let diff = q[(i, f)] - r[(j, f)];
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dw_acc += g[(i, f)] * diff.abs();
                        dq[(i, f)] += g[(i, f)] * wij * sign;
                        dr[(j, f)] -= g[(i, f)] * wij * sign;
                    }
                    dw[(i, j)] = dw_acc;
                }
            }
            accumulate(scratch, weights, dw);
            accumulate(scratch, left, dq);
            accumulate(scratch, right, dr);
        }
    }
}

/// Mean of all entries as a graph scalar: `sum(x) / len(x)`.
pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.value().len() as f64;
    x.sum_all().scale(1.0 / n)
}

/// Column vector from a slice.
pub fn column(values: &[f64]) -> Tensor {
    Tensor::constant(Array1::from(values.to_vec()).insert_axis(Axis(1)))
}
