//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! returns the gradient of a scalar loss with respect to every node that
//! requires one. The tape is rebuilt for each training step.
//!
//! All nodes are matrices (`rows x cols`); rank-1 leaves become single rows.
//! Each operation checks its output and fails with [`KtError::NonFinite`]
//! naming the operation instead of propagating NaN or infinity.

use std::cell::RefCell;
use std::ops::Index;

use super::tensor::{ParamId, ParamSet, Tensor};
use super::{stable_sigmoid, Scalar};
use crate::error::{KtError, Result};

/// Lower clamp applied to probabilities inside binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf { param: Option<usize> },
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    WithRow(usize, usize, usize),
    BroadcastRows(usize),
    ScaleRows(usize, Vec<T>),
    Pick(usize, Vec<usize>),
    Sum(usize),
    BceSum(usize, Vec<T>),
    SqErrSum(usize, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Parameter leaves created by [`ParamSet::bind`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Self::Output {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamSet<T> {
    /// Copies every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .iter()
            .enumerate()
            .map(|(i, (_, t))| tape.push_leaf(t, true, Some(i)))
            .collect();
        Bound { vars }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_slots: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `var`, if it was reachable and tracked.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every bound parameter into its tensor's accumulator.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for &(node, slot) in &self.param_slots {
            if slot >= params.len() {
                return Err(KtError::Contract(format!(
                    "gradient refers to parameter slot {slot} outside the set"
                )));
            }
            let tensor = &mut params.tensors_mut()[slot];
            match &self.grads[node] {
                Some(g) => tensor.accumulate_grad(g)?,
                None => tensor.accumulate_grad(&vec![T::zero(); tensor.len()])?,
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf holding `tensor`; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&self, tensor: &Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_leaf(tensor, requires_grad, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(tensor, false, None)
    }

    /// Constant `1 x n` row built directly from values.
    pub fn row(&self, values: Vec<T>) -> Result<Var<'_, T>> {
        let t = Tensor::new(vec![values.len()], values)?;
        Ok(self.constant(&t))
    }

    /// Constant zero matrix.
    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_, T> {
        self.constant(&Tensor::zeros(vec![rows, cols]))
    }

    fn push_leaf(
        &self,
        tensor: &Tensor<T>,
        requires_grad: bool,
        param: Option<usize>,
    ) -> Var<'_, T> {
        let (rows, cols) = match tensor.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                let c = *other.last().expect("non-empty shape");
                (tensor.len() / c, c)
            }
        };
        self.push(Node {
            rows,
            cols,
            value: tensor.data().to_vec(),
            op: Op::Leaf { param },
            requires_grad,
        })
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(
        &self,
        name: &'static str,
        rows: usize,
        cols: usize,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var<'_, T>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(KtError::NonFinite { op: name.into() });
        }
        Ok(self.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        }))
    }

    /// Gradient of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(KtError::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                root.rows, root.cols
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let mut param_slots = Vec::new();
        grads[loss.id] = Some(vec![T::one()]);

        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if let Op::Leaf { param } = node.op {
                if let Some(slot) = param {
                    param_slots.push((i, slot));
                }
                continue;
            }
            let g = match grads[i].take() {
                Some(g) if node.requires_grad => g,
                _ => continue,
            };
            backprop(&nodes, i, &g, &mut grads);
        }
        param_slots.reverse();
        if let Some(bad) = grads
            .iter()
            .flatten()
            .find(|g| g.iter().any(|v| !v.is_finite()))
        {
            let _ = bad;
            return Err(KtError::NonFinite {
                op: "backward".into(),
            });
        }
        Ok(Gradients { grads, param_slots })
    }
}

/// Returns the gradient buffer of node `j`, or `None` when it is untracked.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    j: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf { .. } => {}
        &Op::MatMul(a, b) => {
            let (m, k, n) = (nodes[a].rows, nodes[a].cols, nodes[b].cols);
            if let Some(ga) = slot(nodes, grads, a) {
                let bv = &nodes[b].value;
                for r in 0..m {
                    for c in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += g[r * n + j] * bv[c * n + j];
                        }
                        ga[r * k + c] += acc;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                let av = &nodes[a].value;
                for r in 0..m {
                    for c in 0..k {
                        let x = av[r * k + c];
                        if x == T::zero() {
                            continue;
                        }
                        for j in 0..n {
                            gb[c * n + j] += x * g[r * n + j];
                        }
                    }
                }
            }
        }
        &Op::MatMulBt(a, b) => {
            // out = A (m x k) . B^T, B is n x k
            let (m, k, n) = (nodes[a].rows, nodes[a].cols, nodes[b].rows);
            if let Some(ga) = slot(nodes, grads, a) {
                let bv = &nodes[b].value;
                for r in 0..m {
                    for j in 0..n {
                        let gv = g[r * n + j];
                        for c in 0..k {
                            ga[r * k + c] += gv * bv[j * k + c];
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                let av = &nodes[a].value;
                for r in 0..m {
                    for j in 0..n {
                        let gv = g[r * n + j];
                        for c in 0..k {
                            gb[j * k + c] += gv * av[r * k + c];
                        }
                    }
                }
            }
        }
        &Op::Transpose(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                // out is rows x cols, input is cols x rows
                for r in 0..rows {
                    for c in 0..cols {
                        ga[c * rows + r] += g[r * cols + c];
                    }
                }
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
            }
            let broadcast = nodes[b].rows != rows;
            if let Some(gb) = slot(nodes, grads, b) {
                if broadcast {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += sign * g[r * cols + c];
                        }
                    }
                } else {
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x += sign * d);
                }
            }
        }
        &Op::Mul(a, b) => {
            let bv = &nodes[b].value;
            let av = &nodes[a].value;
            if let Some(ga) = slot(nodes, grads, a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * bv[k];
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                }
            }
        }
        &Op::Affine(a, scale) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += scale * d);
            }
        }
        &Op::Sigmoid(a) => {
            let y = &node.value;
            if let Some(ga) = slot(nodes, grads, a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k] * (T::one() - y[k]);
                }
            }
        }
        &Op::Tanh(a) => {
            let y = &node.value;
            if let Some(ga) = slot(nodes, grads, a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * (T::one() - y[k] * y[k]);
                }
            }
        }
        &Op::SoftmaxRows(a) => {
            let y = &node.value;
            if let Some(ga) = slot(nodes, grads, a) {
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = T::zero();
                    for c in 0..cols {
                        dot += g[base + c] * y[base + c];
                    }
                    for c in 0..cols {
                        ga[base + c] += y[base + c] * (g[base + c] - dot);
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].cols;
                if let Some(gp) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        for c in 0..pc {
                            gp[r * pc + c] += g[r * cols + offset + c];
                        }
                    }
                }
                offset += pc;
            }
        }
        &Op::SliceCols(a, start) => {
            let ac = nodes[a].cols;
            if let Some(ga) = slot(nodes, grads, a) {
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * ac + start + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::GatherRows(a, idx) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (k, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[src * cols + c] += g[k * cols + c];
                    }
                }
            }
        }
        &Op::WithRow(base, row_var, r) => {
            if let Some(gb) = slot(nodes, grads, base) {
                for k in 0..g.len() {
                    if k / cols != r {
                        gb[k] += g[k];
                    }
                }
            }
            if let Some(gr) = slot(nodes, grads, row_var) {
                for c in 0..cols {
                    gr[c] += g[r * cols + c];
                }
            }
        }
        &Op::BroadcastRows(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for r in 0..rows {
                    for c in 0..cols {
                        ga[c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::ScaleRows(a, coeffs) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += coeffs[r] * g[r * cols + c];
                    }
                }
            }
        }
        Op::Pick(a, flat) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (k, &src) in flat.iter().enumerate() {
                    ga[src] += g[k];
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::BceSum(a, targets) => {
            let p = &nodes[*a].value;
            let lo = T::of(PROB_CLAMP);
            let hi = T::one() - lo;
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..p.len() {
                    if p[k] < lo || p[k] > hi {
                        continue;
                    }
                    let t = targets[k];
                    ga[k] += g[0] * (p[k] - t) / (p[k] * (T::one() - p[k]));
                }
            }
        }
        Op::SqErrSum(a, targets) => {
            let p = &nodes[*a].value;
            let two = T::of(2.0);
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..p.len() {
                    ga[k] += g[0] * two * (p[k] - targets[k]);
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn rows(self) -> usize {
        self.tape.nodes.borrow()[self.id].rows
    }

    pub fn cols(self) -> usize {
        self.tape.nodes.borrow()[self.id].cols
    }

    pub fn shape(self) -> [usize; 2] {
        let nodes = self.tape.nodes.borrow();
        [nodes[self.id].rows, nodes[self.id].cols]
    }

    /// Copy of the node's current value.
    pub fn value(self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("tape values are finite")
    }

    pub fn values(self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// The single value of a `1 x 1` node.
    pub fn scalar(self) -> Result<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if n.value.len() != 1 {
            return Err(KtError::Contract(format!(
                "expected a scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    fn same_tape(self, other: Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(KtError::Contract(
                "variables recorded on different tapes".into(),
            ))
        }
    }

    fn tracks(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        let (rows, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.rows, n.cols, n.value.iter().map(|&v| f(v)).collect())
        };
        self.tape
            .push_checked(name, rows, cols, value, op, self.tracks())
    }

    /// Matrix product `self (m x k) . rhs (k x n)`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs)?;
        let (m, n, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.cols != b.rows {
                return Err(KtError::shape(
                    "matmul",
                    &[a.rows, a.cols],
                    &[b.rows, b.cols],
                ));
            }
            let (m, k, n) = (a.rows, a.cols, b.cols);
            let mut out = vec![T::zero(); m * n];
            for r in 0..m {
                for c in 0..k {
                    let x = a.value[r * k + c];
                    if x == T::zero() {
                        continue;
                    }
                    let brow = &b.value[c * n..(c + 1) * n];
                    let orow = &mut out[r * n..(r + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += x * bv;
                    }
                }
            }
            (m, n, out)
        };
        let rg = self.tracks() || rhs.tracks();
        self.tape
            .push_checked("matmul", m, n, value, Op::MatMul(self.id, rhs.id), rg)
    }

    /// `self (m x k) . rhs^T` where `rhs` is `n x k`.
    pub fn matmul_t(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs)?;
        let (m, n, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.cols != b.cols {
                return Err(KtError::shape(
                    "matmul_t",
                    &[a.rows, a.cols],
                    &[b.rows, b.cols],
                ));
            }
            let (m, k, n) = (a.rows, a.cols, b.rows);
            let mut out = vec![T::zero(); m * n];
            for r in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for c in 0..k {
                        acc += a.value[r * k + c] * b.value[j * k + c];
                    }
                    out[r * n + j] = acc;
                }
            }
            (m, n, out)
        };
        let rg = self.tracks() || rhs.tracks();
        self.tape
            .push_checked("matmul_t", m, n, value, Op::MatMulBt(self.id, rhs.id), rg)
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (rows, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let mut out = vec![T::zero(); a.value.len()];
            for r in 0..a.rows {
                for c in 0..a.cols {
                    out[c * a.rows + r] = a.value[r * a.cols + c];
                }
            }
            (a.cols, a.rows, out)
        };
        self.tape.push_checked(
            "transpose",
            rows,
            cols,
            value,
            Op::Transpose(self.id),
            self.tracks(),
        )
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        allow_broadcast: bool,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(rhs)?;
        let (rows, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.cols != b.cols || (a.rows != b.rows && !(allow_broadcast && b.rows == 1)) {
                return Err(KtError::shape(name, &[a.rows, a.cols], &[b.rows, b.cols]));
            }
            let value = if a.rows == b.rows {
                a.value
                    .iter()
                    .zip(&b.value)
                    .map(|(&x, &y)| f(x, y))
                    .collect()
            } else {
                a.value
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| f(x, b.value[k % a.cols]))
                    .collect()
            };
            (a.rows, a.cols, value)
        };
        let rg = self.tracks() || rhs.tracks();
        self.tape.push_checked(name, rows, cols, value, op, rg)
    }

    /// Elementwise sum; a single-row `rhs` is broadcast over rows.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", true, Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    /// Elementwise difference; a single-row `rhs` is broadcast over rows.
    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", true, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product of equal shapes.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", false, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    /// `scale * self + shift`, elementwise.
    pub fn affine(self, scale: T, shift: T) -> Result<Var<'t, T>> {
        self.unary("affine", Op::Affine(self.id, scale), move |v| {
            scale * v + shift
        })
    }

    pub fn scale(self, factor: T) -> Result<Var<'t, T>> {
        self.affine(factor, T::zero())
    }

    /// `1 - self`, elementwise.
    pub fn one_minus(self) -> Result<Var<'t, T>> {
        self.affine(-T::one(), T::one())
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary("tanh", Op::Tanh(self.id), |v| v.tanh())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let (rows, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (
                a.rows,
                a.cols,
                softmax_rows_values(&a.value, a.rows, a.cols),
            )
        };
        self.tape.push_checked(
            "softmax",
            rows,
            cols,
            value,
            Op::SoftmaxRows(self.id),
            self.tracks(),
        )
    }

    /// Concatenates along the column axis.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = *parts
            .first()
            .ok_or_else(|| KtError::Contract("concat of zero tensors".into()))?;
        for p in parts {
            first.same_tape(*p)?;
        }
        let (rows, cols, value) = {
            let nodes = first.tape.nodes.borrow();
            let rows = nodes[first.id].rows;
            let mut cols = 0;
            for p in parts {
                let n = &nodes[p.id];
                if n.rows != rows {
                    return Err(KtError::shape(
                        "concat_cols",
                        &[rows, nodes[first.id].cols],
                        &[n.rows, n.cols],
                    ));
                }
                cols += n.cols;
            }
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let n = &nodes[p.id];
                    out.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
                }
            }
            (rows, cols, out)
        };
        let rg = parts.iter().any(|p| p.tracks());
        let ids = parts.iter().map(|p| p.id).collect();
        first
            .tape
            .push_checked("concat_cols", rows, cols, value, Op::ConcatCols(ids), rg)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (rows, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if len == 0 || start + len > a.cols {
                return Err(KtError::shape(
                    "slice_cols",
                    &[a.rows, a.cols],
                    &[start, len],
                ));
            }
            let mut out = Vec::with_capacity(a.rows * len);
            for r in 0..a.rows {
                out.extend_from_slice(&a.value[r * a.cols + start..r * a.cols + start + len]);
            }
            (a.rows, out)
        };
        self.tape.push_checked(
            "slice_cols",
            rows,
            len,
            value,
            Op::SliceCols(self.id, start),
            self.tracks(),
        )
    }

    /// Rows `indices` stacked in order (embedding lookup).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let (cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let mut out = Vec::with_capacity(indices.len() * a.cols);
            for &i in indices {
                if i >= a.rows {
                    return Err(KtError::shape("gather_rows", &[a.rows, a.cols], &[i]));
                }
                out.extend_from_slice(&a.value[i * a.cols..(i + 1) * a.cols]);
            }
            (a.cols, out)
        };
        if indices.is_empty() {
            return Err(KtError::Contract("gather of zero rows".into()));
        }
        self.tape.push_checked(
            "gather_rows",
            indices.len(),
            cols,
            value,
            Op::GatherRows(self.id, indices.to_vec()),
            self.tracks(),
        )
    }

    /// Copy of `self` with row `index` replaced by the single row `row`.
    pub fn with_row(self, index: usize, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(row)?;
        let (rows, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[row.id]);
            if b.rows != 1 || b.cols != a.cols || index >= a.rows {
                return Err(KtError::shape(
                    "with_row",
                    &[a.rows, a.cols],
                    &[b.rows, b.cols],
                ));
            }
            let mut out = a.value.clone();
            out[index * a.cols..(index + 1) * a.cols].copy_from_slice(&b.value);
            (a.rows, a.cols, out)
        };
        let rg = self.tracks() || row.tracks();
        self.tape.push_checked(
            "with_row",
            rows,
            cols,
            value,
            Op::WithRow(self.id, row.id, index),
            rg,
        )
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'t, T>> {
        let (cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.rows != 1 || rows == 0 {
                return Err(KtError::shape("broadcast_rows", &[a.rows, a.cols], &[rows]));
            }
            (a.cols, a.value.repeat(rows))
        };
        self.tape.push_checked(
            "broadcast_rows",
            rows,
            cols,
            value,
            Op::BroadcastRows(self.id),
            self.tracks(),
        )
    }

    /// Multiplies row `r` by the constant `coeffs[r]`.
    pub fn scale_rows(self, coeffs: &[T]) -> Result<Var<'t, T>> {
        let (rows, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if coeffs.len() != a.rows {
                return Err(KtError::shape(
                    "scale_rows",
                    &[a.rows, a.cols],
                    &[coeffs.len()],
                ));
            }
            let value = a
                .value
                .iter()
                .enumerate()
                .map(|(k, &v)| coeffs[k / a.cols] * v)
                .collect();
            (a.rows, a.cols, value)
        };
        self.tape.push_checked(
            "scale_rows",
            rows,
            cols,
            value,
            Op::ScaleRows(self.id, coeffs.to_vec()),
            self.tracks(),
        )
    }

    /// Selects elements `(row, col)` into a `1 x k` row.
    pub fn pick(self, coords: &[(usize, usize)]) -> Result<Var<'t, T>> {
        if coords.is_empty() {
            return Err(KtError::Contract("pick of zero elements".into()));
        }
        let (flat, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let mut flat = Vec::with_capacity(coords.len());
            for &(r, c) in coords {
                if r >= a.rows || c >= a.cols {
                    return Err(KtError::shape("pick", &[a.rows, a.cols], &[r, c]));
                }
                flat.push(r * a.cols + c);
            }
            let value = flat.iter().map(|&k| a.value[k]).collect();
            (flat, value)
        };
        self.tape.push_checked(
            "pick",
            1,
            coords.len(),
            value,
            Op::Pick(self.id, flat),
            self.tracks(),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let total = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .fold(T::zero(), |acc, &v| acc + v)
        };
        self.tape
            .push_checked("sum", 1, 1, vec![total], Op::Sum(self.id), self.tracks())
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        self.sum()?.scale(T::one() / T::of(n as f64))
    }

    /// Mean binary cross-entropy of probabilities `self` against `targets`,
    /// with probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce_mean(self, targets: &[T]) -> Result<Var<'t, T>> {
        let n = self.check_targets("bce", targets)?;
        let total = {
            let nodes = self.tape.nodes.borrow();
            bce_sum(&nodes[self.id].value, targets)
        };
        let s = self.tape.push_checked(
            "bce",
            1,
            1,
            vec![total],
            Op::BceSum(self.id, targets.to_vec()),
            self.tracks(),
        )?;
        s.scale(T::one() / T::of(n as f64))
    }

    /// Mean squared error of `self` against `targets`.
    pub fn mse_mean(self, targets: &[T]) -> Result<Var<'t, T>> {
        let n = self.check_targets("mse", targets)?;
        let total = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .zip(targets)
                .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t))
        };
        let s = self.tape.push_checked(
            "mse",
            1,
            1,
            vec![total],
            Op::SqErrSum(self.id, targets.to_vec()),
            self.tracks(),
        )?;
        s.scale(T::one() / T::of(n as f64))
    }

    fn check_targets(self, op: &'static str, targets: &[T]) -> Result<usize> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        if n != targets.len() {
            return Err(KtError::shape(op, &[n], &[targets.len()]));
        }
        if n == 0 {
            return Err(KtError::Contract(format!("{op} over zero predictions")));
        }
        Ok(n)
    }
}

pub(crate) fn softmax_rows_values<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * cols + c] = e;
            total += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= total;
        }
    }
    out
}

/// Summed clamped binary cross-entropy; shared by the tape and the metrics.
pub fn bce_sum<T: Scalar>(probs: &[T], targets: &[T]) -> T {
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    probs.iter().zip(targets).fold(T::zero(), |acc, (&p, &t)| {
        let p = p.max(lo).min(hi);
        acc - (t * p.ln() + (T::one() - t) * (T::one() - p).ln())
    })
}
