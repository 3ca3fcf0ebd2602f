//! Reverse-mode tape over dense tensors.
//!
//! Nodes hold their forward value and the primitive that produced them. A
//! single [`Tape::backward`] sweep replays adjoints in reverse recording order
//! and returns the gradient with respect to every registered parameter, in
//! registration order.
//!
//! Forward-mode tangents can themselves be recorded: [`DualVar`] pairs a value
//! node with an optional tangent node, and the `dual_*` methods record the
//! chain rule as ordinary tape operations. Differentiating a loss built from
//! those tangents therefore gives exact gradients of derivative-containing
//! losses without a second-order tape.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{matmul, matmul_lhs_transposed, matmul_rhs_transposed, Tensor};
use crate::error::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `scale * x + shift`; only the scale matters for adjoints.
    Affine(usize, f64),
    Exp(usize),
    Tanh(usize),
    MatMul(usize, usize),
    /// `1 x d` repeated to `n x d`.
    BroadcastRows(usize),
    /// `n x 1` repeated to `n x d`.
    BroadcastCols(usize),
    /// Row sums, `n x d` to `n x 1`.
    SumCols(usize),
    SumAll(usize),
    Column(usize, usize),
    ConcatCols(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine(..) => "affine",
            Op::Exp(_) => "exp",
            Op::Tanh(_) => "tanh",
            Op::MatMul(..) => "matmul",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::SumCols(_) => "sum_cols",
            Op::SumAll(_) => "sum_all",
            Op::Column(..) => "column",
            Op::ConcatCols(_) => "concat_cols",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Where the first non-finite value appeared during recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub node: usize,
    pub primitive: &'static str,
}

/// Value/tangent pair recorded on a tape. `tangent == None` means zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualVar {
    pub value: Var,
    pub tangent: Option<Var>,
}

impl DualVar {
    pub fn constant(value: Var) -> Self {
        Self {
            value,
            tangent: None,
        }
    }
}

/// Flat gradient aligned with the tape's parameter registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    offsets: Vec<usize>,
}

impl GradientVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Number of registered parameter tensors.
    pub fn segments(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Gradient entries belonging to the `i`-th registered parameter.
    pub fn segment(&self, i: usize) -> &[f64] {
        &self.values[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
    consumed: bool,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of trainable scalars registered so far.
    pub fn param_len(&self) -> usize {
        self.params
            .iter()
            .map(|&i| self.nodes[i].value.data().len())
            .sum()
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// First non-finite intermediate, if any, as an error.
    pub fn check(&self) -> Result<(), DiffError> {
        match self.fault {
            Some(f) => Err(DiffError::NonFinite {
                primitive: f.primitive,
                node: f.node,
            }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(Fault {
                node: idx,
                primitive: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn grad1(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    /// Registers a trainable tensor.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Param, true);
        self.params.push(v.0);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let g = self.grad2(a, b);
        self.push(v, Op::Add(a.0, b.0), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let g = self.grad2(a, b);
        self.push(v, Op::Sub(a.0, b.0), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let g = self.grad2(a, b);
        self.push(v, Op::Mul(a.0, b.0), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        let g = self.grad2(a, b);
        self.push(v, Op::Div(a.0, b.0), g)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let g = self.grad1(a);
        self.push(v, Op::Affine(a.0, scale), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::exp);
        let g = self.grad1(a);
        self.push(v, Op::Exp(a.0), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::tanh);
        let g = self.grad1(a);
        self.push(v, Op::Tanh(a.0), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let g = self.grad2(a, b);
        self.push(v, Op::MatMul(a.0, b.0), g)
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), 1, "broadcast_rows expects a row vector");
        let cols = src.cols();
        let v = Tensor::from_fn(rows, cols, |_, j| src.get(0, j));
        let g = self.grad1(a);
        self.push(v, Op::BroadcastRows(a.0), g)
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.cols(), 1, "broadcast_cols expects a column vector");
        let v = Tensor::from_fn(src.rows(), cols, |i, _| src.get(i, 0));
        let g = self.grad1(a);
        self.push(v, Op::BroadcastCols(a.0), g)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Tensor::column(
            (0..src.rows())
                .map(|i| src.row_slice(i).iter().sum())
                .collect(),
        );
        let g = self.grad1(a);
        self.push(v, Op::SumCols(a.0), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let g = self.grad1(a);
        self.push(v, Op::SumAll(a.0), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn column(&mut self, a: Var, c: usize) -> Var {
        let src = self.value(a);
        assert!(c < src.cols(), "column index out of range");
        let v = Tensor::column(src.column_values(c));
        let g = self.grad1(a);
        self.push(v, Op::Column(a.0, c), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one operand");
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            assert_eq!(self.value(*p).rows(), rows, "concat_cols row mismatch");
            widths.push(self.value(*p).cols());
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let g = parts.iter().any(|p| self.grad1(*p));
        self.push(
            Tensor::new(rows, cols, data),
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            g,
        )
    }

    /// Row-wise softmax recorded through its exp/sum composition. The
    /// per-row max shift is a constant, which leaves the result unchanged.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.dual_softmax_rows(DualVar::constant(a)).value
    }

    /// Reverse sweep from a scalar `output`. Consumes the tape.
    pub fn backward(&mut self, output: Var) -> Result<GradientVector, DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let (rows, cols) = self.value(output).shape();
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NonScalarOutput { rows, cols });
        }
        self.consumed = true;
        self.check()?;

        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param => {
                    adj[idx] = Some(g);
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, || g.clone());
                    self.accumulate(&mut adj, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, *a, || g.clone());
                    self.accumulate(&mut adj, *b, || g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    self.accumulate(&mut adj, *a, || g.zip(vb, |x, y| x * y));
                    self.accumulate(&mut adj, *b, || g.zip(va, |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[*b].value;
                    let out = &node.value;
                    self.accumulate(&mut adj, *a, || g.zip(vb, |x, y| x / y));
                    self.accumulate(&mut adj, *b, || {
                        let t = g.zip(out, |x, q| -x * q);
                        t.zip(vb, |x, y| x / y)
                    });
                }
                Op::Affine(a, s) => {
                    let s = *s;
                    self.accumulate(&mut adj, *a, || g.map(|x| s * x));
                }
                Op::Exp(a) => {
                    let out = &node.value;
                    self.accumulate(&mut adj, *a, || g.zip(out, |x, y| x * y));
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    self.accumulate(&mut adj, *a, || g.zip(out, |x, y| x * (1.0 - y * y)));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    self.accumulate(&mut adj, *a, || matmul_rhs_transposed(&g, vb));
                    self.accumulate(&mut adj, *b, || matmul_lhs_transposed(va, &g));
                }
                Op::BroadcastRows(a) => {
                    self.accumulate(&mut adj, *a, || {
                        let mut s = vec![0.0; g.cols()];
                        for i in 0..g.rows() {
                            for (acc, v) in s.iter_mut().zip(g.row_slice(i)) {
                                *acc += v;
                            }
                        }
                        Tensor::row(s)
                    });
                }
                Op::BroadcastCols(a) => {
                    self.accumulate(&mut adj, *a, || {
                        Tensor::column((0..g.rows()).map(|i| g.row_slice(i).iter().sum()).collect())
                    });
                }
                Op::SumCols(a) => {
                    let cols = self.nodes[*a].value.cols();
                    self.accumulate(&mut adj, *a, || Tensor::from_fn(g.rows(), cols, |i, _| g.get(i, 0)));
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let s = g.item();
                    self.accumulate(&mut adj, *a, || Tensor::filled(r, c, s));
                }
                Op::Column(a, c) => {
                    let (r, cols) = self.nodes[*a].value.shape();
                    let c = *c;
                    self.accumulate(&mut adj, *a, || {
                        Tensor::from_fn(r, cols, |i, j| if j == c { g.get(i, 0) } else { 0.0 })
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        let o = offset;
                        self.accumulate(&mut adj, p, || Tensor::from_fn(g.rows(), w, |i, j| g.get(i, o + j)));
                        offset += w;
                    }
                }
            }
        }

        let mut values = Vec::with_capacity(self.param_len());
        let mut offsets = Vec::with_capacity(self.params.len() + 1);
        offsets.push(0);
        for &p in &self.params {
            match &adj.get(p).and_then(|a| a.as_ref()) {
                Some(t) => values.extend_from_slice(t.data()),
                None => values.extend(core::iter::repeat_n(0.0, self.nodes[p].value.data().len())),
            }
            offsets.push(values.len());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteGradient(i));
        }
        Ok(GradientVector { values, offsets })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], target: usize, contrib: impl FnOnce() -> Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let c = contrib();
        match &mut adj[target] {
            Some(existing) => existing.add_assign(&c),
            slot @ None => *slot = Some(c),
        }
    }

    // ---- forward-mode arithmetic recorded on the tape ----

    fn opt_add(&mut self, a: Option<Var>, b: Option<Var>) -> Option<Var> {
        match (a, b) {
            (Some(x), Some(y)) => Some(self.add(x, y)),
            (Some(x), None) | (None, Some(x)) => Some(x),
            (None, None) => None,
        }
    }

    pub fn dual_add(&mut self, a: DualVar, b: DualVar) -> DualVar {
        let value = self.add(a.value, b.value);
        let tangent = self.opt_add(a.tangent, b.tangent);
        DualVar { value, tangent }
    }

    pub fn dual_sub(&mut self, a: DualVar, b: DualVar) -> DualVar {
        let value = self.sub(a.value, b.value);
        let tangent = match (a.tangent, b.tangent) {
            (Some(x), Some(y)) => Some(self.sub(x, y)),
            (Some(x), None) => Some(x),
            (None, Some(y)) => Some(self.neg(y)),
            (None, None) => None,
        };
        DualVar { value, tangent }
    }

    pub fn dual_mul(&mut self, a: DualVar, b: DualVar) -> DualVar {
        let value = self.mul(a.value, b.value);
        let ta = a.tangent.map(|t| self.mul(t, b.value));
        let tb = b.tangent.map(|t| self.mul(a.value, t));
        let tangent = self.opt_add(ta, tb);
        DualVar { value, tangent }
    }

    pub fn dual_div(&mut self, a: DualVar, b: DualVar) -> DualVar {
        let value = self.div(a.value, b.value);
        let tangent = match (a.tangent, b.tangent) {
            (None, None) => None,
            (ta, tb) => {
                // (a' - q b') / b
                let qtb = tb.map(|t| self.mul(value, t));
                let num = match (ta, qtb) {
                    (Some(x), Some(y)) => self.sub(x, y),
                    (Some(x), None) => x,
                    (None, Some(y)) => self.neg(y),
                    (None, None) => unreachable!(),
                };
                Some(self.div(num, b.value))
            }
        };
        DualVar { value, tangent }
    }

    pub fn dual_affine(&mut self, a: DualVar, scale: f64, shift: f64) -> DualVar {
        let value = self.affine(a.value, scale, shift);
        let tangent = a.tangent.map(|t| self.scale(t, scale));
        DualVar { value, tangent }
    }

    pub fn dual_exp(&mut self, a: DualVar) -> DualVar {
        let value = self.exp(a.value);
        let tangent = a.tangent.map(|t| self.mul(value, t));
        DualVar { value, tangent }
    }

    pub fn dual_tanh(&mut self, a: DualVar) -> DualVar {
        let value = self.tanh(a.value);
        let tangent = a.tangent.map(|t| {
            let y2 = self.mul(value, value);
            let slope = self.affine(y2, -1.0, 1.0);
            self.mul(slope, t)
        });
        DualVar { value, tangent }
    }

    pub fn dual_matmul(&mut self, a: DualVar, b: DualVar) -> DualVar {
        let value = self.matmul(a.value, b.value);
        let ta = a.tangent.map(|t| self.matmul(t, b.value));
        let tb = b.tangent.map(|t| self.matmul(a.value, t));
        let tangent = self.opt_add(ta, tb);
        DualVar { value, tangent }
    }

    pub fn dual_broadcast_rows(&mut self, a: DualVar, rows: usize) -> DualVar {
        DualVar {
            value: self.broadcast_rows(a.value, rows),
            tangent: a.tangent.map(|t| self.broadcast_rows(t, rows)),
        }
    }

    pub fn dual_broadcast_cols(&mut self, a: DualVar, cols: usize) -> DualVar {
        DualVar {
            value: self.broadcast_cols(a.value, cols),
            tangent: a.tangent.map(|t| self.broadcast_cols(t, cols)),
        }
    }

    pub fn dual_sum_cols(&mut self, a: DualVar) -> DualVar {
        DualVar {
            value: self.sum_cols(a.value),
            tangent: a.tangent.map(|t| self.sum_cols(t)),
        }
    }

    pub fn dual_column(&mut self, a: DualVar, c: usize) -> DualVar {
        DualVar {
            value: self.column(a.value, c),
            tangent: a.tangent.map(|t| self.column(t, c)),
        }
    }

    /// Row-wise softmax of a dual tensor: `exp(x - m) / sum(exp(x - m))`.
    pub fn dual_softmax_rows(&mut self, a: DualVar) -> DualVar {
        let src = self.value(a.value);
        let (rows, cols) = src.shape();
        let shift: Vec<f64> = (0..rows)
            .map(|i| {
                src.row_slice(i)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let shift = self.constant(Tensor::from_fn(rows, cols, |i, _| shift[i]));
        let shifted = self.dual_sub(a, DualVar::constant(shift));
        let e = self.dual_exp(shifted);
        let s = self.dual_sum_cols(e);
        let s = self.dual_broadcast_cols(s, cols);
        self.dual_div(e, s)
    }
}
