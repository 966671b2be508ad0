//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Nodes hold whole matrices, not scalars, so a forward pass through the
//! model records a few hundred nodes rather than millions. The tape is an
//! append-only arena; node ids are indices, and every op references only
//! earlier nodes, so a single reverse sweep is a valid topological order.
//!
//! Gradients of intermediate nodes are moved out as the sweep consumes them;
//! after `backward` only leaf (param) gradients remain readable.

use crate::error::{Error, Result};
use crate::numcore::tensor::{mm_nn, mm_nn_acc, mm_nt, mm_nt_acc, mm_tn_acc, Tensor};

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Param,
    Const,
    MatMul(VarId, VarId),
    /// a @ b^T
    MatMulNT(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Scale(VarId, f64),
    AddConst(VarId),
    Exp(VarId),
    Log(VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Softplus(VarId),
    Abs(VarId),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    CausalSoftmaxRows(VarId),
    GatherRows(VarId, Vec<u32>),
    GatherElems(VarId, Vec<(u32, u32)>),
    SumAll(VarId),
    MeanAll(VarId),
    SumRows(VarId),
    Clamp(VarId, f64, f64),
    MinElem(VarId, VarId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::CausalSoftmaxRows(..) => "causal_softmax_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherElems(..) => "gather_elems",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumRows(..) => "sum_rows",
            Op::Clamp(..) => "clamp",
            Op::MinElem(..) => "min_elem",
        }
    }
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// rhs is 1 x cols, repeated down the rows
    Row,
    /// rhs is rows x 1, repeated across the columns
    Col,
    /// rhs is 1 x 1
    Scalar,
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Broadcast {
    if a.same_shape(b) {
        Broadcast::Same
    } else if b.rows == 1 && b.cols == 1 {
        Broadcast::Scalar
    } else if b.rows == 1 && b.cols == a.cols {
        Broadcast::Row
    } else if b.cols == 1 && b.rows == a.rows {
        Broadcast::Col
    } else {
        panic!(
            "incompatible shapes for broadcast: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        );
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let kind = broadcast_kind(a, b);
    let mut out = Tensor::zeros(a.rows, a.cols);
    match kind {
        Broadcast::Same => {
            for ((o, &x), &y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
                *o = f(x, y);
            }
        }
        Broadcast::Scalar => {
            let y = b.data[0];
            for (o, &x) in out.data.iter_mut().zip(&a.data) {
                *o = f(x, y);
            }
        }
        Broadcast::Row => {
            for r in 0..a.rows {
                for c in 0..a.cols {
                    out.data[r * a.cols + c] = f(a.at(r, c), b.data[c]);
                }
            }
        }
        Broadcast::Col => {
            for r in 0..a.rows {
                let y = b.data[r];
                for c in 0..a.cols {
                    out.data[r * a.cols + c] = f(a.at(r, c), y);
                }
            }
        }
    }
    out
}

/// Sums `full` (shaped like the lhs) down to the rhs shape for `kind`.
fn reduce_to_rhs(full: &Tensor, kind: Broadcast, rhs_rows: usize, rhs_cols: usize) -> Tensor {
    let mut out = Tensor::zeros(rhs_rows, rhs_cols);
    match kind {
        Broadcast::Same => out.data.copy_from_slice(&full.data),
        Broadcast::Scalar => out.data[0] = full.data.iter().sum(),
        Broadcast::Row => {
            for r in 0..full.rows {
                for c in 0..full.cols {
                    out.data[c] += full.at(r, c);
                }
            }
        }
        Broadcast::Col => {
            for r in 0..full.rows {
                out.data[r] += full.row(r).iter().sum::<f64>();
            }
        }
    }
    out
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation graph. Build ops forward, then call [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` loss w.r.t. node `id`.
    /// Reliable for leaves; interior grads are consumed by the sweep.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> VarId {
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> VarId {
        self.push(Op::Param, value, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Const, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> VarId {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = mm_nn(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// a @ b^T
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let v = mm_nt(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNT(a, b), v, ng)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Div(a, b), v, ng)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x *= c;
        }
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> VarId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x += c;
        }
        let ng = self.needs(a);
        self.push(Op::AddConst(a), v, ng)
    }

    fn unary(&mut self, a: VarId, op: Op, f: impl Fn(f64) -> f64) -> VarId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x = f(*x);
        }
        let ng = self.needs(a);
        self.push(op, v, ng)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        assert!(lo <= hi);
        let ng = self.needs(a);
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x = x.clamp(lo, hi);
        }
        self.push(Op::Clamp(a, lo, hi), v, ng)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min_elem(&mut self, a: VarId, b: VarId) -> VarId {
        assert!(self.value(a).same_shape(self.value(b)), "min_elem needs equal shapes");
        let v = zip_broadcast(self.value(a), self.value(b), f64::min);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MinElem(a, b), v, ng)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            softmax_into(x.row(r), &mut v.data[r * x.cols..(r + 1) * x.cols]);
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            log_softmax_into(x.row(r), &mut v.data[r * x.cols..(r + 1) * x.cols]);
        }
        let ng = self.needs(a);
        self.push(Op::LogSoftmaxRows(a), v, ng)
    }

    /// Row-wise softmax over the prefix `0..=r`; later columns are zero.
    pub fn causal_softmax_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        assert_eq!(x.rows, x.cols, "causal softmax expects a square score matrix");
        let mut v = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let w = r + 1;
            softmax_into(&x.row(r)[..w], &mut v.data[r * x.cols..r * x.cols + w]);
        }
        let ng = self.needs(a);
        self.push(Op::CausalSoftmaxRows(a), v, ng)
    }

    pub fn gather_rows(&mut self, a: VarId, ids: Vec<u32>) -> VarId {
        let x = self.value(a);
        let mut v = Tensor::zeros(ids.len(), x.cols);
        for (i, &r) in ids.iter().enumerate() {
            let r = r as usize;
            assert!(r < x.rows, "gather_rows index out of range");
            v.data[i * x.cols..(i + 1) * x.cols].copy_from_slice(x.row(r));
        }
        let ng = self.needs(a);
        self.push(Op::GatherRows(a, ids), v, ng)
    }

    /// Picks elements (row, col) into an n x 1 column.
    pub fn gather_elems(&mut self, a: VarId, idx: Vec<(u32, u32)>) -> VarId {
        let x = self.value(a);
        let mut v = Tensor::zeros(idx.len(), 1);
        for (i, &(r, c)) in idx.iter().enumerate() {
            assert!((r as usize) < x.rows && (c as usize) < x.cols, "gather_elems out of range");
            v.data[i] = x.at(r as usize, c as usize);
        }
        let ng = self.needs(a);
        self.push(Op::GatherElems(a, idx), v, ng)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let ng = self.needs(a);
        self.push(Op::SumAll(a), v, ng)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        assert!(!x.is_empty(), "mean of an empty tensor");
        let v = Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64);
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), v, ng)
    }

    /// Sums each row to a column vector (n x d -> n x 1).
    pub fn sum_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, 1);
        for r in 0..x.rows {
            v.data[r] = x.row(r).iter().sum();
        }
        let ng = self.needs(a);
        self.push(Op::SumRows(a), v, ng)
    }

    /// Finds the earliest node with a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<(VarId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse sweep from a scalar `loss`. Accumulates into leaf gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        if !lv.data[0].is_finite() {
            let at = self
                .first_nonfinite()
                .map(|(i, op)| format!(" (first non-finite at node {i}: {op})"))
                .unwrap_or_default();
            return Err(Error::Numerical(format!("loss is not finite{at}")));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss] = Some(Tensor::scalar(1.0));

        let Tape { ref nodes, ref mut grads } = *self;

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], id: VarId, delta: Tensor) {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut grads[id] {
                Some(g) => {
                    debug_assert!(g.same_shape(&delta));
                    for (gi, di) in g.data.iter_mut().zip(&delta.data) {
                        *gi += di;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }

        for i in (0..=loss).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            // Leaves keep their gradient; interior grads are consumed here.
            let g = match &nodes[i].op {
                Op::Param | Op::Const => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let val = &nodes[i].value;
            match &nodes[i].op {
                Op::Param | Op::Const => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        let mut da = grads[*a]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(nodes[*a].value.rows, nodes[*a].value.cols));
                        mm_nt_acc(&g, &nodes[*b].value, &mut da);
                        grads[*a] = Some(da);
                    }
                    if nodes[*b].needs_grad {
                        let mut db = grads[*b]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(nodes[*b].value.rows, nodes[*b].value.cols));
                        mm_tn_acc(&nodes[*a].value, &g, &mut db);
                        grads[*b] = Some(db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if nodes[*a].needs_grad {
                        let mut da = grads[*a]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(nodes[*a].value.rows, nodes[*a].value.cols));
                        mm_nn_acc(&g, &nodes[*b].value, &mut da);
                        grads[*a] = Some(da);
                    }
                    if nodes[*b].needs_grad {
                        let mut db = grads[*b]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(nodes[*b].value.rows, nodes[*b].value.cols));
                        mm_tn_acc(&g, &nodes[*a].value, &mut db);
                        grads[*b] = Some(db);
                    }
                }
                Op::Add(a, b) => {
                    let kind = broadcast_kind(&nodes[*a].value, &nodes[*b].value);
                    acc(grads, nodes, *a, g.clone());
                    let vb = &nodes[*b].value;
                    acc(grads, nodes, *b, reduce_to_rhs(&g, kind, vb.rows, vb.cols));
                }
                Op::Sub(a, b) => {
                    let kind = broadcast_kind(&nodes[*a].value, &nodes[*b].value);
                    acc(grads, nodes, *a, g.clone());
                    let vb = &nodes[*b].value;
                    let mut db = reduce_to_rhs(&g, kind, vb.rows, vb.cols);
                    for x in &mut db.data {
                        *x = -*x;
                    }
                    acc(grads, nodes, *b, db);
                }
                Op::Mul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    let kind = broadcast_kind(va, vb);
                    if nodes[*a].needs_grad {
                        let da = zip_broadcast(&g, vb, |gi, y| gi * y);
                        acc(grads, nodes, *a, da);
                    }
                    if nodes[*b].needs_grad {
                        let mut full = g.clone();
                        for (f, &x) in full.data.iter_mut().zip(&va.data) {
                            *f *= x;
                        }
                        acc(grads, nodes, *b, reduce_to_rhs(&full, kind, vb.rows, vb.cols));
                    }
                }
                Op::Div(a, b) => {
                    let vb = &nodes[*b].value;
                    let kind = broadcast_kind(&nodes[*a].value, vb);
                    if nodes[*a].needs_grad {
                        let da = zip_broadcast(&g, vb, |gi, y| gi / y);
                        acc(grads, nodes, *a, da);
                    }
                    if nodes[*b].needs_grad {
                        // d/db (a/b) = -y/b with y = a/b
                        let mut full = zip_broadcast(val, vb, |y, bv| -y / bv);
                        for (f, &gi) in full.data.iter_mut().zip(&g.data) {
                            *f *= gi;
                        }
                        acc(grads, nodes, *b, reduce_to_rhs(&full, kind, vb.rows, vb.cols));
                    }
                }
                Op::Scale(a, c) => {
                    let mut da = g;
                    for x in &mut da.data {
                        *x *= c;
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::AddConst(a) => acc(grads, nodes, *a, g),
                Op::Exp(a) => {
                    let mut da = g;
                    for (x, &y) in da.data.iter_mut().zip(&val.data) {
                        *x *= y;
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::Log(a) => {
                    let mut da = g;
                    for (x, &xi) in da.data.iter_mut().zip(&nodes[*a].value.data) {
                        *x /= xi;
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::Tanh(a) => {
                    let mut da = g;
                    for (x, &y) in da.data.iter_mut().zip(&val.data) {
                        *x *= 1.0 - y * y;
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::Sigmoid(a) => {
                    let mut da = g;
                    for (x, &y) in da.data.iter_mut().zip(&val.data) {
                        *x *= y * (1.0 - y);
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::Softplus(a) => {
                    let mut da = g;
                    for (x, &xi) in da.data.iter_mut().zip(&nodes[*a].value.data) {
                        *x *= sigmoid(xi);
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::Abs(a) => {
                    let mut da = g;
                    for (x, &xi) in da.data.iter_mut().zip(&nodes[*a].value.data) {
                        *x *= if xi > 0.0 {
                            1.0
                        } else if xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut da = g;
                    for (x, &xi) in da.data.iter_mut().zip(&nodes[*a].value.data) {
                        if !(xi > *lo && xi < *hi) {
                            *x = 0.0;
                        }
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::MinElem(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    if nodes[*a].needs_grad {
                        let mut da = g.clone();
                        for ((x, &xa), &xb) in da.data.iter_mut().zip(&va.data).zip(&vb.data) {
                            if xa > xb {
                                *x = 0.0;
                            }
                        }
                        acc(grads, nodes, *a, da);
                    }
                    if nodes[*b].needs_grad {
                        let mut db = g;
                        for ((x, &xa), &xb) in db.data.iter_mut().zip(&va.data).zip(&vb.data) {
                            if xa <= xb {
                                *x = 0.0;
                            }
                        }
                        acc(grads, nodes, *b, db);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let p = val;
                    let mut da = Tensor::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        softmax_backward_row(
                            p.row(r),
                            &g.data[r * p.cols..(r + 1) * p.cols],
                            &mut da.data[r * p.cols..(r + 1) * p.cols],
                        );
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::CausalSoftmaxRows(a) => {
                    let p = val;
                    let mut da = Tensor::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let w = r + 1;
                        softmax_backward_row(
                            &p.row(r)[..w],
                            &g.data[r * p.cols..r * p.cols + w],
                            &mut da.data[r * p.cols..r * p.cols + w],
                        );
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = dy - softmax(x) * sum(dy) per row
                    let y = val;
                    let mut da = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let grow = &g.data[r * y.cols..(r + 1) * y.cols];
                        let gsum: f64 = grow.iter().sum();
                        let yrow = y.row(r);
                        let drow = &mut da.data[r * y.cols..(r + 1) * y.cols];
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = gi - yi.exp() * gsum;
                        }
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::GatherRows(a, ids) => {
                    let va = &nodes[*a].value;
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    for (i, &r) in ids.iter().enumerate() {
                        let r = r as usize;
                        for c in 0..va.cols {
                            da.data[r * va.cols + c] += g.data[i * va.cols + c];
                        }
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::GatherElems(a, idx) => {
                    let va = &nodes[*a].value;
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    for (i, &(r, c)) in idx.iter().enumerate() {
                        da.data[r as usize * va.cols + c as usize] += g.data[i];
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::SumAll(a) => {
                    let va = &nodes[*a].value;
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    for x in &mut da.data {
                        *x = g.data[0];
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::MeanAll(a) => {
                    let va = &nodes[*a].value;
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    let s = g.data[0] / va.len() as f64;
                    for x in &mut da.data {
                        *x = s;
                    }
                    acc(grads, nodes, *a, da);
                }
                Op::SumRows(a) => {
                    let va = &nodes[*a].value;
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        let gi = g.data[r];
                        for c in 0..va.cols {
                            da.data[r * va.cols + c] = gi;
                        }
                    }
                    acc(grads, nodes, *a, da);
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &xi) in out.iter_mut().zip(x) {
        let e = (xi - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &xi in x {
        z += (xi - m).exp();
    }
    let lz = m + z.ln();
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = xi - lz;
    }
}

/// dx = p * (dp - sum(dp * p)) for one softmax row.
fn softmax_backward_row(p: &[f64], dp: &[f64], dx: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(&pi, &di)| pi * di).sum();
    for ((x, &pi), &di) in dx.iter_mut().zip(p).zip(dp) {
        *x = pi * (di - dot);
    }
}
