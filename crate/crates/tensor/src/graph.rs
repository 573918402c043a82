//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the ids of its inputs. Inputs always precede their consumers, so
//! the backward pass is a single reverse sweep. Graphs are cheap and meant to be
//! rebuilt for each forward pass.

use std::cell::RefCell;

use crate::error::{Result, TensorError};
use crate::kernels::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm, reduce_to_shape, strides_of,
    MatView,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    Exp(usize),
    InvSqrtOrZero(usize),
    Matmul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
    },
    NodeMatmul(usize, usize),
    Gram(usize),
    SoftmaxLast(usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Expand(usize),
    Gather(usize, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) | NodeMatmul(a, b) => vec![*a, *b],
            Bmm { a, b, .. } => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Sigmoid(a) | Tanh(a) | Relu(a) | Abs(a) | Exp(a)
            | InvSqrtOrZero(a) | Gram(a) | SoftmaxLast(a) | SumAll(a) | MeanAll(a) | SumAxis(a)
            | Reshape(a) | Permute(a, _) | Expand(a) | Gather(a, _) => vec![*a],
            Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable input.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.grad_flag(&op.inputs());
        self.push(value, op, rg)
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        let len = self.len();
        if !std::ptr::eq(v.graph, self) || v.id >= len {
            return Err(TensorError::ForeignVariable { id: v.id, len });
        }
        Ok(())
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        if vars.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        for v in vars {
            self.check(*v)?;
        }
        let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut extent = 0;
        for t in &values {
            let s = t.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = extent;
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for t in &values {
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids = vars.iter().map(|v| v.id).collect();
        Ok(self.record(Tensor::from_parts(out_shape, data), Op::Concat(ids, axis)))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack<'g>(&'g self, vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let expanded = vars
            .iter()
            .map(|v| {
                let mut s = v.shape();
                if axis > s.len() {
                    return Err(TensorError::InvalidArgument {
                        op: "stack",
                        reason: format!("axis {axis} out of range for rank {}", s.len()),
                    });
                }
                s.insert(axis, 1);
                v.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&expanded, axis)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for p in node.op.inputs() {
                if p >= id {
                    return Err(TensorError::InvalidArgument {
                        op: "backward",
                        reason: format!("graph cycle: node {id} consumes node {p}"),
                    });
                }
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(*a) {
                accumulate(grads, *a, reduce_to_shape(g, out.shape(), val(*a).shape()));
            }
            if needs(*b) {
                let mut gb = reduce_to_shape(g, out.shape(), val(*b).shape());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let sa = broadcast_strides(ta.shape(), out.shape());
            let sb = broadcast_strides(tb.shape(), out.shape());
            if needs(*a) {
                let mut acc = vec![0.0; ta.len()];
                let vb = tb.data();
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| acc[ia] += g[o] * vb[ib]);
                accumulate(grads, *a, acc);
            }
            if needs(*b) {
                let mut acc = vec![0.0; tb.len()];
                let va = ta.data();
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| acc[ib] += g[o] * va[ia]);
                accumulate(grads, *b, acc);
            }
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|x| x * s).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
        Op::Sigmoid(a) => accumulate(
            grads,
            *a,
            g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
        ),
        Op::Tanh(a) => accumulate(
            grads,
            *a,
            g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
        ),
        Op::Exp(a) => accumulate(grads, *a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
        Op::Relu(a) => accumulate(
            grads,
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        Op::Abs(a) => accumulate(
            grads,
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -*g
                    } else {
                        0.0
                    }
                })
                .collect(),
        ),
        Op::InvSqrtOrZero(a) => accumulate(
            grads,
            *a,
            g.iter()
                .zip(val(*a).data())
                .zip(out.data())
                .map(|((g, x), y)| if *x > 0.0 { -0.5 * g * y / x } else { 0.0 })
                .collect(),
        ),
        Op::Matmul(a, w) => {
            let (ta, tw) = (val(*a), val(*w));
            let k = tw.shape()[0];
            let n = tw.shape()[1];
            let rows = ta.len() / k.max(1);
            if needs(*a) {
                let mut ga = vec![0.0; ta.len()];
                gemm(
                    g,
                    MatView::dense(rows, n),
                    tw.data(),
                    MatView::dense(k, n).t(),
                    &mut ga,
                    MatView::dense(rows, k),
                    0.0,
                );
                accumulate(grads, *a, ga);
            }
            if needs(*w) {
                let mut gw = vec![0.0; tw.len()];
                gemm(
                    ta.data(),
                    MatView::dense(rows, k).t(),
                    g,
                    MatView::dense(rows, n),
                    &mut gw,
                    MatView::dense(k, n),
                    0.0,
                );
                accumulate(grads, *w, gw);
            }
        }
        Op::Bmm {
            a,
            b,
            trans_a,
            trans_b,
        } => {
            let (ta, tb) = (val(*a), val(*b));
            let geo = BmmGeometry::new(ta.shape(), tb.shape(), *trans_a, *trans_b)
                .expect("validated in forward");
            let (m, k, n) = (geo.m, geo.k, geo.n);
            let gv = MatView::dense(m, n);
            if needs(*a) {
                let mut ga = vec![0.0; ta.len()];
                for bi in 0..geo.batch {
                    gemm(
                        &g[bi * m * n..],
                        gv,
                        &tb.data()[bi * k * n..],
                        geo.bv.t(),
                        &mut ga[bi * m * k..],
                        geo.av,
                        0.0,
                    );
                }
                accumulate(grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; tb.len()];
                for bi in 0..geo.batch {
                    gemm(
                        &ta.data()[bi * m * k..],
                        geo.av.t(),
                        &g[bi * m * n..],
                        gv,
                        &mut gb[bi * k * n..],
                        geo.bv,
                        0.0,
                    );
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::NodeMatmul(z, theta) => {
            let (tz, tt) = (val(*z), val(*theta));
            let (nodes_n, fin, fout) = (tt.shape()[0], tt.shape()[1], tt.shape()[2]);
            let batch = tz.len() / (nodes_n * fin).max(1);
            let zv = MatView::dense(batch, fin).with_row_stride(nodes_n * fin);
            let ov = MatView::dense(batch, fout).with_row_stride(nodes_n * fout);
            let thv = MatView::dense(fin, fout);
            if needs(*z) {
                let mut gz = vec![0.0; tz.len()];
                for i in 0..nodes_n {
                    gemm(
                        &g[i * fout..],
                        ov,
                        &tt.data()[i * fin * fout..],
                        thv.t(),
                        &mut gz[i * fin..],
                        zv,
                        0.0,
                    );
                }
                accumulate(grads, *z, gz);
            }
            if needs(*theta) {
                let mut gt = vec![0.0; tt.len()];
                for i in 0..nodes_n {
                    gemm(
                        &tz.data()[i * fin..],
                        zv.t(),
                        &g[i * fout..],
                        ov,
                        &mut gt[i * fin * fout..],
                        thv,
                        0.0,
                    );
                }
                accumulate(grads, *theta, gt);
            }
        }
        Op::Gram(a) => {
            let ta = val(*a);
            let s = ta.shape();
            let (n, k) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = ta.len() / (n * k).max(1);
            let mut sym = vec![0.0; g.len()];
            for bi in 0..batch {
                let off = bi * n * n;
                for i in 0..n {
                    for j in 0..n {
                        sym[off + i * n + j] = g[off + i * n + j] + g[off + j * n + i];
                    }
                }
            }
            let mut ga = vec![0.0; ta.len()];
            for bi in 0..batch {
                gemm(
                    &sym[bi * n * n..],
                    MatView::dense(n, n),
                    &ta.data()[bi * n * k..],
                    MatView::dense(n, k),
                    &mut ga[bi * n * k..],
                    MatView::dense(n, k),
                    0.0,
                );
            }
            accumulate(grads, *a, ga);
        }
        Op::SoftmaxLast(a) => {
            let width = *out.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; out.len()];
            for ((gr, yr), dst) in g
                .chunks(width)
                .zip(out.data().chunks(width))
                .zip(ga.chunks_mut(width))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, g), y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = y * (g - dot);
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::SumAll(a) => accumulate(grads, *a, vec![g[0]; val(*a).len()]),
        Op::MeanAll(a) => {
            let len = val(*a).len();
            accumulate(grads, *a, vec![g[0] / len as f64; len])
        }
        Op::SumAxis(a) | Op::Expand(a) => {
            let ta = val(*a);
            if matches!(node.op, Op::Expand(_)) {
                accumulate(grads, *a, reduce_to_shape(g, out.shape(), ta.shape()));
            } else {
                let sg = broadcast_strides(out.shape(), ta.shape());
                let zero = vec![0; ta.rank()];
                let mut ga = vec![0.0; ta.len()];
                for_each_broadcast(ta.shape(), &sg, &zero, |o, ig, _| ga[o] = g[ig]);
                accumulate(grads, *a, ga);
            }
        }
        Op::Concat(inputs, axis) => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let row = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in inputs {
                let chunk = val(p).shape()[*axis] * inner;
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += chunk;
            }
        }
        Op::Permute(a, perm) => {
            let ta = val(*a);
            let own = strides_of(ta.shape());
            let sa: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
            let zero = vec![0; perm.len()];
            let mut ga = vec![0.0; ta.len()];
            for_each_broadcast(out.shape(), &sa, &zero, |o, ia, _| ga[ia] += g[o]);
            accumulate(grads, *a, ga);
        }
        Op::Gather(table, idx) => {
            let tt = val(*table);
            let width = tt.shape()[1];
            let mut gt = vec![0.0; tt.len()];
            for (r, &row) in idx.iter().enumerate() {
                for c in 0..width {
                    gt[row * width + c] += g[r * width + c];
                }
            }
            accumulate(grads, *table, gt);
        }
    }
}

struct BmmGeometry {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    av: MatView,
    bv: MatView,
    out_shape: Vec<usize>,
}

impl BmmGeometry {
    fn new(a: &[usize], b: &[usize], trans_a: bool, trans_b: bool) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "batched matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(mismatch());
        }
        let r = a.len();
        let (ar, ac) = (a[r - 2], a[r - 1]);
        let (br, bc) = (b[r - 2], b[r - 1]);
        let av = if trans_a { MatView::dense(ar, ac).t() } else { MatView::dense(ar, ac) };
        let bv = if trans_b { MatView::dense(br, bc).t() } else { MatView::dense(br, bc) };
        if av.cols != bv.rows {
            return Err(mismatch());
        }
        let mut out_shape = a[..r - 2].to_vec();
        out_shape.extend([av.rows, bv.cols]);
        Ok(Self {
            batch: a[..r - 2].iter().product(),
            m: av.rows,
            k: av.cols,
            n: bv.cols,
            av,
            bv,
            out_shape,
        })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it was not on the loss path.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads
            .get(v.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(v.shape(), g.clone()))
    }

    /// Gradient of a leaf; zeros when it does not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let v = self.value().map(f);
        self.graph.record(v, op)
    }

    fn binary(self, other: Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.graph.check(other)?;
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
        let data = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (va, vb) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(va[ia], vb[ib]));
            data
        };
        let op = match name {
            "add" => Op::Add(self.id, other.id),
            "sub" => Op::Sub(self.id, other.id),
            _ => Op::Mul(self.id, other.id),
        };
        Ok(self.graph.record(Tensor::from_parts(out_shape, data), op))
    }

    /// Broadcasting elementwise sum.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |x, y| x + y)
    }

    /// Broadcasting elementwise difference.
    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |x, y| x - y)
    }

    /// Broadcasting Hadamard product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |x, y| x * y)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g> {
        self.neg().add_scalar(1.0)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// `x^(-1/2)` for positive entries and `0` elsewhere.
    pub fn inv_sqrt_or_zero(self) -> Var<'g> {
        self.unary(Op::InvSqrtOrZero(self.id), |x| if x > 0.0 { x.sqrt().recip() } else { 0.0 })
    }

    /// `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul(self, w: Var<'g>) -> Result<Var<'g>> {
        self.graph.check(w)?;
        let (a, tw) = (self.value(), w.value());
        if tw.rank() != 2 || a.rank() == 0 || a.shape()[a.rank() - 1] != tw.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (k, n) = (tw.shape()[0], tw.shape()[1]);
        let rows = a.len() / k.max(1);
        let mut data = vec![0.0; rows * n];
        gemm(
            a.data(),
            MatView::dense(rows, k),
            tw.data(),
            MatView::dense(k, n),
            &mut data,
            MatView::dense(rows, n),
            0.0,
        );
        let mut shape = a.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, data), Op::Matmul(self.id, w.id)))
    }

    /// Batched matrix product over identical leading axes, with optional
    /// transposition of either operand's last two axes.
    pub fn bmm(self, other: Var<'g>, trans_a: bool, trans_b: bool) -> Result<Var<'g>> {
        self.graph.check(other)?;
        let (a, b) = (self.value(), other.value());
        let geo = BmmGeometry::new(a.shape(), b.shape(), trans_a, trans_b)?;
        let (m, k, n) = (geo.m, geo.k, geo.n);
        let mut data = vec![0.0; geo.batch * m * n];
        for bi in 0..geo.batch {
            gemm(
                &a.data()[bi * m * k..],
                geo.av,
                &b.data()[bi * k * n..],
                geo.bv,
                &mut data[bi * m * n..],
                MatView::dense(m, n),
                0.0,
            );
        }
        Ok(self.graph.record(
            Tensor::from_parts(geo.out_shape, data),
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_a,
                trans_b,
            },
        ))
    }

    /// Per-node matrix product: `[..., N, F_in]` rows of node `i` are
    /// multiplied by `theta[i]` of shape `[F_in, F_out]`.
    pub fn node_matmul(self, theta: Var<'g>) -> Result<Var<'g>> {
        self.graph.check(theta)?;
        let (z, t) = (self.value(), theta.value());
        let zs = z.shape();
        let bad = || TensorError::ShapeMismatch {
            op: "node matmul",
            lhs: zs.to_vec(),
            rhs: t.shape().to_vec(),
        };
        if t.rank() != 3 || zs.len() < 2 {
            return Err(bad());
        }
        let (nn, fin, fout) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if zs[zs.len() - 2] != nn || zs[zs.len() - 1] != fin {
            return Err(bad());
        }
        let batch = z.len() / (nn * fin).max(1);
        let mut data = vec![0.0; batch * nn * fout];
        let zv = MatView::dense(batch, fin).with_row_stride(nn * fin);
        let ov = MatView::dense(batch, fout).with_row_stride(nn * fout);
        for i in 0..nn {
            gemm(
                &z.data()[i * fin..],
                zv,
                &t.data()[i * fin * fout..],
                MatView::dense(fin, fout),
                &mut data[i * fout..],
                ov,
                0.0,
            );
        }
        let mut shape = zs.to_vec();
        *shape.last_mut().expect("rank >= 2") = fout;
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, data), Op::NodeMatmul(self.id, theta.id)))
    }

    /// `x xᵀ` over the last two axes. Only the upper triangle is computed and
    /// mirrored, so the result is exactly symmetric.
    pub fn gram(self) -> Result<Var<'g>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "gram",
                reason: format!("need rank >= 2, got {s:?}"),
            });
        }
        let (n, k) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = x.len() / (n * k).max(1);
        let mut data = vec![0.0; batch * n * n];
        for bi in 0..batch {
            let rows = &x.data()[bi * n * k..(bi + 1) * n * k];
            let out = &mut data[bi * n * n..(bi + 1) * n * n];
            for i in 0..n {
                let ri = &rows[i * k..(i + 1) * k];
                for j in i..n {
                    let rj = &rows[j * k..(j + 1) * k];
                    let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                    out[i * n + j] = dot;
                    out[j * n + i] = dot;
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([n, n]);
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, data), Op::Gram(self.id)))
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_last(self) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let width = *shape.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "softmax",
            reason: "scalar input".into(),
        })?;
        if width == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: "empty last axis".into(),
            });
        }
        let mut data = vec![0.0; x.len()];
        for (slice, (src, dst)) in x.data().chunks(width).zip(data.chunks_mut(width)).enumerate() {
            if src.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { shape, slice });
            }
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, data), Op::SoftmaxLast(self.id)))
    }

    pub fn sum(self) -> Var<'g> {
        let total = self.value().data().iter().sum();
        self.graph.record(Tensor::scalar(total), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let x = self.value();
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        self.graph.record(Tensor::scalar(m), Op::MeanAll(self.id))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                reason: format!("axis {axis} out of range for rank {}", x.rank()),
            });
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let so = broadcast_strides(&shape, x.shape());
        let zero = vec![0; x.rank()];
        let mut data = vec![0.0; shape.iter().product()];
        let src = x.data();
        for_each_broadcast(x.shape(), &so, &zero, |i, o, _| data[o] += src[i]);
        Ok(self
            .graph
            .record(Tensor::from_parts(shape, data), Op::SumAxis(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.record(v, Op::Reshape(self.id)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of rank {}", x.rank()),
            });
        }
        let own = strides_of(x.shape());
        let sa: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let zero = vec![0; perm.len()];
        let mut data = vec![0.0; x.len()];
        let src = x.data();
        for_each_broadcast(&shape, &sa, &zero, |o, ia, _| data[o] = src[ia]);
        Ok(self.graph.record(
            Tensor::from_parts(shape, data),
            Op::Permute(self.id, perm.to_vec()),
        ))
    }

    /// Broadcasts to `shape` (numpy rules).
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let out = broadcast_shape("expand", x.shape(), shape)?;
        if out != shape {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let sa = broadcast_strides(x.shape(), shape);
        let zero = vec![0; shape.len()];
        let mut data = vec![0.0; shape.iter().product()];
        let src = x.data();
        for_each_broadcast(shape, &sa, &zero, |o, ia, _| data[o] = src[ia]);
        Ok(self
            .graph
            .record(Tensor::from_parts(shape.to_vec(), data), Op::Expand(self.id)))
    }

    /// Row lookup into a `[rows, width]` table.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &r in idx {
            if r >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    reason: format!("row {r} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        Ok(self.graph.record(
            Tensor::from_parts(vec![idx.len(), width], data),
            Op::Gather(self.id, idx.to_vec()),
        ))
    }
}
