//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so every parent has a smaller id
//! than its children and reverse id order is a valid reverse topological
//! order. Values are computed eagerly. `Graph::gradients` walks the graph
//! backwards, expressing every vector-Jacobian product with the same graph
//! operations; in create-graph mode the VJPs read the live parent nodes and
//! the resulting gradients are themselves differentiable, otherwise they
//! read detached copies and nothing flows back.

use std::cell::RefCell;
use std::rc::Rc;

use super::special::{gelu_derivative_with, normal_cdf, normal_pdf, MAX_GELU_ORDER};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    /// Trainable input; gradients are requested against these.
    Leaf,
    /// Data or detached value.
    Constant,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    /// `a (n x m) + b (1 x m)` with `b` repeated on every row.
    AddRow { a: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// Sum of all entries, 1x1 result.
    Sum(NodeId),
    /// Column sums, 1 x m result.
    SumRows(NodeId),
    /// 1 x m repeated to n x m.
    BroadcastRows(NodeId),
    /// 1x1 repeated to rows x cols.
    Fill(NodeId),
    Gelu { x: NodeId, order: u8, cache: Rc<GeluCache> },
    Abs(NodeId),
    Relu(NodeId),
    /// `out[n, k] = sum_w t[n, w] * e[n, k*W + w]`.
    RowBilinear { t: NodeId, e: NodeId },
    /// `out[n, w] = sum_k g[n, k] * e[n, k*W + w]`.
    RowContractT { g: NodeId, e: NodeId },
    /// `out[n, k*W + w] = g[n, k] * t[n, w]`.
    RowOuter { g: NodeId, t: NodeId },
    /// `out.flat[i] = x.flat[index[i]]`.
    Gather { x: NodeId, index: Rc<[usize]> },
    /// Adjoint of `Gather`: `out.flat[index[i]] += x.flat[i]`.
    Scatter { x: NodeId, index: Rc<[usize]> },
}

/// `Phi(x)` and `phi(x)` of a GELU input, shared by all derivative orders.
#[derive(Debug)]
struct GeluCache {
    cdf: Vec<f64>,
    pdf: Vec<f64>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    /// Depends on at least one `Leaf`.
    tracked: bool,
}

/// Append-only tape for one forward (and possibly backward) pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a graph node.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    Ok(())
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

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, tracked)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn value_rc(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn var(&self, id: NodeId) -> Var<'_> {
        Var { graph: self, id }
    }

    fn detached(&self, id: NodeId) -> Var<'_> {
        let v = self.value_rc(id);
        self.push_rc(v, Op::Constant, false)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// Nodes in `wrt` that the loss does not reach receive zeros. With
    /// `create_graph` the returned nodes stay connected to the graph and can
    /// be differentiated again.
    pub fn gradients<'g>(
        &'g self,
        loss: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>> {
        let (r, c) = loss.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let n = loss.id + 1;
        let mut adjoint: Vec<Option<Var<'g>>> = vec![None; n];
        adjoint[loss.id] = Some(self.constant(Tensor::scalar(1.0)));

        for id in (0..n).rev() {
            let Some(g) = adjoint[id] else { continue };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[id].tracked {
                    continue;
                }
                nodes[id].op.clone()
            };
            let parent = |p: NodeId| {
                if create_graph {
                    self.var(p)
                } else {
                    self.detached(p)
                }
            };
            let mut contribs: Vec<(NodeId, Var<'g>)> = Vec::with_capacity(2);
            match op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul { a, b, ta, tb } => {
                    if self.is_tracked(a) {
                        let bv = parent(b);
                        let da = match (ta, tb) {
                            (false, false) => g.matmul_t(&bv, false, true)?,
                            (true, false) => bv.matmul_t(&g, false, true)?,
                            (false, true) => g.matmul_t(&bv, false, false)?,
                            (true, true) => bv.matmul_t(&g, true, true)?,
                        };
                        contribs.push((a, da));
                    }
                    if self.is_tracked(b) {
                        let av = parent(a);
                        let db = match (ta, tb) {
                            (false, false) => av.matmul_t(&g, true, false)?,
                            (true, false) => av.matmul_t(&g, false, false)?,
                            (false, true) => g.matmul_t(&av, true, false)?,
                            (true, true) => g.matmul_t(&av, true, true)?,
                        };
                        contribs.push((b, db));
                    }
                }
                Op::AddRow { a, b } => {
                    if self.is_tracked(a) {
                        contribs.push((a, g));
                    }
                    if self.is_tracked(b) {
                        contribs.push((b, g.sum_rows()));
                    }
                }
                Op::Add(a, b) => {
                    if self.is_tracked(a) {
                        contribs.push((a, g));
                    }
                    if self.is_tracked(b) {
                        contribs.push((b, g));
                    }
                }
                Op::Sub(a, b) => {
                    if self.is_tracked(a) {
                        contribs.push((a, g));
                    }
                    if self.is_tracked(b) {
                        contribs.push((b, g.scale(-1.0)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.is_tracked(a) {
                        contribs.push((a, g.mul(&parent(b))?));
                    }
                    if self.is_tracked(b) {
                        contribs.push((b, g.mul(&parent(a))?));
                    }
                }
                Op::Scale(a, s) => contribs.push((a, g.scale(s))),
                Op::AddConst(a) => contribs.push((a, g)),
                Op::Sum(a) => {
                    let (r, c) = self.value_rc(a).shape();
                    contribs.push((a, g.fill(r, c)?));
                }
                Op::SumRows(a) => {
                    let r = self.value_rc(a).rows();
                    contribs.push((a, g.broadcast_rows(r)?));
                }
                Op::BroadcastRows(a) => contribs.push((a, g.sum_rows())),
                Op::Fill(a) => contribs.push((a, g.sum())),
                Op::Gelu { x, order, cache } => {
                    if order >= MAX_GELU_ORDER {
                        return Err(Error::Unsupported(format!(
                            "GELU derivative beyond order {MAX_GELU_ORDER}"
                        )));
                    }
                    let d = parent(x).gelu_order(order + 1, cache);
                    contribs.push((x, g.mul(&d)?));
                }
                Op::Abs(x) => {
                    let sign = self.constant(self.value_rc(x).map(f64::signum));
                    contribs.push((x, g.mul(&sign)?));
                }
                Op::Relu(x) => {
                    let step = self
                        .constant(self.value_rc(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                    contribs.push((x, g.mul(&step)?));
                }
                Op::RowBilinear { t, e } => {
                    if self.is_tracked(t) {
                        contribs.push((t, g.row_contract_t(&parent(e))?));
                    }
                    if self.is_tracked(e) {
                        contribs.push((e, g.row_outer(&parent(t))?));
                    }
                }
                Op::RowContractT { g: gg, e } => {
                    if self.is_tracked(gg) {
                        contribs.push((gg, g.row_bilinear(&parent(e))?));
                    }
                    if self.is_tracked(e) {
                        contribs.push((e, parent(gg).row_outer(&g)?));
                    }
                }
                Op::RowOuter { g: gg, t } => {
                    if self.is_tracked(gg) {
                        contribs.push((gg, parent(t).row_bilinear(&g)?));
                    }
                    if self.is_tracked(t) {
                        contribs.push((t, parent(gg).row_contract_t(&g)?));
                    }
                }
                Op::Gather { x, index } => {
                    let (r, c) = self.value_rc(x).shape();
                    contribs.push((x, g.scatter(index, r, c)?));
                }
                Op::Scatter { x, index } => {
                    let (r, c) = self.value_rc(x).shape();
                    contribs.push((x, g.gather(index, r, c)?));
                }
            }
            for (p, d) in contribs {
                if !self.is_tracked(p) {
                    continue;
                }
                adjoint[p] = Some(match adjoint[p] {
                    Some(acc) => acc.add(&d)?,
                    None => d,
                });
            }
        }

        wrt.iter()
            .map(|w| {
                let grad = if w.id < n { adjoint[w.id] } else { None };
                Ok(match grad {
                    Some(g) if create_graph => g,
                    Some(g) => self.detached(g.id),
                    None => {
                        let (r, c) = w.shape();
                        self.constant(Tensor::zeros(r, c))
                    }
                })
            })
            .collect()
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_rc(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.is_tracked(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.detached(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.is_tracked())
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let tracked = self.is_tracked() || other.is_tracked();
        self.graph.push(value, op, tracked)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.matmul_t(other, false, false)
    }

    pub fn matmul_t(&self, other: &Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        let v = self.value().matmul(&other.value(), ta, tb)?;
        Ok(self.binary(
            other,
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = row.value();
        if b.rows() != 1 || b.cols() != a.cols() {
            return Err(Error::shape(
                "add_row",
                format!("1x{}", a.cols()),
                format!("{}x{}", b.rows(), b.cols()),
            ));
        }
        let mut out = (*a).clone();
        let m = a.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % m];
        }
        Ok(self.binary(row, out, Op::AddRow { a: self.id, b: row.id }))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("sub", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(self.value().map(|x| x * s), Op::Scale(self.id, s))
    }

    pub fn add_const(&self, c: f64) -> Var<'g> {
        self.unary(self.value().map(|x| x + c), Op::AddConst(self.id))
    }

    pub fn sum(&self) -> Var<'g> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_rows(&self) -> Var<'g> {
        let a = self.value();
        let mut out = Tensor::zeros(1, a.cols());
        for r in 0..a.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(a.row_slice(r)) {
                *o += v;
            }
        }
        self.unary(out, Op::SumRows(self.id))
    }

    pub fn broadcast_rows(&self, n: usize) -> Result<Var<'g>> {
        let a = self.value();
        if a.rows() != 1 {
            return Err(Error::shape("broadcast_rows", "1 row", a.rows()));
        }
        let mut data = Vec::with_capacity(n * a.cols());
        for _ in 0..n {
            data.extend_from_slice(a.data());
        }
        let out = Tensor::from_vec(n, a.cols(), data)?;
        Ok(self.unary(out, Op::BroadcastRows(self.id)))
    }

    pub fn fill(&self, rows: usize, cols: usize) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() != (1, 1) {
            return Err(Error::shape("fill", "1x1", format!("{}x{}", a.rows(), a.cols())));
        }
        Ok(self.unary(Tensor::filled(rows, cols, a.item()), Op::Fill(self.id)))
    }

    pub fn gelu(&self) -> Var<'g> {
        let x = self.value();
        let cache = Rc::new(GeluCache {
            cdf: x.data().iter().map(|&v| normal_cdf(v)).collect(),
            pdf: x.data().iter().map(|&v| normal_pdf(v)).collect(),
        });
        self.gelu_order(0, cache)
    }

    fn gelu_order(&self, order: u8, cache: Rc<GeluCache>) -> Var<'g> {
        let x = self.value();
        let mut v = (*x).clone();
        for (i, o) in v.data_mut().iter_mut().enumerate() {
            *o = gelu_derivative_with(*o, cache.cdf[i], cache.pdf[i], order);
        }
        self.unary(v, Op::Gelu { x: self.id, order, cache })
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(self.value().map(f64::abs), Op::Abs(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    /// Per-row product of a `1 x W` row with the `I x W` matrix stored
    /// row-major in the matching row of `e`, giving an `N x I` result.
    pub fn row_bilinear(&self, e: &Var<'g>) -> Result<Var<'g>> {
        let (t, ev) = (self.value(), e.value());
        let (n, w) = t.shape();
        if ev.rows() != n || w == 0 || ev.cols() % w != 0 {
            return Err(Error::shape(
                "row_bilinear",
                format!("{n}xk*{w}"),
                format!("{}x{}", ev.rows(), ev.cols()),
            ));
        }
        let k_out = ev.cols() / w;
        let mut out = Tensor::zeros(n, k_out);
        for r in 0..n {
            let trow = t.row_slice(r);
            let erow = ev.row_slice(r);
            for k in 0..k_out {
                let coeffs = &erow[k * w..(k + 1) * w];
                let s: f64 = trow.iter().zip(coeffs).map(|(a, b)| a * b).sum();
                out.set(r, k, s);
            }
        }
        Ok(self.binary(e, out, Op::RowBilinear { t: self.id, e: e.id }))
    }

    fn row_contract_t(&self, e: &Var<'g>) -> Result<Var<'g>> {
        let (g, ev) = (self.value(), e.value());
        let (n, k_out) = g.shape();
        if ev.rows() != n || k_out == 0 || ev.cols() % k_out != 0 {
            return Err(Error::shape("row_contract_t", n, ev.rows()));
        }
        let w = ev.cols() / k_out;
        let mut out = Tensor::zeros(n, w);
        for r in 0..n {
            let erow = ev.row_slice(r);
            for k in 0..k_out {
                let gk = g.get(r, k);
                for j in 0..w {
                    let cur = out.get(r, j);
                    out.set(r, j, cur + gk * erow[k * w + j]);
                }
            }
        }
        Ok(self.binary(e, out, Op::RowContractT { g: self.id, e: e.id }))
    }

    fn row_outer(&self, t: &Var<'g>) -> Result<Var<'g>> {
        let (g, tv) = (self.value(), t.value());
        let (n, k_out) = g.shape();
        if tv.rows() != n {
            return Err(Error::shape("row_outer", n, tv.rows()));
        }
        let w = tv.cols();
        let mut out = Tensor::zeros(n, k_out * w);
        for r in 0..n {
            let trow = tv.row_slice(r);
            for k in 0..k_out {
                let gk = g.get(r, k);
                for j in 0..w {
                    out.set(r, k * w + j, gk * trow[j]);
                }
            }
        }
        Ok(self.binary(t, out, Op::RowOuter { g: self.id, t: t.id }))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `rows x cols`.
    pub fn gather(&self, index: Rc<[usize]>, rows: usize, cols: usize) -> Result<Var<'g>> {
        let a = self.value();
        if index.len() != rows * cols {
            return Err(Error::shape("gather", rows * cols, index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= a.len()) {
            return Err(Error::shape("gather", format!("index < {}", a.len()), bad));
        }
        let data = index.iter().map(|&i| a.data()[i]).collect();
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.unary(out, Op::Gather { x: self.id, index }))
    }

    fn scatter(&self, index: Rc<[usize]>, rows: usize, cols: usize) -> Result<Var<'g>> {
        let a = self.value();
        if index.len() != a.len() {
            return Err(Error::shape("scatter", a.len(), index.len()));
        }
        let mut out = Tensor::zeros(rows, cols);
        for (src, &dst) in index.iter().enumerate() {
            out.data_mut()[dst] += a.data()[src];
        }
        Ok(self.unary(out, Op::Scatter { x: self.id, index }))
    }
}
