use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    MatMul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Powf(Var, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode differentiation graph.
///
/// Forward values are computed eagerly as nodes are appended, so the graph
/// doubles as the evaluation engine for forward-only work. Node ids are
/// assigned in creation order, which is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nan: Option<usize>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn one(x: usize, y: usize) -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    }
    Some((one(a.0, b.0)?, one(a.1, b.1)?))
}

#[inline]
fn bidx(dims: (usize, usize), i: usize, j: usize) -> usize {
    let r = if dims.0 == 1 { 0 } else { i };
    let c = if dims.1 == 1 { 0 } else { j };
    r * dims.1 + c
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (da, db) = (a.dims2(), b.dims2());
    if da == db {
        return a.zip_map(b, f).reshape_unchecked(vec![da.0, da.1]);
    }
    let (r, c) = broadcast_dims(da, db)
        .unwrap_or_else(|| panic!("cannot broadcast {da:?} with {db:?}"));
    let (xa, xb) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(xa[bidx(da, i, j)], xb[bidx(db, i, j)]));
        }
    }
    Tensor::matrix(r, c, out)
}

/// Sum a broadcast gradient back down to `dims`.
fn reduce_to(g: Tensor, dims: (usize, usize)) -> Tensor {
    let (r, c) = g.dims2();
    if (r, c) == dims {
        return g;
    }
    let mut out = vec![0.0; dims.0 * dims.1];
    let gd = g.data();
    for i in 0..r {
        for j in 0..c {
            out[bidx(dims, i, j)] += gd[i * c + j];
        }
    }
    Tensor::matrix(dims.0, dims.1, out)
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        if self.first_nan.is_none() && value.data().iter().any(|v| v.is_nan()) {
            self.first_nan = Some(id);
        }
        self.nodes.push(Node { op, value });
        Var(id)
    }

    /// Input node: parameters and constants are both leaves.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// Id of the first node whose forward value contains NaN, if any.
    pub fn first_nan(&self) -> Option<usize> {
        self.first_nan
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), f);
        self.push(op, v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Max(a, b), f64::max)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(Op::Powf(a, p), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Sum over rows: `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), Tensor::matrix(1, c, out))
    }

    /// Sum over columns: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let r = t.rows();
        let out = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
        self.push(Op::SumCols(a), Tensor::matrix(r, 1, out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), r, "concat_cols row mismatch");
                out.extend_from_slice(t.row_slice(i));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(r, total, out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let r = t.rows();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start, len), Tensor::matrix(r, len, out))
    }

    /// Row gather: output row `k` is input row `idx[k]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        self.push(
            Op::GatherRows(a, idx.to_vec()),
            Tensor::matrix(idx.len(), c, out),
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone();
        assert_eq!(v.numel(), rows * cols, "reshape size mismatch");
        self.push(Op::Reshape(a), v.reshape_unchecked(vec![rows, cols]))
    }

    // ---- compositions over the primitive set ----

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let na = self.neg(a);
        let nb = self.neg(b);
        let m = self.max(na, nb);
        self.neg(m)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let na = self.neg(a);
        self.max(a, na)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let lo_v = self.scalar(lo);
        let hi_v = self.scalar(hi);
        let m = self.min(a, hi_v);
        self.max(m, lo_v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_const(n, 1.0)
    }

    /// Cosine similarity of two tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let ab = self.mul(a, b);
        let dot = self.sum(ab);
        let aa = self.mul(a, a);
        let na = self.sum(aa);
        let bb = self.mul(b, b);
        let nb = self.sum(bb);
        let prod = self.mul(na, nb);
        let inv = self.powf(prod, -0.5);
        self.mul(dot, inv)
    }

    /// Gradients of scalar `output` with respect to each of `wrt`.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return Err(Error::contract(format!(
                "gradient objective must be scalar, got shape {:?}",
                out_val.shape()
            )));
        }
        if let Some(id) = self.first_nan.filter(|&id| id <= output.0) {
            return Err(Error::NumericFault {
                node: id,
                what: "NaN in forward value".into(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::filled(
            out_val.rows(),
            out_val.cols(),
            1.0,
        ));
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Add(a, b) => {
                    let (da, db) = (self.dims(*a), self.dims(*b));
                    accumulate(&mut adj, *b, reduce_to(g.clone(), db));
                    accumulate(&mut adj, *a, reduce_to(g, da));
                }
                Op::Sub(a, b) => {
                    let (da, db) = (self.dims(*a), self.dims(*b));
                    accumulate(&mut adj, *b, reduce_to(g.map(|x| -x), db));
                    accumulate(&mut adj, *a, reduce_to(g, da));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = broadcast_zip(&g, tb, |x, y| x * y);
                    let gb = broadcast_zip(&g, ta, |x, y| x * y);
                    accumulate(&mut adj, *a, reduce_to(ga, ta.dims2()));
                    accumulate(&mut adj, *b, reduce_to(gb, tb.dims2()));
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = broadcast_zip(&g, tb, |x, y| x / y);
                    // d(a/b)/db = -out / b
                    let q = broadcast_zip(&node.value, tb, |o, y| -o / y);
                    let gb = g.zip_map(&q, |x, y| x * y);
                    accumulate(&mut adj, *a, reduce_to(ga, ta.dims2()));
                    accumulate(&mut adj, *b, reduce_to(gb, tb.dims2()));
                }
                Op::Max(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let sel = broadcast_zip(ta, tb, |x, y| if x >= y { 1.0 } else { 0.0 });
                    let ga = g.zip_map(&sel, |x, s| x * s);
                    let gb = g.zip_map(&sel, |x, s| x * (1.0 - s));
                    accumulate(&mut adj, *a, reduce_to(ga, ta.dims2()));
                    accumulate(&mut adj, *b, reduce_to(gb, tb.dims2()));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(&tb.transpose());
                    let gb = ta.transpose().matmul(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Neg(a) => accumulate(&mut adj, *a, g.map(|x| -x)),
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut adj, *a, g.map(|x| x * s))
                }
                Op::AddConst(a) => accumulate(&mut adj, *a, g),
                Op::Exp(a) => accumulate(&mut adj, *a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| x / v);
                    accumulate(&mut adj, *a, ga)
                }
                Op::Tanh(a) => {
                    accumulate(&mut adj, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)))
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut adj, *a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y)))
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| x * sigmoid(v));
                    accumulate(&mut adj, *a, ga)
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let ga = g.zip_map(self.value(*a), |x, v| x * p * v.powf(p - 1.0));
                    accumulate(&mut adj, *a, ga)
                }
                Op::Sum(a) => {
                    let (r, c) = self.dims(*a);
                    accumulate(&mut adj, *a, Tensor::filled(r, c, g.item()))
                }
                Op::SumRows(a) => {
                    let (r, c) = self.dims(*a);
                    let mut out = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        out.extend_from_slice(g.data());
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(r, c, out))
                }
                Op::SumCols(a) => {
                    let (r, c) = self.dims(*a);
                    let mut out = Vec::with_capacity(r * c);
                    for i in 0..r {
                        out.extend(std::iter::repeat_n(g.data()[i], c));
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(r, c, out))
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        let mut out = Vec::with_capacity(r * w);
                        for i in 0..r {
                            out.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                        }
                        accumulate(&mut adj, p, Tensor::matrix(r, w, out));
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (r, c) = self.dims(*a);
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        out[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(r, c, out))
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.dims(*a);
                    let mut out = vec![0.0; r * c];
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, x) in out[src * c..(src + 1) * c].iter_mut().zip(g.row_slice(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, *a, Tensor::matrix(r, c, out))
                }
                Op::Reshape(a) => {
                    let (r, c) = self.dims(*a);
                    accumulate(&mut adj, *a, g.reshape_unchecked(vec![r, c]))
                }
            }
        }
        let mut grads = Vec::with_capacity(wrt.len());
        for &v in wrt {
            let g = match v.0 <= output.0 {
                true => adj[v.0].clone(),
                false => None,
            };
            let g = g.unwrap_or_else(|| {
                let (r, c) = self.dims(v);
                Tensor::zeros(r, c)
            });
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::NumericFault {
                    node: v.0,
                    what: "NaN in gradient".into(),
                });
            }
            grads.push(g);
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.mul(x, x);
        let dx = g.grad(y, &[x]).unwrap();
        assert_eq!(dx[0].item(), 6.0);
        assert_eq!(g.item(y), 9.0);
    }

    #[test]
    fn linear_sum_gradient_is_v_per_row() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let v = g.constant(Tensor::column(vec![0.5, -1.0, 2.0]));
        let wv = g.matmul(w, v);
        let s = g.sum(wv);
        let dw = g.grad(s, &[w]).unwrap();
        assert_eq!(dw[0].data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn non_scalar_objective_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        let y = g.exp(x);
        assert!(matches!(g.grad(y, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_reports_node() {
        let mut g = Graph::new();
        let x = g.scalar(-1.0);
        let y = g.log(x);
        let s = g.sum(y);
        match g.grad(s, &[x]) {
            Err(Error::NumericFault { node, .. }) => assert_eq!(node, y.id()),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(3, 2));
        let b = g.leaf(Tensor::row(vec![1.0, 2.0]));
        let c = g.add(a, b);
        let s = g.sum(c);
        let grads = g.grad(s, &[a, b]).unwrap();
        assert_eq!(grads[0].data(), &[1.0; 6]);
        assert_eq!(grads[1].data(), &[3.0, 3.0]);
    }

    #[test]
    fn structural_ops_route_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(Tensor::column(vec![5.0, 6.0]));
        let cat = g.concat_cols(&[a, b]);
        let sl = g.slice_cols(cat, 1, 2);
        let ga = g.gather_rows(sl, &[1, 1, 0]);
        let t = g.transpose(ga);
        let w = g.constant(Tensor::from_rows(&[vec![1.0, 10.0, 100.0], vec![2.0, 20.0, 200.0]]));
        let m = g.mul(t, w);
        let s = g.sum(m);
        let grads = g.grad(s, &[a, b]).unwrap();
        // a[.,1] feeds sl col 0; b feeds sl col 1. Row 1 gathered twice (weights 1+10), row 0 once (100).
        assert_eq!(grads[0].data(), &[0.0, 100.0, 0.0, 11.0]);
        assert_eq!(grads[1].data(), &[200.0, 22.0]);
    }
}
