//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns one gradient per
//! node. Parameters enter the tape through [`Graph::param`], which is keyed by
//! name so a parameter used in several places is a single leaf.
//!
//! Forward values are checked for NaN/Inf as they are produced. The first
//! offending op poisons the graph and [`Graph::backward`] (or
//! [`Graph::check`]) reports it.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::sparse::SparseMap;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Sqrt,
    Square,
    Abs,
    Tanh,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Silu => "silu",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Abs => "abs",
            Unary::Tanh => "tanh",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Backward rule for an operator defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input (in the order given to [`Graph::custom`]).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Linear(Var, Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Gather(Var, Rc<SparseMap>),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast(Var, usize),
    Reshape(Var),
    Softmax(Var),
    Clamp(Var, f64, f64),
    NormalizeLast(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, Var>>,
    poisoned: Cell<Option<&'static str>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Returns an error if any recorded value was non-finite.
    pub fn check(&self) -> Result<()> {
        match self.poisoned.get() {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Parameters referenced so far, by name.
    pub fn params(&self) -> BTreeMap<String, Var> {
        self.params.borrow().clone()
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.poisoned.get().is_none() && !value.all_finite() {
            self.poisoned.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    fn push_shared(&self, value: Rc<Tensor>, op: Op, name: &'static str) -> Var {
        if self.poisoned.get().is_none() && !value.all_finite() {
            self.poisoned.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn with2<T>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<T>(&self, a: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    /// Constant leaf; receives no parameter gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, "constant")
    }

    pub fn constant_scalar(&self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf bound to a named parameter of `store`. Repeated calls return the same leaf.
    ///
    /// Panics if the parameter does not exist; parameter layouts are fixed at model construction.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var {
        if let Some(v) = self.params.borrow().get(name) {
            return *v;
        }
        let value = store
            .value_rc(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"));
        let v = self.push_shared(value, Op::Leaf, "param");
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        self.with2(a, b, |x, y| {
            assert_eq!(x.shape(), y.shape(), "{op}: operand shapes differ");
        });
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let t = self.with2(a, b, |x, y| {
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect(),
            )
        });
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let t = self.with2(a, b, |x, y| {
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect(),
            )
        });
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let t = self.with2(a, b, |x, y| {
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
            )
        });
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.with1(a, |x| x.map(|v| scale * v + shift));
        self.push(t, Op::Affine(a, scale), "affine")
    }

    pub fn scale(&self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Adds a `[C]` bias to every row of a `[.., C]` tensor.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let t = self.with2(a, bias, |x, b| {
            let c = x.last_dim();
            assert_eq!(b.len(), c, "add_bias: bias length must equal channel count");
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(c) {
                for (o, bb) in row.iter_mut().zip(b.data()) {
                    *o += bb;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        });
        self.push(t, Op::AddBias(a, bias), "add_bias")
    }

    /// Multiplies each row of `a: [.., C]` by the matching entry of `col: [.., 1]`.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let t = self.with2(a, col, |x, s| {
            let c = x.last_dim();
            assert_eq!(
                s.len(),
                x.rows(),
                "mul_col: column length must equal row count"
            );
            let mut out = x.data().to_vec();
            for (row, k) in out.chunks_exact_mut(c).zip(s.data()) {
                row.iter_mut().for_each(|v| *v *= k);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        });
        self.push(t, Op::MulCol(a, col), "mul_col")
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Var {
        let t = self.with1(a, |x| x.map(|v| kind.eval(v)));
        self.push(t, Op::Unary(a, kind), kind.name())
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sum(&self, a: Var) -> Var {
        let t = self.with1(a, |x| Tensor::scalar(x.sum()));
        self.push(t, Op::Sum(a), "sum")
    }

    pub fn mean(&self, a: Var) -> Var {
        let t = self.with1(a, |x| Tensor::scalar(x.mean()));
        self.push(t, Op::Mean(a), "mean")
    }

    /// Sums the last axis: `[.., C] -> [.., 1]`.
    pub fn sum_last(&self, a: Var) -> Var {
        let t = self.with1(a, |x| {
            let c = x.last_dim();
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Tensor::from_parts(
                shape,
                x.data().chunks_exact(c).map(|r| r.iter().sum()).collect(),
            )
        });
        self.push(t, Op::SumLast(a), "sum_last")
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let t = self.with2(a, b, |x, y| {
            let (&[n, k], &[k2, m]) = (x.shape(), y.shape()) else {
                panic!(
                    "matmul expects rank-2 operands, got {:?} x {:?}",
                    x.shape(),
                    y.shape()
                );
            };
            assert_eq!(k, k2, "matmul: inner dimensions differ");
            Tensor::from_parts(vec![n, m], matmul_raw(x.data(), y.data(), n, k, m))
        });
        self.push(t, Op::MatMul(a, b), "matmul")
    }

    /// `[B, N, K] x [B, K, M] -> [B, N, M]`.
    pub fn batch_matmul(&self, a: Var, b: Var) -> Var {
        let t = self.with2(a, b, |x, y| {
            let (&[bs, n, k], &[bs2, k2, m]) = (x.shape(), y.shape()) else {
                panic!(
                    "batch_matmul expects rank-3 operands, got {:?} x {:?}",
                    x.shape(),
                    y.shape()
                );
            };
            assert!(bs == bs2 && k == k2, "batch_matmul: incompatible shapes");
            let mut out = Vec::with_capacity(bs * n * m);
            for i in 0..bs {
                out.extend(matmul_raw(
                    &x.data()[i * n * k..(i + 1) * n * k],
                    &y.data()[i * k * m..(i + 1) * k * m],
                    n,
                    k,
                    m,
                ));
            }
            Tensor::from_parts(vec![bs, n, m], out)
        });
        self.push(t, Op::BatchMatMul(a, b), "batch_matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self, a: Var) -> Var {
        let t = self.with1(a, transpose_last_raw);
        self.push(t, Op::TransposeLast(a), "transpose")
    }

    /// Fully connected layer over the last axis: `[.., K] x [K, M] + [M] -> [.., M]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let &[k, m] = wv.shape() else {
                panic!("linear: weight must be [K, M]")
            };
            assert_eq!(
                xv.last_dim(),
                k,
                "linear: input width {} != {}",
                xv.last_dim(),
                k
            );
            assert_eq!(bv.len(), m, "linear: bias length");
            let n = xv.rows();
            let mut out = matmul_raw(xv.data(), wv.data(), n, k, m);
            for row in out.chunks_exact_mut(m) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = m;
            Tensor::from_parts(shape, out)
        };
        self.push(t, Op::Linear(x, w, b), "linear")
    }

    /// 2-D convolution of an `[H, W, Cin]` map with `[k, k, Cin, Cout]` weights,
    /// zero padding `pad` and the given stride.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let geom = ConvGeom::new(xv, wv, stride, pad);
            assert_eq!(bv.len(), geom.cout, "conv2d: bias length");
            let out = conv_forward(xv.data(), wv.data(), bv.data(), &geom);
            Tensor::from_parts(vec![geom.ho, geom.wo, geom.cout], out)
        };
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    /// Applies a fixed sparse map to the rows of `a`; `shape` gives the output's leading dims.
    pub fn gather(&self, a: Var, map: Rc<SparseMap>, leading: &[usize]) -> Var {
        let t = self.with1(a, |x| {
            let c = x.last_dim();
            assert_eq!(
                map.rows_in(),
                x.rows(),
                "gather: map expects {} input rows, got {}",
                map.rows_in(),
                x.rows()
            );
            assert_eq!(
                leading.iter().product::<usize>(),
                map.rows_out(),
                "gather: output shape"
            );
            let mut shape = leading.to_vec();
            shape.push(c);
            Tensor::from_parts(shape, map.apply(x.data(), c))
        });
        self.push(t, Op::Gather(a, map), "gather")
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&self, parts: &[Var]) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|v| &*nodes[v.0].value).collect();
            let rows = vals[0].rows();
            assert!(
                vals.iter().all(|t| t.rows() == rows),
                "concat_last: row counts differ"
            );
            let total: usize = vals.iter().map(|t| t.last_dim()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in &vals {
                    let c = t.last_dim();
                    out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = vals[0].shape().to_vec();
            *shape.last_mut().unwrap() = total;
            Tensor::from_parts(shape, out)
        };
        self.push(t, Op::ConcatLast(parts.to_vec()), "concat_last")
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|v| &*nodes[v.0].value).collect();
            let tail = vals[0].shape()[1..].to_vec();
            assert!(
                vals.iter().all(|t| t.shape()[1..] == tail[..]),
                "concat_rows: trailing shapes differ"
            );
            let n: usize = vals.iter().map(|t| t.shape()[0]).sum();
            let mut out = Vec::with_capacity(vals.iter().map(|t| t.len()).sum());
            for t in &vals {
                out.extend_from_slice(t.data());
            }
            let mut shape = vec![n];
            shape.extend(tail);
            Tensor::from_parts(shape, out)
        };
        self.push(t, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&self, a: Var, start: usize, len: usize) -> Var {
        let t = self.with1(a, |x| {
            let c = x.last_dim();
            assert!(start + len <= c, "slice_last out of range");
            let out = x
                .data()
                .chunks_exact(c)
                .flat_map(|r| r[start..start + len].iter().copied())
                .collect();
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, out)
        });
        self.push(t, Op::SliceLast(a, start), "slice_last")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let t = self.with1(a, |x| {
            x.clone().reshape(shape).expect("reshape: element count")
        });
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Softmax over the last axis. Entries where `mask` is false get weight 0.
    /// A row with every entry masked poisons the graph.
    pub fn softmax_masked(&self, a: Var, mask: Option<&[bool]>) -> Var {
        let mut empty_row = false;
        let t = self.with1(a, |x| {
            let c = x.last_dim();
            let mut out = vec![0.0; x.len()];
            for (r, (src, dst)) in x
                .data()
                .chunks_exact(c)
                .zip(out.chunks_exact_mut(c))
                .enumerate()
            {
                let valid = |i: usize| mask.is_none_or(|m| m[r * c + i]);
                let max = (0..c)
                    .filter(|&i| valid(i))
                    .map(|i| src[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    empty_row = true;
                    continue;
                }
                let mut z = 0.0;
                for i in (0..c).filter(|&i| valid(i)) {
                    dst[i] = (src[i] - max).exp();
                    z += dst[i];
                }
                dst.iter_mut().for_each(|v| *v /= z);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        });
        if empty_row && self.poisoned.get().is_none() {
            self.poisoned.set(Some("softmax (fully masked row)"));
        }
        self.push(t, Op::Softmax(a), "softmax")
    }

    pub fn softmax(&self, a: Var) -> Var {
        self.softmax_masked(a, None)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.with1(a, |x| x.map(|v| v.clamp(lo, hi)));
        self.push(t, Op::Clamp(a, lo, hi), "clamp")
    }

    /// Divides each row of the last axis by its Euclidean norm.
    pub fn normalize_last(&self, a: Var) -> Var {
        let t = self.with1(a, |x| {
            let c = x.last_dim();
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(c) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        });
        self.push(t, Op::NormalizeLast(a), "normalize")
    }

    /// Records an externally defined op whose forward value has already been computed.
    pub fn custom(&self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let name = op.name();
        self.push(output, Op::Custom(inputs.to_vec(), op), name)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(
            nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        ));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            let node = &nodes[i];
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(*a, zip_map(&g, y, |p, q| p * q));
                    acc(*b, zip_map(&g, x, |p, q| p * q));
                }
                Op::Affine(a, s) => acc(*a, g.map(|v| v * s)),
                Op::AddBias(a, b) => {
                    let c = g.last_dim();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                    acc(*a, g.clone());
                }
                Op::MulCol(a, col) => {
                    let (x, s) = (val(*a), val(*col));
                    let c = x.last_dim();
                    let mut ga = g.data().to_vec();
                    let mut gs = vec![0.0; s.len()];
                    for (r, row) in ga.chunks_exact_mut(c).enumerate() {
                        let xr = &x.data()[r * c..(r + 1) * c];
                        gs[r] = row.iter().zip(xr).map(|(p, q)| p * q).sum();
                        row.iter_mut().for_each(|v| *v *= s.data()[r]);
                    }
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), ga));
                    acc(*col, Tensor::from_parts(s.shape().to_vec(), gs));
                }
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let d = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(g.data())
                        .map(|((&xv, &yv), &gv)| {
                            if gv == 0.0 {
                                0.0
                            } else {
                                gv * kind.derivative(xv, yv)
                            }
                        })
                        .collect();
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let n = val(*a).len().max(1) as f64;
                    acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
                }
                Op::SumLast(a) => {
                    let x = val(*a);
                    let c = x.last_dim();
                    let d = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v, c))
                        .collect();
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    acc(
                        *a,
                        Tensor::from_parts(vec![n, k], matmul_nt(g.data(), y.data(), n, m, k)),
                    );
                    acc(
                        *b,
                        Tensor::from_parts(vec![k, m], matmul_tn(x.data(), g.data(), n, k, m)),
                    );
                }
                Op::BatchMatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (bs, n, k, m) = (x.shape()[0], x.shape()[1], x.shape()[2], y.shape()[2]);
                    let mut ga = Vec::with_capacity(x.len());
                    let mut gb = Vec::with_capacity(y.len());
                    for i in 0..bs {
                        let gi = &g.data()[i * n * m..(i + 1) * n * m];
                        let xi = &x.data()[i * n * k..(i + 1) * n * k];
                        let yi = &y.data()[i * k * m..(i + 1) * k * m];
                        ga.extend(matmul_nt(gi, yi, n, m, k));
                        gb.extend(matmul_tn(xi, gi, n, k, m));
                    }
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), ga));
                    acc(*b, Tensor::from_parts(y.shape().to_vec(), gb));
                }
                Op::TransposeLast(a) => acc(*a, transpose_last_raw(&g)),
                Op::Linear(x, w, b) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (k, m) = (wv.shape()[0], wv.shape()[1]);
                    let n = xv.rows();
                    acc(
                        *x,
                        Tensor::from_parts(
                            xv.shape().to_vec(),
                            matmul_nt(g.data(), wv.data(), n, m, k),
                        ),
                    );
                    acc(
                        *w,
                        Tensor::from_parts(vec![k, m], matmul_tn(xv.data(), g.data(), n, k, m)),
                    );
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks_exact(m) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let geom = ConvGeom::new(xv, wv, *stride, *pad);
                    let (gx, gw, gb) = conv_backward(xv.data(), wv.data(), g.data(), &geom);
                    acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                    acc(*w, Tensor::from_parts(wv.shape().to_vec(), gw));
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
                Op::Gather(a, map) => {
                    let x = val(*a);
                    acc(
                        *a,
                        Tensor::from_parts(
                            x.shape().to_vec(),
                            map.apply_transpose(g.data(), x.last_dim()),
                        ),
                    );
                }
                Op::ConcatLast(parts) => {
                    let total = g.last_dim();
                    let rows = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let t = val(*p);
                        let c = t.last_dim();
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        offset += c;
                        acc(*p, Tensor::from_parts(t.shape().to_vec(), d));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let t = val(*p);
                        acc(
                            *p,
                            Tensor::from_parts(
                                t.shape().to_vec(),
                                g.data()[offset..offset + t.len()].to_vec(),
                            ),
                        );
                        offset += t.len();
                    }
                }
                Op::SliceLast(a, start) => {
                    let x = val(*a);
                    let c = x.last_dim();
                    let len = g.last_dim();
                    let mut d = vec![0.0; x.len()];
                    for (dst, src) in d.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                        dst[*start..*start + len].copy_from_slice(src);
                    }
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
                }
                Op::Reshape(a) => acc(
                    *a,
                    Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec()),
                ),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut d = vec![0.0; y.len()];
                    for ((dst, yr), gr) in d
                        .chunks_exact_mut(c)
                        .zip(y.data().chunks_exact(c))
                        .zip(g.data().chunks_exact(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for i in 0..c {
                            dst[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    acc(*a, Tensor::from_parts(y.shape().to_vec(), d));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a);
                    acc(
                        *a,
                        zip_map(
                            &g,
                            x,
                            |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 },
                        ),
                    );
                }
                Op::NormalizeLast(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let c = x.last_dim();
                    let mut d = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let span = r * c..(r + 1) * c;
                        let xr = &x.data()[span.clone()];
                        let yr = &y.data()[span.clone()];
                        let gr = &g.data()[span.clone()];
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (i, o) in d[span].iter_mut().enumerate() {
                            *o = (gr[i] - yr[i] * dot) / n;
                        }
                    }
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    for (v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            acc(*v, gi);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| f(p, q))
            .collect(),
    )
}

/// `[n, k] x [k, m]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in dst.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g [n, m] x bᵀ` where `b` is `[k, m]`; result `[n, k]`.
fn matmul_nt(g: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = gr
                .iter()
                .zip(&b[p * m..(p + 1) * m])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `aᵀ [k, n] x g [n, m]`; result `[k, m]`.
fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * m..(p + 1) * m].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}

fn transpose_last_raw(x: &Tensor) -> Tensor {
    let s = x.shape();
    let r = s.len();
    assert!(r >= 2, "transpose needs rank >= 2");
    let (n, m) = (s[r - 2], s[r - 1]);
    let batch = x.len() / (n * m).max(1);
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x.data()[b * n * m..(b + 1) * n * m];
        let dst = &mut out[b * n * m..(b + 1) * n * m];
        for i in 0..n {
            for j in 0..m {
                dst[j * n + i] = src[i * m + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Self {
        let &[h, wd, cin] = x.shape() else {
            panic!("conv2d: input must be [H, W, C], got {:?}", x.shape())
        };
        let &[k, k2, cin2, cout] = w.shape() else {
            panic!("conv2d: weight must be [k, k, Cin, Cout]")
        };
        assert!(
            k == k2 && cin == cin2,
            "conv2d: weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        );
        assert!(
            stride >= 1 && h + 2 * pad >= k && wd + 2 * pad >= k,
            "conv2d: input too small"
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Self {
            h,
            w: wd,
            cin,
            k,
            cout,
            ho,
            wo,
            stride,
            pad,
        }
    }

    /// Input pixel read by output `(oy, ox)` at tap `(ky, kx)`, if inside the image.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.ho * g.wo * g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let dst = &mut out[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            dst.copy_from_slice(b);
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let Some(p) = g.src(oy, ox, ky, kx) else {
                        continue;
                    };
                    let xs = &x[p * g.cin..(p + 1) * g.cin];
                    let wbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        let wr = &w[wbase + ci * g.cout..wbase + (ci + 1) * g.cout];
                        for (o, wv) in dst.iter_mut().zip(wr) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let go = &gout[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            for (o, v) in gb.iter_mut().zip(go) {
                *o += v;
            }
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let Some(p) = g.src(oy, ox, ky, kx) else {
                        continue;
                    };
                    let wbase = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let xv = x[p * g.cin + ci];
                        let wr = &w[wbase + ci * g.cout..wbase + (ci + 1) * g.cout];
                        let gwr = &mut gw[wbase + ci * g.cout..wbase + (ci + 1) * g.cout];
                        let mut sx = 0.0;
                        for ((gwv, wv), gv) in gwr.iter_mut().zip(wr).zip(go) {
                            *gwv += xv * gv;
                            sx += wv * gv;
                        }
                        gx[p * g.cin + ci] += sx;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
