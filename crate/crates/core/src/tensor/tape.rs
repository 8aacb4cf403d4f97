//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every primitive records its inputs (and whatever it needs for the
//! backward pass) as a node. Nodes are appended in evaluation order, so a
//! reverse sweep over the node list is a valid topological order and each
//! node is visited once.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::{scalar, Array, Scalar};
use crate::hat::lattice;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    LogSigmoid,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine(Var, T),
    Unary(Var, UnaryOp),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, keep: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Im2Col { x: Var, width: usize },
    OuterAdd { a: Var, b: Var },
    HatLoss { blank: Var, labels: Var, d_blank: Vec<T>, d_labels: Vec<T> },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-threaded and short-lived: build one per training example
/// or per decoding call, then drop it.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast(a: &[usize], b: &[usize], blen: usize, alen: usize, op: &str) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if blen == 1 {
        Ok(Bcast::Scalar)
    } else if (b.len() == 1 || (b.len() == 2 && b[0] == 1)) && a.last() == Some(&blen) && alen > 0 {
        Ok(Bcast::Row)
    } else {
        Err(Error::Dimension(format!("{op}: shapes {a:?} and {b:?} do not broadcast")))
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Scalar => 0,
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Input that does not receive gradients.
    pub fn constant(&self, value: Array<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(nodes.len() - 1)
    }

    /// Input that receives gradients (retrieved via [`Gradients::get`]).
    pub fn leaf(&self, value: Array<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(nodes.len() - 1)
    }

    /// Loads a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let value = store.get(id).clone();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Param, requires_grad: true });
        let v = Var(nodes.len() - 1);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> Ref<'_, Array<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[x.0].value)
    }

    pub fn shape(&self, x: Var) -> Vec<usize> {
        self.nodes.borrow()[x.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, x: Var) -> T {
        self.nodes.borrow()[x.0].value.data()[0]
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(Error::Dimension(format!(
                    "matmul: {:?} x {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            matmul_into(av.data(), bv.data(), &mut out, m, k, n);
            Array::new(vec![m, n], out)?
        };
        self.push(out, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Array<T>, Bcast)> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let kind = bcast(av.shape(), bv.shape(), bv.len(), av.len(), name)?;
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[bidx(kind, i, cols)]))
            .collect();
        Ok((Array::new(av.shape().to_vec(), data)?, kind))
    }

    /// Elementwise sum; `b` may be a row vector or a single value.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, k) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b, k), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (out, k) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b, k), self.rg(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, k) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b, k), self.rg(&[a, b]))
    }

    /// `x * scale + shift` for constants `scale`, `shift`.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * scale + shift);
        self.push(out, Op::Affine(x, scale), self.rg(&[x]))
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    pub fn unary(&self, op: UnaryOp, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if op == UnaryOp::Log {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= T::zero()) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
            }
            xv.map(|v| match op {
                UnaryOp::Sigmoid => scalar::sigmoid(v),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Relu => v.max(T::zero()),
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => v.ln(),
                UnaryOp::LogSigmoid => scalar::log_sigmoid(v),
                UnaryOp::Square => v * v,
                UnaryOp::Neg => -v,
            })
        };
        self.push(out, Op::Unary(x, op), self.rg(&[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }
    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }
    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }
    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }
    pub fn log_sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::LogSigmoid, x)
    }
    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }
    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    fn rowwise(&self, x: Var, log: bool) -> Result<Array<T>> {
        let xv = self.value(x);
        let c = xv.cols();
        if c == 0 {
            return Err(Error::Dimension("softmax over empty axis".into()));
        }
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            if log {
                let lse = scalar::log_sum_exp(row);
                out.extend(row.iter().map(|&v| v - lse));
            } else {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let start = out.len();
                out.extend(row.iter().map(|&v| (v - m).exp()));
                let z: T = out[start..].iter().copied().sum();
                out[start..].iter_mut().for_each(|p| *p /= z);
            }
        }
        Array::new(xv.shape().to_vec(), out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = self.rowwise(x, false)?;
        self.push(out, Op::Softmax(x), self.rg(&[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = self.rowwise(x, true)?;
        self.push(out, Op::LogSoftmax(x), self.rg(&[x]))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Array::scalar(s), Op::Sum(x), self.rg(&[x]))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let (s, n) = {
            let v = self.value(x);
            (v.sum(), v.len())
        };
        if n == 0 {
            return Err(Error::Dimension("mean of empty array".into()));
        }
        self.push(Array::scalar(s / T::lit(n as f64)), Op::Mean(x), self.rg(&[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), self.rg(&[x]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[tq, d]`, `k` is `[tk, d]`, `v` is `[tk, dv]`; `mask` is a
    /// row-major `[tq, tk]` table where `true` means "may attend". A query row
    /// with no open key produces a zero output row.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            if qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 {
                return Err(Error::Dimension("attention expects matrices".into()));
            }
            let (tq, d, tk, dv) = (qv.shape()[0], qv.shape()[1], kv.shape()[0], vv.shape()[1]);
            if kv.shape()[1] != d || vv.shape()[0] != tk || heads == 0 || d % heads != 0 || dv % heads != 0 {
                return Err(Error::Dimension(format!(
                    "attention: q {:?} k {:?} v {:?} heads {heads}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                )));
            }
            if let Some(m) = mask {
                if m.len() != tq * tk {
                    return Err(Error::Dimension(format!("mask length {} != {tq}x{tk}", m.len())));
                }
            }
            let (hd, hv) = (d / heads, dv / heads);
            let scale = T::one() / T::lit(hd as f64).sqrt();
            let mut probs = vec![T::zero(); heads * tq * tk];
            let mut out = vec![T::zero(); tq * dv];
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            let mut scores = vec![T::zero(); tk];
            for h in 0..heads {
                for i in 0..tq {
                    let qi = &qd[i * d + h * hd..i * d + (h + 1) * hd];
                    let mut max = T::neg_infinity();
                    for j in 0..tk {
                        let open = mask.is_none_or(|m| m[i * tk + j]);
                        scores[j] = if open {
                            let kj = &kd[j * d + h * hd..j * d + (h + 1) * hd];
                            let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                            max = max.max(s);
                            s
                        } else {
                            T::neg_infinity()
                        };
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    let mut z = T::zero();
                    for j in 0..tk {
                        let e = if scores[j] == T::neg_infinity() { T::zero() } else { (scores[j] - max).exp() };
                        p[j] = e;
                        z += e;
                    }
                    let orow = &mut out[i * dv + h * hv..i * dv + (h + 1) * hv];
                    for j in 0..tk {
                        p[j] /= z;
                        if p[j] == T::zero() {
                            continue;
                        }
                        let vj = &vd[j * dv + h * hv..j * dv + (h + 1) * hv];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
            (Array::new(vec![tq, dv], out)?, probs)
        };
        self.push(out, Op::Attention { q, k, v, heads, probs }, self.rg(&[q, k, v]))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let c = xv.cols();
            if gv.len() != c || bv.len() != c || c == 0 {
                return Err(Error::Dimension("layer_norm: gain/bias length".into()));
            }
            let n = T::lit(c as f64);
            let mut xhat = Vec::with_capacity(xv.len());
            let mut rstd = Vec::with_capacity(xv.rows());
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(c) {
                let mu = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mu) * r;
                    xhat.push(h);
                    out.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
            (Array::new(xv.shape().to_vec(), out)?, xhat, rstd)
        };
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, self.rg(&[x, gain, bias]))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`. Outside training it is
    /// the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::lit(1.0 / (1.0 - rate));
        let (out, keep) = {
            let xv = self.value(x);
            let keep: Vec<T> =
                (0..xv.len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep_scale }).collect();
            let data = xv.data().iter().zip(&keep).map(|(&a, &m)| a * m).collect();
            (Array::new(xv.shape().to_vec(), data)?, keep)
        };
        self.push(out, Op::Dropout { x, keep }, self.rg(&[x]))
    }

    /// Row lookup: `table[ids[i]]` for each id, giving `[ids.len(), cols]`.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let tv = self.value(table);
            let c = tv.cols();
            let mut data = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= tv.rows() {
                    return Err(Error::Dimension(format!("gather index {id} >= {}", tv.rows())));
                }
                data.extend_from_slice(tv.row(id));
            }
            Array::new(vec![ids.len(), c], data)?
        };
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, self.rg(&[table]))
    }

    /// Selects `x[i, cols[i]]` for every row, giving a vector of length `rows`.
    pub fn pick(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if xv.rows() != cols.len() {
                return Err(Error::Dimension(format!("pick: {} rows vs {} indices", xv.rows(), cols.len())));
            }
            let mut data = Vec::with_capacity(cols.len());
            for (r, &c) in cols.iter().enumerate() {
                if c >= xv.cols() {
                    return Err(Error::Dimension(format!("pick index {c} >= {}", xv.cols())));
                }
                data.push(xv.at(r, c));
            }
            Array::vector(data)
        };
        self.push(out, Op::Pick { x, cols: cols.to_vec() }, self.rg(&[x]))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut total = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rows() != rows || v.rank() != 2 {
                    return Err(Error::Dimension("concat_cols: row count mismatch".into()));
                }
                total += v.cols();
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Array::new(vec![rows, total], data)?
        };
        self.push(out, Op::ConcatCols(parts.to_vec()), self.rg(parts))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols() != cols || v.rank() != 2 {
                    return Err(Error::Dimension("concat_rows: column count mismatch".into()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Array::new(vec![rows, cols], data)?
        };
        self.push(out, Op::ConcatRows(parts.to_vec()), self.rg(parts))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if xv.rank() != 2 || start + len > xv.rows() {
                return Err(Error::Dimension(format!("slice_rows {start}+{len} of {:?}", xv.shape())));
            }
            let c = xv.cols();
            Array::new(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec())?
        };
        self.push(out, Op::SliceRows { x, start }, self.rg(&[x]))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if xv.rank() != 2 || start + len > xv.cols() {
                return Err(Error::Dimension(format!("slice_cols {start}+{len} of {:?}", xv.shape())));
            }
            let data = (0..xv.rows()).flat_map(|r| xv.row(r)[start..start + len].iter().copied()).collect();
            Array::new(vec![xv.rows(), len], data)?
        };
        self.push(out, Op::SliceCols { x, start }, self.rg(&[x]))
    }

    /// Centred, zero-padded windows for a "same" 1-D convolution:
    /// `[t, c] -> [t, width * c]` with `width` odd.
    pub fn im2col(&self, x: Var, width: usize) -> Result<Var> {
        if width.is_multiple_of(2) {
            return Err(Error::Parameter("im2col width must be odd".into()));
        }
        let out = {
            let xv = self.value(x);
            let (t, c) = (xv.rows(), xv.cols());
            let half = (width / 2) as isize;
            let mut data = vec![T::zero(); t * width * c];
            for i in 0..t {
                for w in 0..width {
                    let src = i as isize + w as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let dst = &mut data[i * width * c + w * c..i * width * c + (w + 1) * c];
                    dst.copy_from_slice(xv.row(src as usize));
                }
            }
            Array::new(vec![t, width * c], data)?
        };
        self.push(out, Op::Im2Col { x, width }, self.rg(&[x]))
    }

    /// `[ta, j] (+) [tb, j] -> [ta * tb, j]` with row `i * tb + k = a_i + b_k`.
    pub fn outer_add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.cols() != bv.cols() {
                return Err(Error::Dimension("outer_add: width mismatch".into()));
            }
            let (ta, tb, j) = (av.rows(), bv.rows(), av.cols());
            let mut data = Vec::with_capacity(ta * tb * j);
            for i in 0..ta {
                for k in 0..tb {
                    data.extend(av.row(i).iter().zip(bv.row(k)).map(|(&x, &y)| x + y));
                }
            }
            Array::new(vec![ta * tb, j], data)?
        };
        self.push(out, Op::OuterAdd { a, b }, self.rg(&[a, b]))
    }

    /// Transducer negative log-likelihood over a `frames x (targets+1)` lattice.
    ///
    /// `blank_logits` holds one logit per lattice node (row-major over
    /// `(t, u)`), `label_logprobs` a normalised log-distribution over the
    /// non-blank labels per node. `targets` are label-head indices.
    pub fn hat_loss(&self, blank_logits: Var, label_logprobs: Var, frames: usize, targets: &[usize]) -> Result<Var> {
        let (loss, d_blank, d_labels) = {
            let nodes = self.nodes.borrow();
            let (bv, lv) = (&nodes[blank_logits.0].value, &nodes[label_logprobs.0].value);
            let u1 = targets.len() + 1;
            if bv.len() != frames * u1 || lv.rows() != frames * u1 {
                return Err(Error::Dimension(format!(
                    "hat_loss: lattice {}x{} vs blank {} / labels {:?}",
                    frames,
                    u1,
                    bv.len(),
                    lv.shape()
                )));
            }
            let nl = lv.cols();
            if let Some(&bad) = targets.iter().find(|&&y| y >= nl) {
                return Err(Error::Dimension(format!("target {bad} >= {nl} labels")));
            }
            let n = frames * u1;
            let mut log_blank = Vec::with_capacity(n);
            let mut log_emit = Vec::with_capacity(n);
            for node in 0..n {
                let z = bv.data()[node];
                log_blank.push(scalar::log_sigmoid(z));
                let u = node % u1;
                log_emit.push(if u < targets.len() {
                    scalar::log_sigmoid(-z) + lv.at(node, targets[u])
                } else {
                    T::neg_infinity()
                });
            }
            let fb = lattice::forward_backward(&log_blank, &log_emit, frames, targets.len())?;
            let mut d_blank = vec![T::zero(); n];
            let mut d_labels = vec![T::zero(); n * nl];
            for node in 0..n {
                let z = bv.data()[node];
                let s = scalar::sigmoid(z);
                // d logsig(z)/dz = 1 - s ; d logsig(-z)/dz = -s
                d_blank[node] = fb.d_log_blank[node] * (T::one() - s) - fb.d_log_emit[node] * s;
                let u = node % u1;
                if u < targets.len() {
                    d_labels[node * nl + targets[u]] = fb.d_log_emit[node];
                }
            }
            (fb.neg_log_prob, d_blank, d_labels)
        };
        let rg = self.rg(&[blank_logits, label_logprobs]);
        self.push(
            Array::scalar(loss),
            Op::HatLoss { blank: blank_logits, labels: label_logprobs, d_blank, d_labels },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        if !nodes[loss.0].value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                backprop(&nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self.params.borrow().iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Affine(..) => "affine",
        Op::Unary(..) => "unary",
        Op::Softmax(_) => "softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Reshape(_) => "reshape",
        Op::Attention { .. } => "attention",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::Gather { .. } => "gather",
        Op::Pick { .. } => "pick",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Im2Col { .. } => "im2col",
        Op::OuterAdd { .. } => "outer_add",
        Op::HatLoss { .. } => "hat_loss",
    }
}

fn acc<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                // ga[i,p] += sum_j g[i,j] * b[p,j]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                // gb[p,j] += sum_i a[i,p] * g[i,j]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av_ip = av.data()[i * k + p];
                        if av_ip == T::zero() {
                            continue;
                        }
                        for (dst, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *dst += av_ip * x;
                        }
                    }
                }
            }
        }
        Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            let cols = nodes[a.0].value.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, &x) in g.iter().enumerate() {
                    gb[bidx(*kind, i, cols)] += sign * x;
                }
            }
        }
        Op::Mul(a, b, kind) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let cols = av.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, &x) in g.iter().enumerate() {
                    ga[i] += x * bv.data()[bidx(*kind, i, cols)];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, &x) in g.iter().enumerate() {
                    gb[bidx(*kind, i, cols)] += x * av.data()[i];
                }
            }
        }
        Op::Affine(x, s) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
        }
        Op::Unary(x, op) => {
            let xin = nodes[x.0].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    let d = match op {
                        UnaryOp::Sigmoid => out[i] * (T::one() - out[i]),
                        UnaryOp::Tanh => T::one() - out[i] * out[i],
                        UnaryOp::Relu => {
                            if xin[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Exp => out[i],
                        UnaryOp::Log => T::one() / xin[i],
                        UnaryOp::LogSigmoid => T::one() - scalar::sigmoid(xin[i]),
                        UnaryOp::Square => T::lit(2.0) * xin[i],
                        UnaryOp::Neg => -T::one(),
                    };
                    gx[i] += g[i] * d;
                }
            }
        }
        Op::Softmax(x) => {
            let c = node.value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, (grow, yrow)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let c = node.value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, (grow, yrow)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    let gs: T = grow.iter().copied().sum();
                    for j in 0..c {
                        gx[r * c + j] += grow[j] - yrow[j].exp() * gs;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let s = g[0] / T::lit(gx.len() as f64);
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (tq, d, tk, dv) = (qv.shape()[0], qv.shape()[1], kv.shape()[0], vv.shape()[1]);
            let (hd, hv) = (d / heads, dv / heads);
            let scale = T::one() / T::lit(hd as f64).sqrt();
            let mut dq = vec![T::zero(); tq * d];
            let mut dk = vec![T::zero(); tk * d];
            let mut dvv = vec![T::zero(); tk * dv];
            let mut dp = vec![T::zero(); tk];
            for h in 0..*heads {
                for i in 0..tq {
                    let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    let go = &g[i * dv + h * hv..i * dv + (h + 1) * hv];
                    let mut dot = T::zero();
                    for j in 0..tk {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vv.data()[j * dv + h * hv..j * dv + (h + 1) * hv];
                        dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        dot += p[j] * dp[j];
                        for (dst, &x) in dvv[j * dv + h * hv..j * dv + (h + 1) * hv].iter_mut().zip(go) {
                            *dst += p[j] * x;
                        }
                    }
                    for j in 0..tk {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        for c in 0..hd {
                            dq[i * d + h * hd + c] += ds * kv.data()[j * d + h * hd + c];
                            dk[j * d + h * hd + c] += ds * qv.data()[i * d + h * hd + c];
                        }
                    }
                }
            }
            for (var, src) in [(*q, dq), (*k, dk), (*v, dvv)] {
                if let Some(gx) = acc(nodes, grads, var) {
                    gx.iter_mut().zip(&src).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let c = node.value.cols();
            let gv = nodes[gain.0].value.data();
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (i, &x) in g.iter().enumerate() {
                    gg[i % c] += x * xhat[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for (i, &x) in g.iter().enumerate() {
                    gb[i % c] += x;
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let n = T::lit(c as f64);
                for (r, grow) in g.chunks(c).enumerate() {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let dxh: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let m1 = dxh.iter().copied().sum::<T>() / n;
                    let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for j in 0..c {
                        gx[r * c + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
            }
        }
        Op::Dropout { x, keep } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * keep[i];
                }
            }
        }
        Op::Gather { table, ids } => {
            let c = node.value.cols();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::Pick { x, cols } => {
            let c = nodes[x.0].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &j) in cols.iter().enumerate() {
                    gx[r * c + j] += g[r];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for p in parts {
                let pc = nodes[p.0].value.cols();
                if let Some(gp) = acc(nodes, grads, *p) {
                    for r in 0..node.value.rows() {
                        for j in 0..pc {
                            gp[r * pc + j] += g[r * total + off + j];
                        }
                    }
                }
                off += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(gp) = acc(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[off..off + n]).for_each(|(d, &s)| *d += s);
                }
                off += n;
            }
        }
        Op::SliceRows { x, start } => {
            let c = node.value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                gx[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::SliceCols { x, start } => {
            let (len, xc) = (node.value.cols(), nodes[x.0].value.cols());
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..node.value.rows() {
                    for j in 0..len {
                        gx[r * xc + start + j] += g[r * len + j];
                    }
                }
            }
        }
        Op::Im2Col { x, width } => {
            let xv = &nodes[x.0].value;
            let (t, c) = (xv.rows(), xv.cols());
            let half = (*width / 2) as isize;
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..t {
                    for w in 0..*width {
                        let src = i as isize + w as isize - half;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let s = src as usize;
                        for ch in 0..c {
                            gx[s * c + ch] += g[i * width * c + w * c + ch];
                        }
                    }
                }
            }
        }
        Op::OuterAdd { a, b } => {
            let (ta, tb, j) = (nodes[a.0].value.rows(), nodes[b.0].value.rows(), node.value.cols());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ta {
                    for k in 0..tb {
                        for c in 0..j {
                            ga[i * j + c] += g[(i * tb + k) * j + c];
                        }
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..ta {
                    for k in 0..tb {
                        for c in 0..j {
                            gb[k * j + c] += g[(i * tb + k) * j + c];
                        }
                    }
                }
            }
        }
        Op::HatLoss { blank, labels, d_blank, d_labels } => {
            if let Some(gb) = acc(nodes, grads, *blank) {
                gb.iter_mut().zip(d_blank).for_each(|(d, &s)| *d += g[0] * s);
            }
            if let Some(gl) = acc(nodes, grads, *labels) {
                gl.iter_mut().zip(d_labels).for_each(|(d, &s)| *d += g[0] * s);
            }
        }
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if no path reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects gradients of every parameter loaded on the tape.
    pub fn param_grads(&self, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::zeros_like(store);
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                out.accumulate(id, g);
            }
        }
        out
    }
}
