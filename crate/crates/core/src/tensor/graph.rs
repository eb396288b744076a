use std::collections::HashMap;

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row `i` of a masked softmax may attend to columns `0..=i + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CausalMask {
    pub offset: usize,
}

impl CausalMask {
    fn allows(self, row: usize, col: usize) -> bool {
        col <= row + self.offset
    }
}

const LN_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        scored: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// Tape of differentiable operations for one forward pass.
///
/// Values are computed eagerly as operations are recorded. [`Graph::backward`]
/// replays the tape in reverse, deposits gradients into the trainable
/// tensors of a [`ParamStore`] and clears the tape.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_cache: HashMap<ParamId, Var>,
    spent: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Scalar>(x: f64) -> T {
    T::of(x)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(shape_err(op, shape, &[])),
    }
}

/// `a[m×k] · b[k×n]`
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
fn mm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_C) * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_C) * (x + c::<T>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = c::<T>(GELU_C) * (T::one() + c::<T>(3.0 * GELU_A) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
}

/// Softmax over slices of length `len` with element stride `inner`.
fn softmax_strided<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / sum;
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.spent = false;
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph node has a valid shape")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.node(v).data[0]
    }

    /// Records a constant input. It never receives a gradient.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Input, false))
    }

    /// Records a parameter leaf. Repeated calls with the same id return the
    /// same handle so gradients from every use land on one leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(&id) {
            return Ok(v);
        }
        let t = store.tensor(id);
        if t.is_meta() {
            return Err(Error::MetaTensor(store.name(id).to_string()));
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(id),
            t.trainable,
        );
        self.param_cache.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = mm(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul_t")?;
        let (n, k2) = dims2(self.shape(b), "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let data = mm_nt(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], data, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "transpose")?;
        let data = transpose(self.value(a), m, n);
        let ng = self.needs(&[a]);
        Ok(self.push(vec![n, m], data, Op::Transpose(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), ng))
    }

    fn row_len(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let n = *self.shape(a).last().unwrap_or(&1);
        if self.shape(row) != [n] {
            return Err(shape_err(op, self.shape(a), self.shape(row)));
        }
        Ok(n)
    }

    /// Adds a length-`n` vector to every row of `a[..×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_len("add_row", a, row)?;
        let r = self.value(row);
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let ng = self.needs(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddRow(a, row), ng))
    }

    /// Scales every row of `a[..×n]` element-wise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_len("mul_row", a, row)?;
        let r = self.value(row);
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % n])
            .collect();
        let ng = self.needs(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = c::<T>(s);
        let data = self.value(a).iter().map(|&x| x * k).collect();
        let ng = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, s), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x.tanh()).collect();
        let ng = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Tanh(a), ng)
    }

    /// Normalizes each row of `x[..×d]` to zero mean and unit variance, then
    /// applies `gain` and `bias`. Uses eps = 1e-6.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.row_len("layer_norm", x, gain)?;
        self.row_len("layer_norm", x, bias)?;
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut out = vec![T::zero(); xs.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let xhat = c::<T>((row[j].as_f64() - mean) * rs);
                out[r * d + j] = xhat * g[j] + b[j];
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            },
            ng,
        ))
    }

    fn check_finite(&self, a: Var, op: &'static str) -> Result<()> {
        if self.value(a).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                size: shape.len(),
            });
        }
        self.check_finite(a, "softmax")?;
        let len = shape.get(axis).copied().unwrap_or(1);
        let outer = numel(&shape[..axis]);
        let inner = numel(shape.get(axis + 1..).unwrap_or(&[]));
        let data = softmax_strided(self.value(a), outer, len, inner);
        let ng = self.needs(&[a]);
        Ok(self.push(shape, data, Op::Softmax { x: a, axis }, ng))
    }

    /// Row-wise softmax of `a[m×n]` where row `i` only sees columns allowed
    /// by `mask`. Masked entries are exactly zero.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<CausalMask>) -> Result<Var> {
        let Some(mask) = mask else {
            let axis = self.shape(a).len().saturating_sub(1);
            return self.softmax(a, axis);
        };
        let (m, n) = dims2(self.shape(a), "softmax_masked")?;
        self.check_finite(a, "softmax")?;
        let x = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let allowed = (mask.offset + i + 1).min(n);
            let row = &x[i * n..i * n + allowed];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..allowed {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum = sum + e;
            }
            for j in 0..allowed {
                out[i * n + j] = out[i * n + j] / sum;
            }
            debug_assert!((allowed..n).all(|j| !mask.allows(i, j)));
        }
        let ng = self.needs(&[a]);
        Ok(self.push(vec![m, n], out, Op::MaskedSoftmax(a), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "column slice",
                index: start + len,
                size: n,
            });
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(vec![m, len], data, Op::SliceCols { x: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Input("concat of nothing".into()))?;
        let (m, _) = dims2(self.shape(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p), "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(vec![m, n], data, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Input("concat of nothing".into()))?;
        let (_, n) = dims2(self.shape(first), "concat_rows")?;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p), "concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            m += pm;
            data.extend_from_slice(self.value(p));
        }
        let ng = self.needs(parts);
        Ok(self.push(vec![m, n], data, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table), "embedding")?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ng = self.needs(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `logits[L×V]`,
    /// averaged over positions where `scored` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scored: &[bool]) -> Result<Var> {
        let (l, v) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != l || scored.len() != l {
            return Err(shape_err("cross_entropy", &[l, v], &[targets.len(), scored.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: v,
            });
        }
        let count = scored.iter().filter(|&&s| s).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        self.check_finite(logits, "cross_entropy")?;
        let x = self.value(logits);
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        for i in 0..l {
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().map(|r| r.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|r| (r.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j].as_f64() - lse).exp();
            }
            if scored[i] {
                total += lse - row[targets[i]].as_f64();
            }
        }
        let loss = total / count as f64;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![c(loss)],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scored: scored.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().fold(T::zero(), |acc, x| acc + x);
        let ng = self.needs(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), ng)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, scalars: &[Var]) -> Result<Var> {
        let (&first, rest) = scalars
            .split_first()
            .ok_or(Error::Input("mean of nothing".into()))?;
        let mut acc = first;
        for &s in rest {
            acc = self.add(acc, s)?;
        }
        Ok(self.scale(acc, 1.0 / scalars.len() as f64))
    }

    /// Back-propagates from scalar `loss` and accumulates gradients into the
    /// trainable tensors of `store`. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.spent {
            return Err(Error::StaleTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::StaleTape);
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, contrib: Vec<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(buf) => buf.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |v: Var| -> &[T] { &self.nodes[v.0].data };
            let shp = |v: Var| -> &[usize] { &self.nodes[v.0].shape };

            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.tensor_mut(*id).accumulate_grad(&g),
                Op::MatMul(a, b) => {
                    let (m, k) = (shp(*a)[0], shp(*a)[1]);
                    let nn = shp(*b)[1];
                    acc(*a, mm_nt(&g, val(*b), m, nn, k));
                    acc(*b, mm_tn(val(*a), &g, m, k, nn));
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = (shp(*a)[0], shp(*a)[1]);
                    let nn = shp(*b)[0];
                    acc(*a, mm(&g, val(*b), m, nn, k));
                    acc(*b, mm_tn(&g, val(*a), m, nn, k));
                }
                Op::Transpose(a) => {
                    let (m, nn) = (shp(*a)[0], shp(*a)[1]);
                    acc(*a, transpose(&g, nn, m));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    let gb = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddRow(a, r) => {
                    let w = shp(*r)[0];
                    let mut gr = vec![T::zero(); w];
                    for (i, &x) in g.iter().enumerate() {
                        gr[i % w] = gr[i % w] + x;
                    }
                    acc(*r, gr);
                    acc(*a, g);
                }
                Op::MulRow(a, r) => {
                    let w = shp(*r)[0];
                    let (av, rv) = (val(*a), val(*r));
                    let mut gr = vec![T::zero(); w];
                    for (i, &x) in g.iter().enumerate() {
                        gr[i % w] = gr[i % w] + x * av[i];
                    }
                    let ga = g.iter().enumerate().map(|(i, &x)| x * rv[i % w]).collect();
                    acc(*r, gr);
                    acc(*a, ga);
                }
                Op::Scale(a, s) => {
                    let k = c::<T>(*s);
                    acc(*a, g.iter().map(|&x| x * k).collect());
                }
                Op::Gelu(a) => {
                    let ga = g.iter().zip(val(*a)).map(|(&x, &y)| x * gelu_grad(y)).collect();
                    acc(*a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .iter()
                        .zip(&node.data)
                        .map(|(&x, &t)| x * (T::one() - t * t))
                        .collect();
                    acc(*a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    rstd,
                } => {
                    let d = shp(*gain)[0];
                    let (xs, gs) = (val(*x), val(*gain));
                    let rows = xs.len() / d;
                    let mut dgain = vec![T::zero(); d];
                    let mut dbias = vec![T::zero(); d];
                    let mut dx = vec![T::zero(); xs.len()];
                    for r in 0..rows {
                        let row = &xs[r * d..(r + 1) * d];
                        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                        let rs = rstd[r];
                        let xhat: Vec<f64> = row.iter().map(|v| (v.as_f64() - mean) * rs).collect();
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgain[j] = dgain[j] + gr[j] * c::<T>(xhat[j]);
                            dbias[j] = dbias[j] + gr[j];
                            dxhat[j] = (gr[j] * gs[j]).as_f64();
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = c(rs * (dxhat[j] - m1 - xhat[j] * m2));
                        }
                    }
                    acc(*gain, dgain);
                    acc(*bias, dbias);
                    acc(*x, dx);
                }
                Op::Softmax { x, axis } => {
                    let shape = &node.shape;
                    let len = shape.get(*axis).copied().unwrap_or(1);
                    let outer = numel(&shape[..*axis]);
                    let inner = numel(shape.get(axis + 1..).unwrap_or(&[]));
                    let y = &node.data;
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| o * len * inner + j * inner + ii;
                            let dot = (0..len).fold(T::zero(), |s, j| s + g[idx(j)] * y[idx(j)]);
                            for j in 0..len {
                                dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::MaskedSoftmax(x) => {
                    let nn = node.shape[1];
                    let y = &node.data;
                    let mut dx = vec![T::zero(); y.len()];
                    for (r, (yr, gr)) in y.chunks(nn).zip(g.chunks(nn)).enumerate() {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for j in 0..nn {
                            dx[r * nn + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, dx);
                }
                Op::SliceCols { x, start } => {
                    let (m, nn) = (shp(*x)[0], shp(*x)[1]);
                    let w = node.shape[1];
                    let mut dx = vec![T::zero(); m * nn];
                    for i in 0..m {
                        dx[i * nn + start..i * nn + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    acc(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let (m, nn) = (node.shape[0], node.shape[1]);
                    let mut off = 0;
                    for &p in parts {
                        let w = shp(p)[1];
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * nn + off..i * nn + off + w]);
                        }
                        off += w;
                        acc(p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc(p, g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = shp(*table)[1];
                    let mut dt = vec![T::zero(); val(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                        }
                    }
                    acc(*table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    scored,
                    probs,
                    count,
                } => {
                    let v = shp(*logits)[1];
                    let scale = g[0].as_f64() / *count as f64;
                    let mut dl = vec![T::zero(); probs.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        if !scored[i] {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * v + j] = c((probs[i * v + j] - onehot) * scale);
                        }
                    }
                    acc(*logits, dl);
                }
                Op::Sum(a) => {
                    acc(*a, vec![g[0]; val(*a).len()]);
                }
            }
        }

        self.nodes.clear();
        self.param_cache.clear();
        self.spent = true;
        Ok(())
    }
}
