use super::{broadcast_shape, Result, Scalar, Tensor, TensorError};
use rand::Rng;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Sigmoid(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    RmsNormalize { x: Var, eps: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    TakeAlong { x: Var, idx: Vec<usize> },
    Rope { x: Var, positions: Vec<usize>, head_dim: usize, base: f64 },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and [`backward`](Tape::backward) visits each node once, in reverse.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

/// Sums `g` into a buffer of length `len`, folding repeats of a broadcast operand.
fn fold_into<T: Scalar>(g: Vec<T>, len: usize) -> Vec<T> {
    if g.len() == len {
        return g;
    }
    let mut out = vec![T::zero(); len];
    for (i, v) in g.into_iter().enumerate() {
        out[i % len] = out[i % len] + v;
    }
    out
}

/// Rotates consecutive pairs of every `head_dim`-wide head in `row`.
///
/// Pair `i` of a head rotates by `position * base^(-2i / head_dim)`;
/// `inverse` applies the transpose rotation.
pub(crate) fn rope_row<T: Scalar>(row: &mut [T], position: usize, head_dim: usize, base: f64, inverse: bool) {
    let half = head_dim / 2;
    for i in 0..half {
        let inv_freq = base.powf(-((2 * i) as f64) / head_dim as f64);
        let angle = position as f64 * inv_freq;
        let (s, c) = angle.sin_cos();
        let s = if inverse { -s } else { s };
        for head in row.chunks_exact_mut(head_dim) {
            let x0 = head[2 * i].as_f64();
            let x1 = head[2 * i + 1].as_f64();
            head[2 * i] = T::of(x0 * c - x1 * s);
            head[2 * i + 1] = T::of(x0 * s + x1 * c);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tracked leaf; it receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let (da, db) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let data = if da.len() == n && db.len() == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % da.len()], db[i % db.len()])).collect()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cv = T::of(c);
        let value = self.value(x).map(|v| v * cv);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cv = T::of(c);
        let value = self.value(x).map(|v| v + cv);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// Matrix product of rank-2 operands; `trans_b` multiplies by `b` transposed.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), false, tb.data(), trans_b, T::zero(), &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|v| !(**v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad:?}"),
            });
        }
        let value = t.map(|v| v.ln());
        Ok(self.push(value, Op::Log(x), &[x]))
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let t = self.value(x);
        let integral = p.fract() == 0.0;
        for v in t.data() {
            let v = v.as_f64();
            if v < 0.0 && !integral {
                return Err(TensorError::Domain {
                    op: "pow",
                    detail: format!("negative base {v} with fractional exponent {p}"),
                });
            }
            if v == 0.0 && p < 0.0 {
                return Err(TensorError::Domain {
                    op: "pow",
                    detail: format!("zero base with negative exponent {p}"),
                });
            }
        }
        let pv = T::of(p);
        let value = t.map(|v| v.powf(pv));
        Ok(self.push(value, Op::Pow(x, p), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(TensorError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("no axis {axis}"),
            });
        }
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let extent = self.value(x).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / extent as f64))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(w) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            if !m.is_finite() {
                return Err(TensorError::Domain {
                    op: "softmax",
                    detail: format!("row maximum is {m:?}"),
                });
            }
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(w) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            if !m.is_finite() {
                return Err(TensorError::Domain {
                    op: "log_softmax",
                    detail: format!("row maximum is {m:?}"),
                });
            }
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// `x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let w = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(w) {
            let ms: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / w as f64;
            let denom = ms + eps;
            if !(denom > 0.0) {
                return Err(TensorError::Domain {
                    op: "rms_normalize",
                    detail: "zero-norm row with eps = 0".into(),
                });
            }
            let inv = 1.0 / denom.sqrt();
            for v in row.iter_mut() {
                *v = T::of(v.as_f64() * inv);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::RmsNormalize { x, eps }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                shape: first,
                reason: format!("no axis {axis}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let conforms = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !conforms {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(TensorError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("slice {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Rows of a rank-2 `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "gather needs a rank-2 table".into(),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::OutOfRange {
                    op: "gather",
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new([ids.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `out[i] = x[i, idx[i]]` for rank-2 `x`.
    pub fn take_along(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "take_along",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let cols = t.shape()[1];
        let mut out = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(TensorError::OutOfRange {
                    op: "take_along",
                    index: c,
                    extent: cols,
                });
            }
            out.push(t.data()[r * cols + c]);
        }
        let value = Tensor::new([idx.len()], out)?;
        Ok(self.push(
            value,
            Op::TakeAlong {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Rotary embedding of a `[rows, n_heads * head_dim]` tensor, one position per row.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let t = self.value(x);
        if !head_dim.is_multiple_of(2) || head_dim == 0 {
            return Err(TensorError::Domain {
                op: "rope",
                detail: format!("head_dim {head_dim} must be even"),
            });
        }
        if t.rank() != 2 || t.shape()[0] != positions.len() || !t.shape()[1].is_multiple_of(head_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                left: t.shape().to_vec(),
                right: vec![positions.len(), head_dim],
            });
        }
        let w = t.shape()[1];
        let mut out = t.data().to_vec();
        for (row, &p) in out.chunks_exact_mut(w).zip(positions) {
            rope_row(row, p, head_dim, base, false);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                base,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Inverted dropout: zeroes each element with probability `p` and rescales survivors.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Populates gradients of every tracked leaf with `d loss / d leaf`.
    ///
    /// Gradients accumulate into existing leaf gradients; tracked leaves the
    /// loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((i, g));
                continue;
            }
            for (v, contrib) in vjp(node, g, &self.nodes) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a = *a + *c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            let shape = node.value.shape().to_vec();
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, v)| *a = *a + *v),
                slot @ None => *slot = Some(Tensor::new(shape, g)?),
            }
        }
        for node in self.nodes[..n].iter_mut() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec())?);
            }
        }
        Ok(())
    }
}

/// Vector-Jacobian product of one recorded op: upstream `g` to per-parent gradients.
fn vjp<T: Scalar>(node: &Node<T>, g: Vec<T>, nodes: &[Node<T>]) -> Vec<(Var, Vec<T>)> {
    let val = |v: &Var| nodes[v.0].value.data();
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(node.op, Op::Sub(..));
            if needs(b) {
                let mut gb = fold_into(g.clone(), val(b).len());
                if negate {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                out.push((*b, gb));
            }
            if needs(a) {
                out.push((*a, fold_into(g, val(a).len())));
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(a), val(b));
            if needs(a) {
                let prod = g.iter().enumerate().map(|(j, &gv)| gv * db[j % db.len()]).collect();
                out.push((*a, fold_into(prod, da.len())));
            }
            if needs(b) {
                let prod = g.iter().enumerate().map(|(j, &gv)| gv * da[j % da.len()]).collect();
                out.push((*b, fold_into(prod, db.len())));
            }
        }
        Op::Scale(x, c) => {
            let c = T::of(*c);
            out.push((*x, g.into_iter().map(|v| v * c).collect()));
        }
        Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g)),
        Op::MatMul { a, b, trans_b } => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = node.value.shape()[1];
            if needs(a) {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, &g, false, tb.data(), !trans_b, T::zero(), &mut ga);
                out.push((*a, ga));
            }
            if needs(b) {
                let mut gb = vec![T::zero(); k * n];
                if *trans_b {
                    T::gemm(n, m, k, &g, true, ta.data(), false, T::zero(), &mut gb);
                } else {
                    T::gemm(k, m, n, ta.data(), true, &g, false, T::zero(), &mut gb);
                }
                out.push((*b, gb));
            }
        }
        Op::Exp(x) => {
            let y = node.value.data();
            out.push((*x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()));
        }
        Op::Log(x) => {
            let xd = val(x);
            out.push((*x, g.iter().zip(xd).map(|(&gv, &xv)| gv / xv).collect()));
        }
        Op::Pow(x, p) => {
            let xd = val(x);
            let gx = g
                .iter()
                .zip(xd)
                .map(|(&gv, &xv)| T::of(gv.as_f64() * p * xv.as_f64().powf(p - 1.0)))
                .collect();
            out.push((*x, gx));
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            let gx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
            out.push((*x, gx));
        }
        Op::Sum(x) => out.push((*x, vec![g[0]; val(x).len()])),
        Op::SumAxis { x, axis } => {
            let (outer, extent, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let mut gx = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                for a in 0..extent {
                    let base = (o * extent + a) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            out.push((*x, gx));
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let w = last_dim(node.value.shape());
            let mut gx = vec![T::zero(); y.len()];
            for ((gr, yr), o) in g.chunks_exact(w).zip(y.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..w {
                    o[j] = yr[j] * (gr[j] - dot);
                }
            }
            out.push((*x, gx));
        }
        Op::LogSoftmax(x) => {
            let y = node.value.data();
            let w = last_dim(node.value.shape());
            let mut gx = vec![T::zero(); y.len()];
            for ((gr, yr), o) in g.chunks_exact(w).zip(y.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                let total: T = gr.iter().copied().sum();
                for j in 0..w {
                    o[j] = gr[j] - yr[j].exp() * total;
                }
            }
            out.push((*x, gx));
        }
        Op::RmsNormalize { x, eps } => {
            let xd = val(x);
            let w = last_dim(node.value.shape());
            let y = node.value.data();
            let mut gx = vec![T::zero(); xd.len()];
            for (((gr, xr), yr), o) in g
                .chunks_exact(w)
                .zip(xd.chunks_exact(w))
                .zip(y.chunks_exact(w))
                .zip(gx.chunks_exact_mut(w))
            {
                let ms: f64 = xr.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / w as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / w as f64;
                for j in 0..w {
                    o[j] = T::of(inv * (gr[j].as_f64() - yr[j].as_f64() * gy));
                }
            }
            out.push((*x, gx));
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let ext = nodes[p.0].value.shape()[*axis];
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    out.push((*p, gp));
                }
                offset += ext;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, extent, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            out.push((*x, gx));
        }
        Op::Gather { table, ids } => {
            let ts = nodes[table.0].value.shape();
            let cols = ts[1];
            let mut gt = vec![T::zero(); ts[0] * cols];
            for (r, &id) in ids.iter().enumerate() {
                let dst = &mut gt[id * cols..(id + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                    *d = *d + s;
                }
            }
            out.push((*table, gt));
        }
        Op::TakeAlong { x, idx } => {
            let cols = nodes[x.0].value.shape()[1];
            let mut gx = vec![T::zero(); idx.len() * cols];
            for (r, &c) in idx.iter().enumerate() {
                gx[r * cols + c] = gx[r * cols + c] + g[r];
            }
            out.push((*x, gx));
        }
        Op::Rope {
            x,
            positions,
            head_dim,
            base,
        } => {
            let w = node.value.shape()[1];
            let mut gx = g;
            for (row, &p) in gx.chunks_exact_mut(w).zip(positions) {
                rope_row(row, p, *head_dim, *base, true);
            }
            out.push((*x, gx));
        }
    }
    out
}
