use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, MatLayout, Scalar, Tensor};
use crate::error::{Error, Result};

/// Value written into masked-out attention logits. Finite so that the
/// no-NaN/Inf invariant holds; `exp` of it underflows to exactly zero.
pub const MASK_VALUE: f64 = -1.0e9;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a second call to [`Graph::backward`] does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardPolicy {
    /// Refuse to run backward twice without [`Graph::reset_grads`].
    #[default]
    Error,
    /// Add the new leaf gradients onto the stored ones.
    Accumulate,
}

/// Split of a shape around one axis: `outer × n × inner`.
#[derive(Debug, Clone, Copy)]
struct AxisSplit {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::IndexOutOfRange {
                op,
                index: axis,
                extent: shape.len(),
            });
        }
        Ok(AxisSplit {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    fn at(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.n + j) * self.inner + i
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Exp(Var),
    Log(Var),
    Pow(Var, S),
    Gelu(Var),
    Relu(Var),
    Sum(Var, AxisSplit),
    Mean(Var, AxisSplit),
    Variance(Var, AxisSplit),
    Max {
        a: Var,
        split: AxisSplit,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
        row_len: usize,
    },
    SelectLast {
        a: Var,
        idx: Vec<usize>,
        width: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        extents: Vec<usize>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    CausalMask(Var),
    Dropout(Var, Vec<S>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A recorded computation supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and reverse index order is a valid reverse topological order.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    policy: BackwardPolicy,
    backward_done: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            policy: BackwardPolicy::Error,
            backward_done: false,
            dropout_rng: None,
        }
    }

    /// A graph in training mode: dropout draws its masks from a stream seeded
    /// by `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn with_policy(mut self, policy: BackwardPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ---- elementwise binary -------------------------------------------------

    /// `b` must be shaped like a trailing suffix of `a` (rank 0 included).
    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        self.check_broadcast(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let m = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % m]))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("divide", a, b)?;
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(Error::domain("divide", "zero divisor"));
        }
        self.binary("divide", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of(c);
        let value = self.map(a, |x| x * c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of(c);
        let value = self.map(a, |x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same extent")
    }

    // ---- matmul ---------------------------------------------------------------

    /// `(…, m, k) · (…, k, n)` with matching leading axes, or `(…, m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != k2 || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); batch * m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        if shared_rhs {
            gemm(
                da,
                MatLayout::new(batch * m, k),
                db,
                MatLayout::new(k, n),
                &mut out,
                false,
            );
        } else {
            for bi in 0..batch {
                gemm(
                    &da[bi * m * k..(bi + 1) * m * k],
                    MatLayout::new(m, k),
                    &db[bi * k * n..(bi + 1) * k * n],
                    MatLayout::new(k, n),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a, b],
        )
    }

    // ---- elementwise unary ----------------------------------------------------

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.exp());
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= S::zero()) {
            return Err(Error::domain("log", format!("nonpositive operand {bad}")));
        }
        let value = self.map(a, |x| x.ln());
        self.push("log", value, Op::Log(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let ps = S::of(p);
        if p.fract() != 0.0 && self.value(a).data().iter().any(|v| *v < S::zero()) {
            return Err(Error::domain("power", "negative base with fractional exponent"));
        }
        if p < 1.0 && p != 0.0 && self.value(a).data().iter().any(|v| v.is_zero()) {
            return Err(Error::domain("power", "zero base with exponent below one"));
        }
        let value = self.map(a, |x| x.powf(ps));
        self.push("power", value, Op::Pow(a, ps), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| gelu_fwd(x));
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.max(S::zero()));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    // ---- reductions -----------------------------------------------------------

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    fn reduce(&self, a: Var, split: AxisSplit, f: impl Fn(&mut dyn Iterator<Item = S>) -> S) -> Vec<S> {
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(split.outer * split.inner);
        for o in 0..split.outer {
            for i in 0..split.inner {
                let mut it = (0..split.n).map(|j| d[split.at(o, j, i)]);
                out.push(f(&mut it));
            }
        }
        out
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let split = AxisSplit::of("sum", self.shape(a), axis)?;
        let out = self.reduce(a, split, |it| it.fold(S::zero(), |acc, x| acc + x));
        let value = Tensor::new(Self::reduced_shape(self.shape(a), axis), out)?;
        self.push("sum", value, Op::Sum(a, split), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let split = AxisSplit::of("mean", self.shape(a), axis)?;
        if split.n == 0 {
            return Err(Error::domain("mean", "empty axis"));
        }
        let n = S::of(split.n as f64);
        let out = self.reduce(a, split, |it| it.fold(S::zero(), |acc, x| acc + x) / n);
        let value = Tensor::new(Self::reduced_shape(self.shape(a), axis), out)?;
        self.push("mean", value, Op::Mean(a, split), &[a])
    }

    /// Population (1/n) variance along `axis`.
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let split = AxisSplit::of("variance", self.shape(a), axis)?;
        if split.n == 0 {
            return Err(Error::domain("variance", "empty axis"));
        }
        let n = S::of(split.n as f64);
        let out = self.reduce(a, split, |it| {
            let xs: Vec<S> = it.collect();
            let mu = xs.iter().fold(S::zero(), |acc, &x| acc + x) / n;
            xs.iter().fold(S::zero(), |acc, &x| acc + (x - mu) * (x - mu)) / n
        });
        let value = Tensor::new(Self::reduced_shape(self.shape(a), axis), out)?;
        self.push("variance", value, Op::Variance(a, split), &[a])
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let split = AxisSplit::of("max", self.shape(a), axis)?;
        if split.n == 0 {
            return Err(Error::domain("max", "empty axis"));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(split.outer * split.inner);
        let mut argmax = Vec::with_capacity(split.outer * split.inner);
        for o in 0..split.outer {
            for i in 0..split.inner {
                let mut best = 0;
                for j in 1..split.n {
                    if d[split.at(o, j, i)] > d[split.at(o, best, i)] {
                        best = j;
                    }
                }
                argmax.push(best);
                out.push(d[split.at(o, best, i)]);
            }
        }
        let value = Tensor::new(Self::reduced_shape(self.shape(a), axis), out)?;
        self.push("max", value, Op::Max { a, split, argmax }, &[a])
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(S::zero(), |acc, &x| acc + x);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    // ---- normalization ----------------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let w = va.last_dim();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_row(row);
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Log-softmax along the last axis via max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let w = va.last_dim();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(w) {
            log_softmax_row(row);
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm", &sx, &[]))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &sx, self.shape(p)));
            }
        }
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = vx.len() / d.max(1);
        let eps = S::of(LAYER_NORM_EPS);
        let dn = S::of(d as f64);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.chunks(d) {
            let mu = row.iter().fold(S::zero(), |acc, &v| acc + v) / dn;
            let var = row.iter().fold(S::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(sx, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    // ---- indexing ---------------------------------------------------------------

    /// Selects rows along the first axis (embedding lookup when `a` is a table).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(Error::shape("gather", &sa, &[rows.len()]));
        }
        let extent = sa[0];
        let row_len: usize = sa[1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= extent {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: r,
                    extent,
                });
            }
            out.extend_from_slice(&d[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = sa.clone();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        self.push(
            "gather",
            value,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
                row_len,
            },
            &[a],
        )
    }

    /// `out[r] = a[r, idx[r]]` over the last axis.
    pub fn select_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let width = *sa.last().ok_or_else(|| Error::shape("select", &sa, &[]))?;
        let rows = self.value(a).len() / width.max(1);
        if idx.len() != rows {
            return Err(Error::shape("select", &sa, &[idx.len()]));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows);
        for (r, &j) in idx.iter().enumerate() {
            if j >= width {
                return Err(Error::IndexOutOfRange {
                    op: "select",
                    index: j,
                    extent: width,
                });
            }
            out.push(d[r * width + j]);
        }
        let value = Tensor::new(sa[..sa.len() - 1].to_vec(), out)?;
        self.push(
            "select",
            value,
            Op::SelectLast {
                a,
                idx: idx.to_vec(),
                width,
            },
            &[a],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("concatenate", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let split = AxisSplit::of("concatenate", &base, axis)?;
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concatenate", &base, s));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(split.outer * total * split.inner);
        for o in 0..split.outer {
            for (&p, &n) in parts.iter().zip(&extents) {
                let chunk = n * split.inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concatenate",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer: split.outer,
                inner: split.inner,
                extents,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(Error::shape("reshape", va.shape(), shape));
        }
        let value = va.clone().with_shape(shape.to_vec());
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&ax| ax >= sa.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::shape("transpose", &sa, axes));
        }
        let value = permute_tensor(self.value(a), axes);
        self.push("transpose", value, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Replaces entries above the diagonal of the trailing square matrices
    /// with [`MASK_VALUE`].
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || sa[sa.len() - 1] != sa[sa.len() - 2] {
            return Err(Error::shape("causal_mask", &sa, &[]));
        }
        let t = sa[sa.len() - 1];
        let mask = S::of(MASK_VALUE);
        let mut out = self.value(a).data().to_vec();
        for mat in out.chunks_mut(t * t) {
            for i in 0..t {
                for v in &mut mat[i * t + i + 1..(i + 1) * t] {
                    *v = mask;
                }
            }
        }
        let value = Tensor::new(sa, out)?;
        self.push("causal_mask", value, Op::CausalMask(a), &[a])
    }

    /// Inverted dropout; identity unless the graph is in training mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain("dropout", format!("rate {p} outside [0, 1)")));
        }
        let n = self.value(a).len();
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout(a, mask), &[a])
    }

    // ---- backward -------------------------------------------------------------

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if self.backward_done && self.policy == BackwardPolicy::Error {
            return Err(Error::BackwardTwice);
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), S::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if self.backward_done {
            for (i, fresh) in grads.into_iter().enumerate() {
                let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
                match (self.grads.get_mut(i), fresh) {
                    (Some(Some(old)), Some(new)) if is_leaf => {
                        for (o, n) in old.data_mut().iter_mut().zip(new.data()) {
                            *o = *o + *n;
                        }
                    }
                    (Some(slot), new) => {
                        if !is_leaf || slot.is_none() {
                            *slot = new;
                        }
                    }
                    (None, new) => self.grads.push(new),
                }
            }
        } else {
            self.grads = grads;
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| fold_into(gb, gd, |_, x| x));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| fold_into(gb, gd, |_, x| -x));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let m = vb.len();
                self.acc(grads, *a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v = *v + gd[k] * vb[k % m];
                    }
                });
                self.acc(grads, *b, |gb| fold_into(gb, gd, |k, x| x * va[k]));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                let m = vb.len();
                self.acc(grads, *a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v = *v + gd[k] / vb[k % m];
                    }
                });
                // d(a/b)/db = -(a/b)/b
                self.acc(grads, *b, |gb| fold_into(gb, gd, |k, x| -x * out[k] / vb[k % m]));
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| {
                    for (v, &x) in ga.iter_mut().zip(gd) {
                        *v = *v + x * *c;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |ga| add_into(ga, gd)),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if *shared_rhs {
                    self.acc(grads, *a, |ga| {
                        gemm(gd, MatLayout::new(batch * m, n), vb, MatLayout::new(k, n).t(), ga, true)
                    });
                    self.acc(grads, *b, |gb| {
                        gemm(va, MatLayout::new(batch * m, k).t(), gd, MatLayout::new(batch * m, n), gb, true)
                    });
                } else {
                    self.acc(grads, *a, |ga| {
                        for bi in 0..batch {
                            gemm(
                                &gd[bi * m * n..(bi + 1) * m * n],
                                MatLayout::new(m, n),
                                &vb[bi * k * n..(bi + 1) * k * n],
                                MatLayout::new(k, n).t(),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                true,
                            );
                        }
                    });
                    self.acc(grads, *b, |gb| {
                        for bi in 0..batch {
                            gemm(
                                &va[bi * m * k..(bi + 1) * m * k],
                                MatLayout::new(m, k).t(),
                                &gd[bi * m * n..(bi + 1) * m * n],
                                MatLayout::new(m, n),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                true,
                            );
                        }
                    });
                }
            }
            Op::Exp(a) => self.acc(grads, *a, |ga| {
                for (k, v) in ga.iter_mut().enumerate() {
                    *v = *v + gd[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v = *v + gd[k] / va[k];
                    }
                })
            }
            Op::Pow(a, p) => {
                let va = self.value(*a).data();
                let pm1 = *p - S::one();
                self.acc(grads, *a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v = *v + gd[k] * *p * va[k].powf(pm1);
                    }
                })
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v = *v + gd[k] * gelu_grad(va[k]);
                    }
                })
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        if va[k] > S::zero() {
                            *v = *v + gd[k];
                        }
                    }
                })
            }
            Op::Sum(a, s) | Op::Mean(a, s) => {
                let scale = if matches!(node.op, Op::Mean(..)) {
                    S::one() / S::of(s.n as f64)
                } else {
                    S::one()
                };
                self.acc(grads, *a, |ga| {
                    for o in 0..s.outer {
                        for j in 0..s.n {
                            for ii in 0..s.inner {
                                let gv = gd[o * s.inner + ii] * scale;
                                let t = &mut ga[s.at(o, j, ii)];
                                *t = *t + gv;
                            }
                        }
                    }
                })
            }
            Op::Variance(a, s) => {
                // d/dx_j of (1/n)Σ(x - μ)² is 2(x_j - μ)/n; the μ-dependence
                // cancels because Σ(x - μ) = 0.
                let va = self.value(*a).data();
                let n = S::of(s.n as f64);
                let two = S::of(2.0);
                self.acc(grads, *a, |ga| {
                    for o in 0..s.outer {
                        for ii in 0..s.inner {
                            let mu = (0..s.n).fold(S::zero(), |acc, j| acc + va[s.at(o, j, ii)]) / n;
                            let gv = gd[o * s.inner + ii];
                            for j in 0..s.n {
                                let idx = s.at(o, j, ii);
                                ga[idx] = ga[idx] + gv * two * (va[idx] - mu) / n;
                            }
                        }
                    }
                })
            }
            Op::Max { a, split: s, argmax } => self.acc(grads, *a, |ga| {
                for o in 0..s.outer {
                    for ii in 0..s.inner {
                        let r = o * s.inner + ii;
                        let idx = s.at(o, argmax[r], ii);
                        ga[idx] = ga[idx] + gd[r];
                    }
                }
            }),
            Op::SumAll(a) => {
                let gv = gd[0];
                self.acc(grads, *a, |ga| {
                    for v in ga.iter_mut() {
                        *v = *v + gv;
                    }
                })
            }
            Op::Softmax(a) => {
                let w = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(w).zip(out.chunks(w)).zip(gd.chunks(w)) {
                        let dot = yr.iter().zip(dr).fold(S::zero(), |acc, (&y, &d)| acc + y * d);
                        for j in 0..w {
                            gr[j] = gr[j] + yr[j] * (dr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let w = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(w).zip(out.chunks(w)).zip(gd.chunks(w)) {
                        let total = dr.iter().fold(S::zero(), |acc, &d| acc + d);
                        for j in 0..w {
                            gr[j] = gr[j] + dr[j] - yr[j].exp() * total;
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                let dn = S::of(d as f64);
                self.acc(grads, *x, |gx| {
                    for (r, (gr, dr)) in gx.chunks_mut(d).zip(gd.chunks(d)).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..d {
                            let dh = dr[j] * gam[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * h[j];
                        }
                        let is = inv_std[r];
                        for j in 0..d {
                            let dh = dr[j] * gam[j];
                            gr[j] = gr[j] + is / dn * (dn * dh - s1 - h[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for (dr, h) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + dr[j] * h[j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for dr in gd.chunks(d) {
                        add_into(gb, dr);
                    }
                });
            }
            Op::GatherRows { a, rows, row_len } => self.acc(grads, *a, |ga| {
                for (k, &r) in rows.iter().enumerate() {
                    let src = &gd[k * row_len..(k + 1) * row_len];
                    add_into(&mut ga[r * row_len..(r + 1) * row_len], src);
                }
            }),
            Op::SelectLast { a, idx, width } => self.acc(grads, *a, |ga| {
                for (r, &j) in idx.iter().enumerate() {
                    ga[r * width + j] = ga[r * width + j] + gd[r];
                }
            }),
            Op::Concat {
                parts,
                outer,
                inner,
                extents,
            } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&p, &n) in parts.iter().zip(extents) {
                    let chunk = n * inner;
                    self.acc(grads, p, |gp| {
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], &gd[src..src + chunk]);
                        }
                    });
                    offset += n;
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_tensor(g, &inverse);
                self.acc(grads, *a, |ga| add_into(ga, back.data()));
            }
            Op::CausalMask(a) => {
                let t = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for (gm, dm) in ga.chunks_mut(t * t).zip(gd.chunks(t * t)) {
                        for i in 0..t {
                            for j in 0..=i {
                                gm[i * t + j] = gm[i * t + j] + dm[i * t + j];
                            }
                        }
                    }
                })
            }
            Op::Dropout(a, mask) => self.acc(grads, *a, |ga| {
                for (k, v) in ga.iter_mut().enumerate() {
                    *v = *v + gd[k] * mask[k];
                }
            }),
        }
    }

    /// Runs `f` on the (lazily zeroed) gradient buffer of `target`.
    fn acc(&self, grads: &mut [Option<Tensor<S>>], target: Var, f: impl FnOnce(&mut [S])) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        f(slot.data_mut());
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Reduces a full-size gradient onto a suffix-broadcast operand.
fn fold_into<S: Scalar>(dst: &mut [S], src: &[S], f: impl Fn(usize, S) -> S) {
    let m = dst.len();
    for (k, &s) in src.iter().enumerate() {
        dst[k % m] = dst[k % m] + f(k, s);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().fold(S::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    gelu_fwd(x)
}

fn permute_tensor<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return Tensor::new(out_shape, out).expect("empty");
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    // Innermost output axis is walked in a tight loop.
    let (last_n, last_s) = match rank {
        0 => (1, 0),
        _ => (out_shape[rank - 1], strides[rank - 1]),
    };
    loop {
        let mut o = offset;
        for _ in 0..last_n {
            out.push(src[o]);
            o += last_s;
        }
        // advance the outer counters
        let mut ax = rank.saturating_sub(1);
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out).expect("permutation preserves extent");
            }
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
