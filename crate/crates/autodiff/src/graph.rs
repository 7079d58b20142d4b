//! Eager tape: every op evaluates immediately and records how to differentiate itself.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::kernels::{self, MatLayout};
use crate::tensor::{numel, Tensor};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key visibility for the fused attention softmax over `[..., q, k]` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every key visible.
    None,
    /// Query `i` sees key `j` iff `j <= i + offset`.
    Causal { offset: usize },
}

impl AttnMask {
    #[inline]
    pub fn visible(self, q: usize, k: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal { offset } => k <= q + offset,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Cos(Var),
    Sin(Var),
    Sqrt(Var),
    Mean(Var),
    Sum(Var),
    Detach(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Mse(Var, Var),
    RmsNorm { x: Var, gain: Var },
    Silu(Var),
    Rope { x: Var, cos: Arc<[T]>, sin: Arc<[T]> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Cos(..) => "cos",
            Op::Sin(..) => "sin",
            Op::Sqrt(..) => "sqrt",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Detach(..) => "detach",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Silu(..) => "silu",
            Op::Rope { .. } => "rope",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::RmsNorm { x, gain } => vec![*x, *gain],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale(x, _)
            | Op::Permute { x, .. }
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Softmax(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Cos(x)
            | Op::Sin(x)
            | Op::Sqrt(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Detach(x)
            | Op::Silu(x)
            | Op::Rope { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Per-op forward residue (softmax probabilities, inverse RMS, ...).
    saved: Vec<T>,
}

/// A single-use computation tape.
///
/// Build leaves with [`Graph::param`] / [`Graph::constant`], compose ops, then call
/// [`Graph::backward`] on a scalar root. Values are immutable once recorded.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    replay: Option<(Vec<Tensor<T>>, usize)>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), replay: None }
    }

    /// A graph whose `k`-th `detach` returns `values[k]` instead of its input.
    pub fn with_detached(values: Vec<Tensor<T>>) -> Self {
        Self { replay: Some((values, 0)), ..Self::new() }
    }

    /// Values of every `detach` node in creation order.
    pub fn detached_values(&self) -> Vec<Tensor<T>> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Detach(_))).map(|n| n.value.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Values are computed eagerly; this returns the already-evaluated root.
    pub fn eval(&self, root: Var) -> &Tensor<T> {
        self.value(root)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), data.clone()))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(AutodiffError::NonFiniteInput { index });
        }
        Ok(self.push(value, Op::Leaf, requires_grad, Vec::new()))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, saved: Vec<T>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, saved: Vec<T>) -> Var {
        let rg = match op {
            Op::Detach(_) => false,
            _ => self.any_grad(&op.inputs()),
        };
        self.push(Tensor::from_parts(shape, data), op, rg, saved)
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(name, ta.shape(), tb.shape())?;
        let data = kernels::binary(ta.data(), ta.shape(), tb.data(), tb.shape(), &out_shape, f);
        Ok((out_shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary_op("add", a, b, |x, y| x + y)?;
        Ok(self.record(s, d, Op::Add(a, b), vec![]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary_op("sub", a, b, |x, y| x - y)?;
        Ok(self.record(s, d, Op::Sub(a, b), vec![]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary_op("mul", a, b, |x, y| x * y)?;
        Ok(self.record(s, d, Op::Mul(a, b), vec![]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * s).collect();
        let shape = t.shape().to_vec();
        Ok(self.record(shape, data, Op::Scale(x, s), vec![]))
    }

    // ---- linear algebra and layout -----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched `op(a) @ op(b)` over the last two axes, `op` optionally transposing.
    /// Batch axes must match, or one side must be a plain matrix shared by the batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), ta, tb)?;
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let shape = plan.out_shape.clone();
        Ok(self.record(shape, out, Op::MatMul { a, b, ta, tb }, vec![]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(AutodiffError::InvalidArgument { op: "transpose", msg: format!("rank {r} < 2") });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if axes.len() != in_shape.len() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(AutodiffError::InvalidArgument {
                op: "permute",
                msg: format!("axes {axes:?} are not a permutation for shape {in_shape:?}"),
            });
        }
        let data = kernels::permute(self.value(x).data(), &in_shape, axes, false);
        let out_shape = axes.iter().map(|&a| in_shape[a]).collect();
        Ok(self.record(out_shape, data, Op::Permute { x, axes: axes.to_vec() }, vec![]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch { op: "reshape", lhs: t.shape().to_vec(), rhs: shape.to_vec() });
        }
        let data = t.data().to_vec();
        Ok(self.record(shape.to_vec(), data, Op::Reshape(x), vec![]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(AutodiffError::InvalidArgument { op: "concat", msg: "no inputs".into() })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument { op: "concat", msg: format!("axis {axis} out of range for {base:?}") });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let run = t.len() / outer;
                data.extend_from_slice(&t.data()[o * run..(o + 1) * run]);
            }
        }
        Ok(self.record(out_shape, data, Op::Concat { xs: xs.to_vec(), axis }, vec![]))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.record(out_shape, data, Op::Slice { x, axis, start }, vec![]))
    }

    /// Row lookup: `table[ids[i], :]` for a `[rows, dim]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::InvalidArgument { op: "gather", msg: format!("table must be rank 2, got {shape:?}") });
        }
        if ids.is_empty() {
            return Err(AutodiffError::InvalidArgument { op: "gather", msg: "empty id list".into() });
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::InvalidArgument { op: "gather", msg: format!("id {bad} out of range for {rows} rows") });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        Ok(self.record(vec![ids.len(), dim], data, Op::Gather { table, ids: ids.to_vec() }, vec![]))
    }

    // ---- nonlinearities ----------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, AttnMask::None)
    }

    /// Numerically stable softmax over the last axis; masked keys get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, mask: AttnMask) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        let rows_per_block = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if !mask.visible(0, 0) {
            return Err(AutodiffError::InvalidArgument { op: "softmax", msg: "mask hides every key of row 0".into() });
        }
        let data = kernels::softmax_rows(self.value(x).data(), cols, rows_per_block, |q, k| mask.visible(q, k));
        Ok(self.record(shape, data, Op::Softmax(x), vec![]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.record(shape, data, op, vec![])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.exp(), Op::Exp(x)))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.cos(), Op::Cos(x)))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.sin(), Op::Sin(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.sqrt(), Op::Sqrt(x)))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v / (T::one() + (-v).exp()), Op::Silu(x)))
    }

    /// Forward value unchanged, gradient blocked.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = match &mut self.replay {
            Some((values, next)) => {
                let t = values.get(*next).cloned().ok_or_else(|| AutodiffError::InvalidArgument {
                    op: "detach",
                    msg: format!("no replay value for detach #{next}"),
                })?;
                if t.shape() != self.nodes[x.0].value.shape() {
                    return Err(AutodiffError::InvalidArgument {
                        op: "detach",
                        msg: format!("replay value #{next} has shape {:?}, input {:?}", t.shape(), self.nodes[x.0].value.shape()),
                    });
                }
                *next += 1;
                t
            }
            None => self.value(x).clone(),
        };
        Ok(self.push(t, Op::Detach(x), false, vec![]))
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        Ok(self.record(vec![1], vec![s], Op::Sum(x), vec![]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64(t.len() as f64);
        Ok(self.record(vec![1], vec![m], Op::Mean(x), vec![]))
    }

    /// Mean over rows of `logsumexp(logits) - logits[target]`; logits are `[..., classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let classes = *t.shape().last().unwrap();
        let rows = t.len() / classes;
        if rows != targets.len() {
            return Err(AutodiffError::ShapeMismatch { op: "cross_entropy", lhs: t.shape().to_vec(), rhs: vec![targets.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= classes) {
            return Err(AutodiffError::InvalidArgument { op: "cross_entropy", msg: format!("target {bad} out of range for {classes} classes") });
        }
        let probs = kernels::softmax_rows(t.data(), classes, 1, |_, _| true);
        let mut total = T::zero();
        for (row, &target) in t.data().chunks(classes).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - row[target];
        }
        let loss = total / T::from_f64(rows as f64);
        Ok(self.record(vec![1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec() }, probs))
    }

    /// Mean of squared differences; shapes must match exactly.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "mse", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let m = s / T::from_f64(ta.len() as f64);
        Ok(self.record(vec![1], vec![m], Op::Mse(a, b), vec![]))
    }

    // ---- fused transformer pieces ------------------------------------------

    /// `gain * x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = *tx.shape().last().unwrap();
        if tg.shape() != [d] {
            return Err(AutodiffError::ShapeMismatch { op: "rmsnorm", lhs: tx.shape().to_vec(), rhs: tg.shape().to_vec() });
        }
        if !(eps >= 0.0) {
            return Err(AutodiffError::InvalidArgument { op: "rmsnorm", msg: format!("eps must be >= 0, got {eps}") });
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let g = tg.data();
        let mut out = Vec::with_capacity(tx.len());
        let mut inv_rms = Vec::with_capacity(tx.len() / d);
        for row in tx.data().chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let denom = (ms + eps).sqrt();
            // all-zero row with eps = 0: output is zero
            let r = if denom > T::zero() { T::one() / denom } else { T::zero() };
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gi)| gi * v * r));
        }
        let shape = tx.shape().to_vec();
        Ok(self.record(shape, out, Op::RmsNorm { x, gain }, inv_rms))
    }

    /// Rotates consecutive channel pairs of `x: [..., seq, dim]` by per-(position, pair)
    /// angles given as `cos`/`sin` tables of length `seq * dim / 2`.
    pub fn rope(&mut self, x: Var, cos: Arc<[T]>, sin: Arc<[T]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] % 2 != 0 {
            return Err(AutodiffError::InvalidArgument { op: "rope", msg: format!("need [..., seq, even dim], got {shape:?}") });
        }
        let (seq, dim) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if cos.len() != seq * dim / 2 || sin.len() != cos.len() {
            return Err(AutodiffError::ShapeMismatch { op: "rope", lhs: shape.clone(), rhs: vec![cos.len(), sin.len()] });
        }
        let out = rope_apply(self.value(x).data(), &cos, &sin, seq, dim, false);
        Ok(self.record(shape, out, Op::Rope { x, cos, sin }, vec![]))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Gradients accumulate across fan-out and are
    /// kept only for nodes that require them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if numel(root_shape) != 1 {
            return Err(AutodiffError::NonScalarRoot { shape: root_shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for input in self.nodes[i].op.inputs() {
                if input.0 >= i {
                    return Err(AutodiffError::GraphCycle { node: i, input: input.0 });
                }
            }
            if !matches!(self.nodes[i].op, Op::Leaf) {
                for (input, gi) in self.vjp(i, &g) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(gi),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Detach(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, kernels::reduce_to(g, out_shape, val(*a).shape())));
                }
                if needs(*b) {
                    let mut gb = kernels::reduce_to(g, out_shape, val(*b).shape());
                    if matches!(node.op, Op::Sub(..)) {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if needs(this) {
                        let o = val(other);
                        let prod = kernels::binary(g, out_shape, o.data(), o.shape(), out_shape, |x, y| x * y);
                        out.push((this, kernels::reduce_to(&prod, out_shape, val(this).shape())));
                    }
                }
                out
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
            Op::MatMul { a, b, ta, tb } => {
                let plan = MatmulPlan::new(val(*a).shape(), val(*b).shape(), *ta, *tb).expect("validated in forward");
                let (ga, gb) = plan.backward(val(*a).data(), val(*b).data(), g, needs(*a), needs(*b));
                let mut out = Vec::new();
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
                out
            }
            Op::Permute { x, axes } => vec![(*x, kernels::permute(g, val(*x).shape(), axes, true))],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Concat { xs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let runs: Vec<usize> = xs.iter().map(|&v| val(v).len() / outer).collect();
                let mut parts: Vec<Vec<T>> = runs.iter().map(|&r| Vec::with_capacity(r * outer)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, &r) in parts.iter_mut().zip(&runs) {
                        p.extend_from_slice(&g[off..off + r]);
                        off += r;
                    }
                }
                xs.iter().copied().zip(parts).filter(|(v, _)| needs(*v)).collect()
            }
            Op::Slice { x, axis, start } => {
                let in_shape = val(*x).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Gather { table, ids } => {
                let dim = val(*table).shape()[1];
                let mut gt = vec![T::zero(); val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &gv) in gt[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *d += gv;
                    }
                }
                vec![(*table, gt)]
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *out_shape.last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Log(x) => vec![(*x, g.iter().zip(val(*x).data()).map(|(&gv, &xv)| gv / xv).collect())],
            Op::Exp(x) => vec![(*x, g.iter().zip(node.value.data()).map(|(&gv, &y)| gv * y).collect())],
            Op::Cos(x) => vec![(*x, g.iter().zip(val(*x).data()).map(|(&gv, &xv)| -gv * xv.sin()).collect())],
            Op::Sin(x) => vec![(*x, g.iter().zip(val(*x).data()).map(|(&gv, &xv)| gv * xv.cos()).collect())],
            Op::Sqrt(x) => {
                let half = T::from_f64(0.5);
                vec![(*x, g.iter().zip(node.value.data()).map(|(&gv, &y)| gv * half / y).collect())]
            }
            Op::Silu(x) => vec![(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| {
                        let s = T::one() / (T::one() + (-xv).exp());
                        gv * (s + xv * s * (T::one() - s))
                    })
                    .collect(),
            )],
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / T::from_f64(n as f64); n])]
            }
            Op::CrossEntropy { logits, targets } => {
                let classes = *val(*logits).shape().last().unwrap();
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let mut gl: Vec<T> = node.saved.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * classes + t] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let k = T::from_f64(2.0) * g[0] / T::from_f64(ta.len() as f64);
                let ga: Vec<T> = ta.iter().zip(tb).map(|(&x, &y)| k * (x - y)).collect();
                let mut out = Vec::new();
                if needs(*b) {
                    out.push((*b, ga.iter().map(|&v| -v).collect()));
                }
                if needs(*a) {
                    out.push((*a, ga));
                }
                out
            }
            Op::RmsNorm { x, gain } => {
                let tx = val(*x).data();
                let gn = val(*gain).data();
                let d = gn.len();
                let inv_d = T::from_f64(1.0 / d as f64);
                let mut gx = vec![T::zero(); tx.len()];
                let mut gg = vec![T::zero(); d];
                for (((row, gr), dx), &r) in tx.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).zip(&node.saved) {
                    let mut dot = T::zero();
                    for j in 0..d {
                        let h = gr[j] * gn[j];
                        dot += h * row[j];
                        gg[j] += gr[j] * row[j] * r;
                    }
                    let c = r * r * r * dot * inv_d;
                    for j in 0..d {
                        dx[j] = r * gr[j] * gn[j] - c * row[j];
                    }
                }
                let mut out = Vec::new();
                if needs(*x) {
                    out.push((*x, gx));
                }
                if needs(*gain) {
                    out.push((*gain, gg));
                }
                out
            }
            Op::Rope { x, cos, sin } => {
                let (seq, dim) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                vec![(*x, rope_apply(g, cos, sin, seq, dim, true))]
            }
        }
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn rope_apply<T: Float>(x: &[T], cos: &[T], sin: &[T], seq: usize, dim: usize, inverse: bool) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); x.len()];
    for (r, (src, dst)) in x.chunks(dim).zip(out.chunks_mut(dim)).enumerate() {
        let pos = r % seq;
        let (c, s) = (&cos[pos * half..(pos + 1) * half], &sin[pos * half..(pos + 1) * half]);
        for j in 0..half {
            let (a, b) = (src[2 * j], src[2 * j + 1]);
            let sj = if inverse { -s[j] } else { s[j] };
            dst[2 * j] = a * c[j] - b * sj;
            dst[2 * j + 1] = a * sj + b * c[j];
        }
    }
    out
}

/// Shape bookkeeping for a batched matmul.
struct MatmulPlan {
    out_shape: Vec<usize>,
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    ta: bool,
    la: MatLayout,
    lb: MatLayout,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let err = || AutodiffError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (ra, rb) = (a.len(), b.len());
        let (a_rows, a_cols) = (a[ra - 2], a[ra - 1]);
        let (b_rows, b_cols) = (b[rb - 2], b[rb - 1]);
        let la = MatLayout::stored(a_rows, a_cols, ta);
        let lb = MatLayout::stored(b_rows, b_cols, tb);
        if la.cols != lb.rows {
            return Err(err());
        }
        let (a_batch, b_batch) = (&a[..ra - 2], &b[..rb - 2]);
        let batch_shape = if a_batch == b_batch || b_batch.is_empty() {
            a_batch
        } else if a_batch.is_empty() {
            b_batch
        } else {
            return Err(err());
        };
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([la.rows, lb.cols]);
        Ok(Self {
            batch: batch_shape.iter().product(),
            a_batched: !a_batch.is_empty(),
            b_batched: !b_batch.is_empty(),
            out_shape,
            ta,
            la,
            lb,
            a_rows,
            a_cols,
            b_rows,
            b_cols,
        })
    }

    fn out_layout(&self, rows: usize) -> MatLayout {
        MatLayout::stored(rows, self.lb.cols, false)
    }

    /// Shared right operand with an untransposed batched left operand folds into one gemm.
    fn folds(&self) -> bool {
        self.a_batched && !self.b_batched && !self.ta
    }

    fn forward<T: Float>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (m, n) = (self.la.rows, self.lb.cols);
        if self.folds() {
            let la = MatLayout::stored(self.batch * m, self.a_cols, false);
            kernels::gemm_into(a, 0, la, b, 0, self.lb, c, 0, self.out_layout(self.batch * m), false);
            return;
        }
        let (sa, sb) = (self.a_rows * self.a_cols, self.b_rows * self.b_cols);
        for i in 0..self.batch {
            let ao = if self.a_batched { i * sa } else { 0 };
            let bo = if self.b_batched { i * sb } else { 0 };
            kernels::gemm_into(a, ao, self.la, b, bo, self.lb, c, i * m * n, self.out_layout(m), false);
        }
    }

    fn backward<T: Float>(&self, a: &[T], b: &[T], g: &[T], need_a: bool, need_b: bool) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (m, n) = (self.la.rows, self.lb.cols);
        let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
        let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
        if self.folds() {
            let rows = self.batch * m;
            let la = MatLayout::stored(rows, self.a_cols, false);
            let lg = self.out_layout(rows);
            if let Some(ga) = ga.as_mut() {
                kernels::gemm_into(g, 0, lg, b, 0, self.lb.t(), ga, 0, la, false);
            }
            if let Some(gb) = gb.as_mut() {
                kernels::gemm_into(a, 0, la.t(), g, 0, lg, gb, 0, self.lb, false);
            }
            return (ga, gb);
        }
        let (sa, sb) = (self.a_rows * self.a_cols, self.b_rows * self.b_cols);
        let lg = self.out_layout(m);
        for i in 0..self.batch {
            let ao = if self.a_batched { i * sa } else { 0 };
            let bo = if self.b_batched { i * sb } else { 0 };
            let go = i * m * n;
            if let Some(ga) = ga.as_mut() {
                kernels::gemm_into(g, go, lg, b, bo, self.lb.t(), ga, ao, self.la, true);
            }
            if let Some(gb) = gb.as_mut() {
                kernels::gemm_into(a, ao, self.la.t(), g, go, lg, gb, bo, self.lb, true);
            }
        }
        (ga, gb)
    }
}
