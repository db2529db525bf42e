use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, Tensor};
use crate::error::{ensure_positive, Error, Result};
use crate::math;
use crate::numerics::{FloatFormat, FormatKind};

/// Working precision of the tape. `F32` rounds every op output and every
/// accumulated gradient to single precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// How `scale_fwd` / `scale_bwd` behave in the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScalingMode {
    /// `scale_fwd` scales only the forward value, `scale_bwd` only the gradient.
    #[default]
    Directional,
    /// Both become exact: `scale_fwd(x, k)` is `k·x` in both passes and
    /// `scale_bwd` is the identity. Builds the exact-gradient twin of a graph.
    Exact,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, batched: bool },
    /// `out[o] = x[map[o]]`; covers transpose and permute.
    Gather1d { x: Var, map: Vec<usize> },
    Reshape(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    MaskFill { x: Var, mask: Vec<bool> },
    Pick { x: Var, targets: Vec<usize> },
    RmsNorm { x: Var, eps: f64 },
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    /// Forward value already carries the forward factor; `bwd` multiplies the gradient.
    DirectionalScale { x: Var, bwd: f64 },
    CastBwd { x: Var, format: FloatFormat },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order, so the backward pass is a reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    scaling: ScalingMode,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_modes(precision: Precision, scaling: ScalingMode) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            scaling,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn scaling(&self) -> ScalingMode {
        self.scaling
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            round_f32(value.data_mut());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let scalar = self.value(b).len() == 1;
        if scalar || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb) {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let data = da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// `a + b`; `b` may be a scalar or match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Exact multiplication by a constant, in both passes.
    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `a @ b` for `a: [..., m, k]` with either a shared `b: [k, n]` or a
    /// batched `b: [..., k, n]` with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (out, batched) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            let n = sb[1];
            let m_total = self.value(a).len() / k.max(1);
            let mut out = vec![0.0; m_total * n];
            gemm(m_total, k, n, 1.0, self.data(a), false, self.data(b), false, 0.0, &mut out);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (Tensor::new(&shape, out)?, false)
        } else {
            let r = sa.len();
            if sb.len() != r || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            let (m, n) = (sa[r - 2], sb[r - 1]);
            let batch: usize = sa[..r - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            let mut shape = sa.clone();
            shape[r - 1] = n;
            (Tensor::new(&shape, out)?, true)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, batched }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let mut in_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let n = self.value(x).len();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        for _ in 0..n {
            map.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum());
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let src = self.data(x);
        let data = map.iter().map(|&j| src[j]).collect();
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather1d { x, map }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row lookup: `table: [rows, width]`, output `[ids.len(), width]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", shape, &[]));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                size: rows,
            });
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(&[ids.len(), width], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn rows(&self, x: Var) -> usize {
        *self.shape(x).last().unwrap_or(&1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.rows(x);
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c.max(1)) {
            softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let c = self.rows(x);
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, math::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, math::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, math::sqrt, Op::Sqrt(x))
    }

    /// Elementwise clip to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Replaces positions where `mask` is true with `fill`. `mask` has shape
    /// `mask_shape`, a trailing suffix of `x`'s shape, and broadcasts over the
    /// leading axes.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], mask_shape: &[usize], fill: f64) -> Result<Var> {
        let sx = self.shape(x);
        let n: usize = mask_shape.iter().product();
        if n != mask.len()
            || mask_shape.len() > sx.len()
            || sx[sx.len() - mask_shape.len()..] != *mask_shape
        {
            return Err(Error::shape("mask_fill", sx, mask_shape));
        }
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            if mask[i % n] {
                *v = fill;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::MaskFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// `out[r] = x[r, targets[r]]` for `x: [rows, classes]`.
    pub fn pick(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("pick", s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::IndexOutOfRange {
                op: "pick",
                index: bad,
                size: c,
            });
        }
        let d = self.data(x);
        let data = targets.iter().enumerate().map(|(r, &t)| d[r * c + t]).collect();
        let value = Tensor::new(&[targets.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Pick {
                x,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Non-parametric RMSNorm over the last axis: `x / √(mean(x²) + eps)`.
    pub fn rmsnorm(&mut self, x: Var, eps: f64) -> Var {
        let c = self.rows(x).max(1);
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let r = 1.0 / math::sqrt(ms + eps);
            for v in row.iter_mut() {
                *v *= r;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::RmsNorm { x, eps }, rg)
    }

    /// Rotary embedding over `x: [..., seq, d]` with `d` even. Pairs
    /// `(2i, 2i+1)` at position `p` rotate by `p·10000^(−2i/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 || s[r - 2] != positions.len() {
            return Err(Error::shape("rope", &s, &[positions.len()]));
        }
        let d = s[r - 1];
        if !d.is_multiple_of(2) {
            return Err(Error::invalid("rope", alloc::format!("head dimension must be even, got {d}")));
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * math::powf(10000.0, -(2.0 * i as f64) / d as f64);
                cos.push(math::cos(theta));
                sin.push(math::sin(theta));
            }
        }
        let mut value = self.value(x).clone();
        let table = positions.len() * half;
        for (row_idx, row) in value.data_mut().chunks_mut(d).enumerate() {
            let base = (row_idx * half) % table;
            for i in 0..half {
                let (c, sn) = (cos[base + i], sin[base + i]);
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = x0 * c - x1 * sn;
                row[2 * i + 1] = x0 * sn + x1 * c;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Rope { x, cos, sin }, rg))
    }

    /// Forward value `k·x`; the backward pass forwards the incoming gradient
    /// unchanged (exact `k·g` under [`ScalingMode::Exact`]).
    pub fn scale_fwd(&mut self, x: Var, k: f64) -> Result<Var> {
        ensure_positive("scale_fwd factor", k)?;
        let bwd = match self.scaling {
            ScalingMode::Directional => 1.0,
            ScalingMode::Exact => k,
        };
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        Ok(self.push(value, Op::DirectionalScale { x, bwd }, rg))
    }

    /// Forward value unchanged; the gradient flowing to `x` is multiplied by
    /// `k` (left unchanged under [`ScalingMode::Exact`]).
    pub fn scale_bwd(&mut self, x: Var, k: f64) -> Result<Var> {
        ensure_positive("scale_bwd factor", k)?;
        let bwd = match self.scaling {
            ScalingMode::Directional => k,
            ScalingMode::Exact => 1.0,
        };
        let value = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push(value, Op::DirectionalScale { x, bwd }, rg))
    }

    /// Forward cast to `format`; straight-through gradient.
    pub fn cast_fwd(&mut self, x: Var, format: &FloatFormat) -> Var {
        let mut value = self.value(x).clone();
        format.quantize_in_place(value.data_mut());
        let rg = self.rg(x);
        self.push(value, Op::DirectionalScale { x, bwd: 1.0 }, rg)
    }

    /// Identity forward; the gradient flowing to `x` is cast to `format`.
    pub fn cast_bwd(&mut self, x: Var, format: &FloatFormat) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(
            value,
            Op::CastBwd {
                x,
                format: *format,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every node
    /// that requires one and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(self.finish(grads));
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            if self.precision == Precision::F32 {
                round_f32(&mut g);
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(self.finish(grads))
    }

    fn finish(&self, grads: Vec<Option<Vec<f64>>>) -> Gradients {
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("gradient shape")))
            .collect();
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| add_into(ga, g));
                let nb = self.value(*b).len();
                acc(*b, &mut |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % nb] += sign * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                acc(*a, &mut |ga| {
                    for (j, gv) in g.iter().enumerate() {
                        ga[j] += gv * db[j % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % nb] += gv * da[j];
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += k * gv;
                }
            }),
            Op::DirectionalScale { x, bwd } => acc(*x, &mut |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += bwd * gv;
                }
            }),
            Op::CastBwd { x, format } => {
                let mut q = g.to_vec();
                format.quantize_in_place(&mut q);
                acc(*x, &mut |gx| add_into(gx, &q));
            }
            Op::MatMul { a, b, batched } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let (da, db) = (self.data(*a), self.data(*b));
                if !batched {
                    let m = da.len() / k.max(1);
                    acc(*a, &mut |ga| gemm(m, n, k, 1.0, g, false, db, true, 1.0, ga));
                    acc(*b, &mut |gb| gemm(k, m, n, 1.0, da, true, g, false, 1.0, gb));
                } else {
                    let m = sa[sa.len() - 2];
                    let batch = da.len() / (m * k).max(1);
                    acc(*a, &mut |ga| {
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                1.0,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &db[t * k * n..(t + 1) * k * n],
                                true,
                                1.0,
                                &mut ga[t * m * k..(t + 1) * m * k],
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                &da[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                1.0,
                                &mut gb[t * k * n..(t + 1) * k * n],
                            );
                        }
                    });
                }
            }
            Op::Gather1d { x, map } => acc(*x, &mut |gx| {
                for (o, &j) in map.iter().enumerate() {
                    gx[j] += g[o];
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::GatherRows { table, ids } => {
                let width = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::Softmax(x) => {
                let c = self.rows(*x).max(1);
                acc(*x, &mut |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let c = self.rows(*x).max(1);
                acc(*x, &mut |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            gxr[j] += gr[j] - math::exp(yr[j]) * total;
                        }
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] * y[j];
                }
            }),
            Op::Log(x) => {
                let dx = self.data(*x);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] / dx[j];
                    }
                })
            }
            Op::Sqrt(x) => acc(*x, &mut |gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] / (2.0 * y[j]);
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let dx = self.data(*x);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        if dx[j] > *lo && dx[j] < *hi {
                            gx[j] += g[j];
                        }
                    }
                })
            }
            Op::MaskFill { x, mask } => {
                let n = mask.len();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        if !mask[j % n] {
                            gx[j] += g[j];
                        }
                    }
                })
            }
            Op::Pick { x, targets } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |gx| {
                    for (r, &t) in targets.iter().enumerate() {
                        gx[r * c + t] += g[r];
                    }
                })
            }
            Op::RmsNorm { x, eps } => {
                let c = self.rows(*x).max(1);
                let dx = self.data(*x);
                acc(*x, &mut |gx| {
                    for (((gxr, yr), gr), xr) in
                        gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)).zip(dx.chunks(c))
                    {
                        // y = r·x ⇒ dx = r·(g − y·⟨g, y⟩/c)
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                        let r = 1.0 / math::sqrt(ms + eps);
                        for j in 0..c {
                            gxr[j] += r * (gr[j] - yr[j] * dot);
                        }
                    }
                })
            }
            Op::Rope { x, cos, sin } => {
                let d = self.rows(*x);
                let half = d / 2;
                let table = cos.len();
                acc(*x, &mut |gx| {
                    for (row_idx, (gxr, gr)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        let base = (row_idx * half) % table;
                        for i in 0..half {
                            let (c, s) = (cos[base + i], sin[base + i]);
                            let (g0, g1) = (gr[2 * i], gr[2 * i + 1]);
                            gxr[2 * i] += g0 * c + g1 * s;
                            gxr[2 * i + 1] += -g0 * s + g1 * c;
                        }
                    }
                })
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn round_f32(xs: &mut [f64]) {
    let f = FloatFormat::preset(FormatKind::FP32);
    f.quantize_in_place(xs);
}

/// Per-node gradients from [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
