use super::kernels::{gemm, reduction_map};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by [`Graph::standardize`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of rows the statistics were taken over.
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
enum MatMulKind {
    /// `[.., m, k] x [k, n]`, leading axes of the lhs folded into `m`.
    Plain { m: usize, k: usize, n: usize },
    /// `[m, k] x [batch, k, n]`.
    BroadcastLhs { batch: usize, m: usize, k: usize, n: usize },
    /// `[batch, m, k] x [batch, k, n]`.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    MatMul(Var, Var, MatMulKind),
    Transpose(Var),
    Reshape(Var),
    /// `out[map[i]] += scale * x[i]`.
    Reduce { x: Var, map: Vec<usize>, scale: f64 },
    LogSumExp(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    TemporalConv { x: Var, w: Var, stride: usize, pad: usize },
    Gather { x: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    Standardize { x: Var, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Autodiff tape. Nodes are appended in evaluation order, which is also a
/// valid topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient of `var`.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Vars that received a gradient.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| Var(i))
    }
}

fn suffix_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if !a.shape().ends_with(b.shape()) || b.is_empty() {
        return Err(TensorError::shape(
            op,
            format!(
                "rhs {:?} must equal lhs {:?} or a trailing part of it",
                b.shape(),
                a.shape()
            ),
        ));
    }
    Ok(())
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Elementwise `a + b`; `b` may match a trailing part of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        suffix_broadcast("add", ta, tb)?;
        let data = broadcast_map(ta.data(), tb.data(), |x, y| x + y);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        suffix_broadcast("sub", ta, tb)?;
        let data = broadcast_map(ta.data(), tb.data(), |x, y| x - y);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        suffix_broadcast("mul", ta, tb)?;
        let data = broadcast_map(ta.data(), tb.data(), |x, y| x * y);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(Op::Scale(x, c), value, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(Op::Offset(x), value, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(Op::Exp(x), value, rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if let Some(i) = t.data().iter().position(|&v| v <= 0.0) {
            return Err(TensorError::invalid(
                "log",
                format!("non-positive input {} at index {i}", t.data()[i]),
            ));
        }
        let value = t.map(f64::ln);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Log(x), value, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    /// Matrix product.
    ///
    /// Supported layouts: `[.., m, k] x [k, n]` (leading lhs axes act as extra
    /// rows), `[m, k] x [b, k, n]` (lhs shared across the batch) and
    /// `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || {
            TensorError::shape(
                "matmul",
                format!("cannot contract {sa:?} with {sb:?}"),
            )
        };
        let (kind, out_shape) = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 2 => {
                let k = sa[ra - 1];
                if k != sb[0] {
                    return Err(mismatch());
                }
                let m: usize = sa[..ra - 1].iter().product();
                let mut shape = sa[..ra - 1].to_vec();
                shape.push(sb[1]);
                (MatMulKind::Plain { m, k, n: sb[1] }, shape)
            }
            (2, 3) => {
                if sa[1] != sb[1] {
                    return Err(mismatch());
                }
                let (batch, m, k, n) = (sb[0], sa[0], sa[1], sb[2]);
                (MatMulKind::BroadcastLhs { batch, m, k, n }, vec![batch, m, n])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                (MatMulKind::Batched { batch, m, k, n }, vec![batch, m, n])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; out_shape.iter().product()];
        match kind {
            MatMulKind::Plain { m, k, n } => {
                gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false)
            }
            MatMulKind::BroadcastLhs { batch, m, k, n } => {
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        ta.data(),
                        false,
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        false,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        false,
                    );
                }
            }
            MatMulKind::Batched { batch, m, k, n } => {
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        false,
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        false,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b, kind), value, rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(TensorError::shape(
                "transpose",
                format!("expected rank 2, got {:?}", t.shape()),
            ));
        }
        let value = transpose2(t);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    fn reduce(
        &mut self,
        op: &'static str,
        x: Var,
        axes: &[usize],
        mean: bool,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        let shape = t.shape();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(TensorError::shape(
                op,
                format!("axis {bad} out of range for {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(a, _)| !axes.contains(a))
            .map(|(_, &d)| d)
            .collect();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if mean && count == 0 {
            return Err(TensorError::shape(op, "mean over an empty axis".into()));
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let map = reduction_map(shape, axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in t.data().iter().zip(&map) {
            out[o] += v;
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reduce { x, map, scale }, value, rg))
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce("sum_axes", x, axes, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce("mean_axes", x, axes, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce("sum", x, &axes, false)
            .expect("axes are in range by construction")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce("mean", x, &axes, true)
    }

    /// `log(sum(exp(x)))` over the last axis, evaluated with max-subtraction.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| {
            TensorError::shape("logsumexp", "scalar input has no last axis".into())
        })?;
        if n == 0 {
            return Err(TensorError::shape("logsumexp", "empty last axis".into()));
        }
        let out: Vec<f64> = t.data().chunks(n).map(logsumexp_slice).collect();
        let value = Tensor::new(t.shape()[..t.rank() - 1].to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::LogSumExp(x), value, rg))
    }

    /// Scales each row (last axis) to unit L2 norm. An all-zero row maps to
    /// the first basis vector and passes no gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| {
            TensorError::shape("l2_normalize", "scalar input has no last axis".into())
        })?;
        if n == 0 {
            return Err(TensorError::shape("l2_normalize", "empty last axis".into()));
        }
        let mut norms = Vec::with_capacity(t.len() / n);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                out.extend(row.iter().map(|v| v / norm));
            } else {
                out.push(1.0);
                out.extend(std::iter::repeat_n(0.0, n - 1));
            }
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::L2Normalize { x, norms }, value, rg))
    }

    /// Depthwise 1-D convolution along axis 1 of `x: [B, T, V, C]` with
    /// per-channel kernels `w: [C, k]`, zero padding `(k-1)/2` and the given
    /// stride.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 2 || sw[0] != sx[3] {
            return Err(TensorError::shape(
                "temporal_conv",
                format!("input {sx:?} (want [B,T,V,C]) vs kernel {sw:?} (want [C,k])"),
            ));
        }
        let k = sw[1];
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::shape(
                "temporal_conv",
                format!("kernel size {k} must be odd and stride {stride} positive"),
            ));
        }
        let (b, t, v, c) = (sx[0], sx[1], sx[2], sx[3]);
        let pad = (k - 1) / 2;
        if t + 2 * pad < k {
            return Err(TensorError::shape(
                "temporal_conv",
                format!("sequence length {t} shorter than kernel {k}"),
            ));
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let plane = v * c;
        let mut out = vec![0.0; b * t_out * plane];
        let xd = tx.data();
        let taps = kernel_taps(tw.data(), c, k);
        for bi in 0..b {
            for to in 0..t_out {
                let dst = &mut out[(bi * t_out + to) * plane..(bi * t_out + to + 1) * plane];
                for (j, wj) in taps.chunks_exact(c).enumerate() {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let src = &xd[(bi * t + ti as usize) * plane..(bi * t + ti as usize + 1) * plane];
                    for (d, s) in dst.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                        d.iter_mut().zip(s).zip(wj).for_each(|((o, x), w)| *o += w * x);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, t_out, v, c], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::TemporalConv { x, w, stride, pad }, value, rg))
    }

    /// Picks `index[r][j]` from row `r` of `x: [R, n]`, giving `[R, w]`.
    pub fn gather(&mut self, x: Var, index: &[Vec<usize>]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != index.len() {
            return Err(TensorError::shape(
                "gather",
                format!("input {:?} vs {} index rows", t.shape(), index.len()),
            ));
        }
        let n = t.shape()[1];
        let w = index.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(index.len() * w);
        let mut out = Vec::with_capacity(index.len() * w);
        for (r, row) in index.iter().enumerate() {
            if row.len() != w {
                return Err(TensorError::shape(
                    "gather",
                    format!("index row {r} has {} entries, expected {w}", row.len()),
                ));
            }
            for &j in row {
                if j >= n {
                    return Err(TensorError::shape(
                        "gather",
                        format!("column {j} out of range for width {n}"),
                    ));
                }
                flat.push(j);
                out.push(t.data()[r * n + j]);
            }
        }
        let value = Tensor::new(vec![index.len(), w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Gather { x, index: flat }, value, rg))
    }

    /// Joins rank-2 tensors with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs".into()))?;
        let rows = self.value(*first).shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::shape(
                    "concat",
                    format!("part shape {s:?} incompatible with {rows} rows"),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), value, rg))
    }

    /// Column-wise standardization of `x: [N, C]` with batch statistics:
    /// `(x - mean) / sqrt(var + eps)`.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<(Var, ChannelStats), TensorError> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(TensorError::shape(
                "standardize",
                format!("expected non-empty [N, C], got {:?}", t.shape()),
            ));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut mean = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in t.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            for ci in 0..c {
                out.push((row[ci] - mean[ci]) * inv_std[ci]);
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x]);
        let var_out = self.push(Op::Standardize { x, inv_std }, value, rg);
        Ok((var_out, ChannelStats { mean, var, count: n }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Only nodes that require a gradient receive one; contributions from
    /// multiple consumers are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|d| Tensor::new(node.value.shape().to_vec(), d))
                    .transpose()
            })
            .collect::<Result<_, _>>()?;
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    let r = gb.len();
                    for chunk in g.chunks_exact(r.max(1)) {
                        gb.iter_mut().zip(chunk).for_each(|(p, y)| *p += sign * y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let r = db.len().max(1);
                acc(*a, &mut |ga| {
                    for (dst, gs) in ga.chunks_exact_mut(r).zip(g.chunks_exact(r)) {
                        dst.iter_mut().zip(gs).zip(db).for_each(|((p, y), w)| *p += y * w);
                    }
                });
                acc(*b, &mut |gb| {
                    for (gs, xs) in g.chunks_exact(r).zip(da.chunks_exact(r)) {
                        gb.iter_mut().zip(gs).zip(xs).for_each(|((p, y), x)| *p += y * x);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, y)| *p += c * y)),
            Op::Offset(x) | Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, y)| *p += y))
            }
            Op::Exp(x) => {
                let out = node.value.data();
                acc(*x, &mut |gx| {
                    for ((p, y), o) in gx.iter_mut().zip(g).zip(out) {
                        *p += y * o;
                    }
                })
            }
            Op::Log(x) => {
                let input = val(*x);
                acc(*x, &mut |gx| {
                    for ((p, y), v) in gx.iter_mut().zip(g).zip(input) {
                        *p += y / v;
                    }
                })
            }
            Op::Relu(x) => {
                let input = val(*x);
                acc(*x, &mut |gx| {
                    for ((p, y), v) in gx.iter_mut().zip(g).zip(input) {
                        if *v > 0.0 {
                            *p += y;
                        }
                    }
                })
            }
            Op::MatMul(a, b, kind) => {
                let (da, db) = (val(*a), val(*b));
                match *kind {
                    MatMulKind::Plain { m, k, n } => {
                        // dA = dC * B^T, dB = A^T * dC
                        acc(*a, &mut |ga| gemm(m, n, k, g, false, db, true, ga, true));
                        acc(*b, &mut |gb| gemm(k, m, n, da, true, g, false, gb, true));
                    }
                    MatMulKind::BroadcastLhs { batch, m, k, n } => {
                        acc(*a, &mut |ga| {
                            for bi in 0..batch {
                                let gs = &g[bi * m * n..(bi + 1) * m * n];
                                let bs = &db[bi * k * n..(bi + 1) * k * n];
                                gemm(m, n, k, gs, false, bs, true, ga, true);
                            }
                        });
                        acc(*b, &mut |gb| {
                            for bi in 0..batch {
                                let gs = &g[bi * m * n..(bi + 1) * m * n];
                                let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                                gemm(k, m, n, da, true, gs, false, dst, true);
                            }
                        });
                    }
                    MatMulKind::Batched { batch, m, k, n } => {
                        acc(*a, &mut |ga| {
                            for bi in 0..batch {
                                let gs = &g[bi * m * n..(bi + 1) * m * n];
                                let bs = &db[bi * k * n..(bi + 1) * k * n];
                                let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                                gemm(m, n, k, gs, false, bs, true, dst, true);
                            }
                        });
                        acc(*b, &mut |gb| {
                            for bi in 0..batch {
                                let gs = &g[bi * m * n..(bi + 1) * m * n];
                                let as_ = &da[bi * m * k..(bi + 1) * m * k];
                                let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                                gemm(k, m, n, as_, true, gs, false, dst, true);
                            }
                        });
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (rows, cols) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[c * rows + r] += g[r * cols + c];
                        }
                    }
                })
            }
            Op::Reduce { x, map, scale } => acc(*x, &mut |gx| {
                for (p, &o) in gx.iter_mut().zip(map) {
                    *p += scale * g[o];
                }
            }),
            Op::LogSumExp(x) => {
                let input = val(*x);
                let out = node.value.data();
                let n = input.len() / out.len();
                acc(*x, &mut |gx| {
                    for (r, (row, dst)) in input.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                        for (p, v) in dst.iter_mut().zip(row) {
                            *p += g[r] * (v - out[r]).exp();
                        }
                    }
                })
            }
            Op::L2Normalize { x, norms } => {
                let out = node.value.data();
                let n = out.len() / norms.len();
                acc(*x, &mut |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm <= 0.0 {
                            continue;
                        }
                        let y = &out[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += (gy[j] - y[j] * dot) / norm;
                        }
                    }
                })
            }
            Op::TemporalConv { x, w, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let sx = self.nodes[x.0].value.shape();
                let (b, t, v, c) = (sx[0], sx[1], sx[2], sx[3]);
                let k = self.nodes[w.0].value.shape()[1];
                let t_out = node.value.shape()[1];
                let plane = v * c;
                let (dx, dw) = (val(*x), val(*w));
                let taps = |to: usize, j: usize| -> Option<usize> {
                    let ti = (to * stride + j) as isize - pad as isize;
                    (ti >= 0 && ti < t as isize).then_some(ti as usize)
                };
                if wants(*x) {
                    let wt = kernel_taps(dw, c, k);
                    acc(*x, &mut |gx| {
                        for bi in 0..b {
                            for to in 0..t_out {
                                let go = &g[(bi * t_out + to) * plane..(bi * t_out + to + 1) * plane];
                                for (j, wj) in wt.chunks_exact(c).enumerate() {
                                    let Some(ti) = taps(to, j) else { continue };
                                    let dst = &mut gx[(bi * t + ti) * plane..(bi * t + ti + 1) * plane];
                                    for (d, s) in dst.chunks_exact_mut(c).zip(go.chunks_exact(c)) {
                                        d.iter_mut().zip(s).zip(wj).for_each(|((o, y), w)| *o += w * y);
                                    }
                                }
                            }
                        }
                    });
                }
                acc(*w, &mut |gw| {
                    // accumulate tap-major, then scatter into the [C, k] layout
                    let mut gt = vec![0.0; k * c];
                    for bi in 0..b {
                        for to in 0..t_out {
                            let go = &g[(bi * t_out + to) * plane..(bi * t_out + to + 1) * plane];
                            for (j, gj) in gt.chunks_exact_mut(c).enumerate() {
                                let Some(ti) = taps(to, j) else { continue };
                                let src = &dx[(bi * t + ti) * plane..(bi * t + ti + 1) * plane];
                                for (gs, xs) in go.chunks_exact(c).zip(src.chunks_exact(c)) {
                                    gj.iter_mut().zip(gs).zip(xs).for_each(|((o, y), x)| *o += y * x);
                                }
                            }
                        }
                    }
                    for j in 0..k {
                        for ci in 0..c {
                            gw[ci * k + j] += gt[j * c + ci];
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                let n = self.nodes[x.0].value.shape()[1];
                let w = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    for (pos, &j) in index.iter().enumerate() {
                        let r = if w == 0 { 0 } else { pos / w };
                        gx[r * n + j] += g[pos];
                    }
                })
            }
            Op::Concat(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Standardize { x, inv_std } => {
                let y = node.value.data();
                let c = inv_std.len();
                let n = y.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gy = vec![0.0; c];
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    for ci in 0..c {
                        sum_g[ci] += gr[ci];
                        sum_gy[ci] += gr[ci] * yr[ci];
                    }
                }
                let nf = n as f64;
                acc(*x, &mut |gx| {
                    for ((dst, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        for ci in 0..c {
                            dst[ci] += inv_std[ci] / nf
                                * (nf * gr[ci] - sum_g[ci] - yr[ci] * sum_gy[ci]);
                        }
                    }
                })
            }
        }
    }
}

pub(crate) fn logsumexp_slice(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn transpose2(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = t.data()[r * cols + c];
        }
    }
    Tensor::new(vec![cols, rows], out).expect("transpose preserves element count")
}

/// `a op b` where `b` repeats over the leading axes of `a`.
fn broadcast_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    if b.is_empty() {
        return out;
    }
    for chunk in a.chunks_exact(b.len()) {
        out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
    }
    out
}

/// Depthwise kernel `[C, k]` rearranged tap-major as `[k, C]`.
fn kernel_taps(w: &[f64], c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    for ci in 0..c {
        for j in 0..k {
            out[j * c + ci] = w[ci * k + j];
        }
    }
    out
}
