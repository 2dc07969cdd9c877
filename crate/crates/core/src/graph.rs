//! Reverse-mode automatic differentiation over a flat expression tape.
//!
//! Every operation evaluates eagerly and records a node holding its value,
//! its operation tag and its parent ids. Nodes are created in topological
//! order, so `backward` is a single reverse sweep over the tape. Gradients
//! are accumulated only into nodes that (transitively) require them, which
//! is how frozen parameters drop out of training stages.
//!
//! The operation set is exactly what the compression pipeline needs; each
//! forward has a hand-written backward, and all of them are covered by
//! central-difference checks in the tests below.

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// a + b with rank-1 b broadcast along `axis` of a.
    AddBias { axis: usize },
    /// a + b with b's shape equal to a trailing suffix of a's shape.
    AddSuffix,
    /// a [.., m, k] times b; b is [k, n] (rank 2, broadcast over batch)
    /// or has the same batch dims as a. `transpose_b` treats b as [n, k].
    MatMul { transpose_b: bool },
    Conv2d { stride: usize, pad: usize },
    /// Transposed convolution, exact adjoint of Conv2d with the same
    /// stride/pad. Weight layout [Cin, Cout, kh, kw].
    ConvT2d { stride: usize, pad: usize },
    UpsampleNearest { factor: usize },
    GroupNorm { groups: usize, eps: f64 },
    LayerNorm { eps: f64 },
    Silu,
    Tanh,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Straight-through estimator: forward is parents[1] (the quantized
    /// value), backward passes the gradient unchanged to parents[0] (the
    /// pre-quantized input) and nothing to parents[1].
    Ste,
    /// Pairwise squared distances between tokens [B, L, C] and a codebook
    /// [K, C], clamped at zero.
    SqDist,
    /// Row gather from a [K, C] matrix.
    Gather { indices: Vec<usize> },
    /// Token-axis row selection on [B, L, C]; `None` rows are zero.
    SelectTokens { sources: Vec<Option<usize>> },
    /// Concatenation of [B, l_i, C] parents along the token axis.
    ConcatTokens { lens: Vec<usize> },
    SliceTokens { start: usize, len: usize },
    Reshape,
    Permute { axes: Vec<usize> },
    MeanAll,
    SumAll,
    /// -sum(p * log_q) over all elements; parents (p, log_q).
    CrossEntropy,
    /// mean((a - b)^2) over all elements.
    Mse,
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<NodeId>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by NodeId.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<NodeId>) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ---- Node constructors ----

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: vec![],
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Identity forward, blocks all gradient flow.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGrad,
            parents: vec![a],
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = elementwise(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = elementwise(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = elementwise(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x *= c;
        }
        self.push(v, Op::Scale(c), vec![a])
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(bias);
        if axis >= av.rank() || bv.rank() != 1 || bv.shape()[0] != av.shape()[axis] {
            return Err(Error::shape(format!(
                "add_bias: a {:?} axis {} bias {:?}",
                av.shape(),
                axis,
                bv.shape()
            )));
        }
        let mut v = av.clone();
        let shape = v.shape().to_vec();
        let bdat = bv.data().to_vec();
        for_each_lane(&shape, axis, |base, stride| {
            let d = v.data_mut();
            for (j, bj) in bdat.iter().enumerate() {
                d[base + j * stride] += bj;
            }
        });
        Ok(self.push(v, Op::AddBias { axis }, vec![a, bias]))
    }

    pub fn add_suffix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ar, br) = (av.rank(), bv.rank());
        if br > ar || av.shape()[ar - br..] != *bv.shape() {
            return Err(Error::shape(format!(
                "add_suffix: a {:?} b {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = bv.numel();
        let mut v = av.clone();
        let bdat = bv.data().to_vec();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bdat[i % n];
        }
        Ok(self.push(v, Op::AddSuffix, vec![a, b]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// a times b-transposed: b is stored [n, k].
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let v = matmul_fwd(self.value(a), self.value(b), transpose_b)?;
        Ok(self.push(v, Op::MatMul { transpose_b }, vec![a, b]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = conv_fwd(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(v, Op::Conv2d { stride, pad }, vec![x, w]))
    }

    pub fn conv_t2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = convt_fwd(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(v, Op::ConvT2d { stride, pad }, vec![x, w]))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::contract("upsample factor must be positive"));
        }
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv, "upsample_nearest input")?;
        let mut out = Tensor::zeros(&[b, c, h * factor, w * factor]);
        {
            let xd = xv.data();
            let od = out.data_mut();
            let (oh, ow) = (h * factor, w * factor);
            for bc in 0..b * c {
                let ib = bc * h * w;
                let ob = bc * oh * ow;
                for y in 0..oh {
                    let iy = y / factor;
                    for xcol in 0..ow {
                        od[ob + y * ow + xcol] = xd[ib + iy * w + xcol / factor];
                    }
                }
            }
        }
        Ok(self.push(out, Op::UpsampleNearest { factor }, vec![x]))
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv, "group_norm input")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("group_norm: gamma/beta must have shape [C]"));
        }
        let cg = c / groups;
        let hw = h * w;
        let n = cg * hw;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        {
            let xd = xv.data();
            let gd = gv.data().to_vec();
            let bd = bv.data().to_vec();
            let od = out.data_mut();
            for bb in 0..b {
                for g in 0..groups {
                    let base = bb * c * hw + g * n;
                    let slice = &xd[base..base + n];
                    let mean = slice.iter().sum::<f64>() / n as f64;
                    let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for e in 0..n {
                        let ch = g * cg + e / hw;
                        od[base + e] = gd[ch] * (slice[e] - mean) * inv + bd[ch];
                    }
                }
            }
        }
        Ok(self.push(out, Op::GroupNorm { groups, eps }, vec![x, gamma, beta]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::shape("layer_norm: input must have rank >= 1"));
        }
        let d = *xv.shape().last().unwrap();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm: gamma/beta must have shape [D]"));
        }
        let rows = xv.numel() / d;
        let mut out = Tensor::zeros(xv.shape());
        {
            let xd = xv.data();
            let gd = gv.data().to_vec();
            let bd = bv.data().to_vec();
            let od = out.data_mut();
            for r in 0..rows {
                let base = r * d;
                let row = &xd[base..base + d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for e in 0..d {
                    od[base + e] = gd[e] * (row[e] - mean) * inv + bd[e];
                }
            }
        }
        Ok(self.push(out, Op::LayerNorm { eps }, vec![x, gamma, beta]))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e *= sigmoid(*e);
        }
        self.push(v, Op::Silu, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e = e.tanh();
        }
        self.push(v, Op::Tanh, vec![x])
    }

    /// Softmax along `axis`. Entries of -inf are treated as masked out and
    /// get probability zero; a fully masked row is a contract error.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("softmax: axis out of range"));
        }
        let shape = xv.shape().to_vec();
        let mut out = xv.clone();
        let mut bad = false;
        for_each_lane(&shape, axis, |base, stride| {
            let d = out.data_mut();
            let len = shape[axis];
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(d[base + j * stride]);
            }
            if !m.is_finite() {
                bad = true;
                return;
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (d[base + j * stride] - m).exp();
                d[base + j * stride] = e;
                sum += e;
            }
            for j in 0..len {
                d[base + j * stride] /= sum;
            }
        });
        if bad {
            return Err(Error::contract("softmax: fully masked row"));
        }
        Ok(self.push(out, Op::Softmax { axis }, vec![x]))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("log_softmax: axis out of range"));
        }
        let shape = xv.shape().to_vec();
        let mut out = xv.clone();
        let mut bad = false;
        for_each_lane(&shape, axis, |base, stride| {
            let d = out.data_mut();
            let len = shape[axis];
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(d[base + j * stride]);
            }
            if !m.is_finite() {
                bad = true;
                return;
            }
            let mut sum = 0.0;
            for j in 0..len {
                sum += (d[base + j * stride] - m).exp();
            }
            let lse = m + sum.ln();
            for j in 0..len {
                d[base + j * stride] -= lse;
            }
        });
        if bad {
            return Err(Error::contract("log_softmax: fully masked row"));
        }
        Ok(self.push(out, Op::LogSoftmax { axis }, vec![x]))
    }

    /// Straight-through quantization: the forward value is `quantized`
    /// bit-exactly; the backward gradient flows entirely to `pre`.
    pub fn ste(&mut self, pre: NodeId, quantized: NodeId) -> Result<NodeId> {
        let pv = self.value(pre);
        let qv = self.value(quantized);
        if pv.shape() != qv.shape() {
            return Err(Error::shape(format!(
                "ste: {:?} vs {:?}",
                pv.shape(),
                qv.shape()
            )));
        }
        let v = qv.clone();
        Ok(self.push(v, Op::Ste, vec![pre, quantized]))
    }

    /// d[b, l, k] = ||y[b, l, :] - cb[k, :]||^2, clamped at zero.
    pub fn sq_dist(&mut self, y: NodeId, cb: NodeId) -> Result<NodeId> {
        let yv = self.value(y);
        let cv = self.value(cb);
        let (b, l, c) = dims3(yv, "sq_dist tokens")?;
        let (k, c2) = dims2(cv, "sq_dist codebook")?;
        if c != c2 {
            return Err(Error::shape(format!(
                "sq_dist: token dim {c} vs codebook dim {c2}"
            )));
        }
        let mut out = Tensor::zeros(&[b, l, k]);
        {
            let yd = yv.data();
            let cd = cv.data();
            let od = out.data_mut();
            let mut cnorm = vec![0.0; k];
            for kk in 0..k {
                cnorm[kk] = cd[kk * c..(kk + 1) * c].iter().map(|v| v * v).sum();
            }
            for t in 0..b * l {
                let yrow = &yd[t * c..(t + 1) * c];
                let ynorm: f64 = yrow.iter().map(|v| v * v).sum();
                for kk in 0..k {
                    let crow = &cd[kk * c..(kk + 1) * c];
                    let dot: f64 = yrow.iter().zip(crow).map(|(a, b)| a * b).sum();
                    od[t * k + kk] = (ynorm + cnorm[kk] - 2.0 * dot).max(0.0);
                }
            }
        }
        Ok(self.push(out, Op::SqDist, vec![y, cb]))
    }

    pub fn gather_rows(&mut self, cb: NodeId, indices: &[usize]) -> Result<NodeId> {
        let cv = self.value(cb);
        let (k, c) = dims2(cv, "gather_rows source")?;
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {k} rows"
            )));
        }
        let mut out = Tensor::zeros(&[indices.len(), c]);
        {
            let cd = cv.data();
            let od = out.data_mut();
            for (m, &i) in indices.iter().enumerate() {
                od[m * c..(m + 1) * c].copy_from_slice(&cd[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            out,
            Op::Gather {
                indices: indices.to_vec(),
            },
            vec![cb],
        ))
    }

    /// out[b, m, :] = x[b, sources[m], :], or zeros where sources[m] is None.
    pub fn select_tokens(&mut self, x: NodeId, sources: &[Option<usize>]) -> Result<NodeId> {
        let xv = self.value(x);
        let (b, l, c) = dims3(xv, "select_tokens input")?;
        if let Some(bad) = sources.iter().flatten().find(|&&t| t >= l) {
            return Err(Error::contract(format!(
                "select_tokens: source {bad} out of range for {l} tokens"
            )));
        }
        let m = sources.len();
        let mut out = Tensor::zeros(&[b, m, c]);
        {
            let xd = xv.data();
            let od = out.data_mut();
            for bb in 0..b {
                for (j, src) in sources.iter().enumerate() {
                    if let Some(t) = src {
                        let from = (bb * l + t) * c;
                        let to = (bb * m + j) * c;
                        od[to..to + c].copy_from_slice(&xd[from..from + c]);
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::SelectTokens {
                sources: sources.to_vec(),
            },
            vec![x],
        ))
    }

    pub fn concat_tokens(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_tokens: no inputs"));
        }
        let (b, _, c) = dims3(self.value(parts[0]), "concat_tokens input")?;
        let mut lens = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (pb, pl, pc) = dims3(self.value(p), "concat_tokens input")?;
            if pb != b || pc != c {
                return Err(Error::shape("concat_tokens: batch/channel mismatch"));
            }
            lens.push(pl);
            total += pl;
        }
        let mut out = Tensor::zeros(&[b, total, c]);
        {
            let od = out.data_mut();
            for bb in 0..b {
                let mut at = 0usize;
                for (&p, &pl) in parts.iter().zip(&lens) {
                    let pd = self.nodes[p.0].value.data();
                    let from = bb * pl * c;
                    let to = (bb * total + at) * c;
                    od[to..to + pl * c].copy_from_slice(&pd[from..from + pl * c]);
                    at += pl;
                }
            }
        }
        Ok(self.push(out, Op::ConcatTokens { lens }, parts.to_vec()))
    }

    pub fn slice_tokens(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (b, l, c) = dims3(xv, "slice_tokens input")?;
        if start + len > l {
            return Err(Error::shape(format!(
                "slice_tokens: [{start}, {}) out of range for {l} tokens",
                start + len
            )));
        }
        let mut out = Tensor::zeros(&[b, len, c]);
        {
            let xd = xv.data();
            let od = out.data_mut();
            for bb in 0..b {
                let from = (bb * l + start) * c;
                let to = bb * len * c;
                od[to..to + len * c].copy_from_slice(&xd[from..from + len * c]);
            }
        }
        Ok(self.push(out, Op::SliceTokens { start, len }, vec![x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape, vec![x]))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let v = permute_fwd(xv, axes)?;
        Ok(self.push(
            v,
            Op::Permute {
                axes: axes.to_vec(),
            },
            vec![x],
        ))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.numel() as f64;
        let v = Tensor::scalar(xv.data().iter().sum::<f64>() / n);
        self.push(v, Op::MeanAll, vec![x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.data().iter().sum::<f64>());
        self.push(v, Op::SumAll, vec![x])
    }

    /// -sum(p * log_q), summed over every element.
    pub fn cross_entropy(&mut self, p: NodeId, log_q: NodeId) -> Result<NodeId> {
        let pv = self.value(p);
        let qv = self.value(log_q);
        if pv.shape() != qv.shape() {
            return Err(Error::shape(format!(
                "cross_entropy: p {:?} vs log_q {:?}",
                pv.shape(),
                qv.shape()
            )));
        }
        let s: f64 = pv
            .data()
            .iter()
            .zip(qv.data())
            .map(|(a, b)| if *a == 0.0 { 0.0 } else { a * b })
            .sum();
        Ok(self.push(Tensor::scalar(-s), Op::CrossEntropy, vec![p, log_q]))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "mse: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = av.numel() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse, vec![a, b]))
    }

    // ---- Backward ----

    /// Reverse sweep from a scalar root. Returns per-node gradients for all
    /// nodes that require them.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let parents = &node.parents;
        let want = |p: &NodeId| self.nodes[p.0].needs_grad;
        let acc = |p: NodeId, t: Tensor, grads: &mut [Option<Tensor>]| {
            match &mut grads[p.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Ste => {
                if want(&parents[0]) {
                    acc(parents[0], g.clone(), grads);
                }
            }
            Op::Add => {
                for &p in parents {
                    if want(&p) {
                        acc(p, g.clone(), grads);
                    }
                }
            }
            Op::Sub => {
                if want(&parents[0]) {
                    acc(parents[0], g.clone(), grads);
                }
                if want(&parents[1]) {
                    let mut t = g.clone();
                    for v in t.data_mut() {
                        *v = -*v;
                    }
                    acc(parents[1], t, grads);
                }
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                if want(&a) {
                    let t = elementwise(g, self.value(b), "mul-bwd", |x, y| x * y)?;
                    acc(a, t, grads);
                }
                if want(&b) {
                    let t = elementwise(g, self.value(a), "mul-bwd", |x, y| x * y)?;
                    acc(b, t, grads);
                }
            }
            Op::Scale(c) => {
                if want(&parents[0]) {
                    let mut t = g.clone();
                    for v in t.data_mut() {
                        *v *= c;
                    }
                    acc(parents[0], t, grads);
                }
            }
            Op::AddBias { axis } => {
                if want(&parents[0]) {
                    acc(parents[0], g.clone(), grads);
                }
                if want(&parents[1]) {
                    let shape = g.shape().to_vec();
                    let len = shape[*axis];
                    let mut gb = Tensor::zeros(&[len]);
                    for_each_lane(&shape, *axis, |base, stride| {
                        let d = gb.data_mut();
                        for (j, dj) in d.iter_mut().enumerate().take(len) {
                            *dj += g.data()[base + j * stride];
                        }
                    });
                    acc(parents[1], gb, grads);
                }
            }
            Op::AddSuffix => {
                if want(&parents[0]) {
                    acc(parents[0], g.clone(), grads);
                }
                if want(&parents[1]) {
                    let bshape = self.value(parents[1]).shape().to_vec();
                    let n: usize = bshape.iter().product();
                    let mut gb = Tensor::zeros(&bshape);
                    let d = gb.data_mut();
                    for (i, v) in g.data().iter().enumerate() {
                        d[i % n] += v;
                    }
                    acc(parents[1], gb, grads);
                }
            }
            Op::MatMul { transpose_b } => {
                let (a, b) = (parents[0], parents[1]);
                let (ga, gb) = matmul_bwd(
                    self.value(a),
                    self.value(b),
                    g,
                    *transpose_b,
                    want(&a),
                    want(&b),
                )?;
                if let Some(t) = ga {
                    acc(a, t, grads);
                }
                if let Some(t) = gb {
                    acc(b, t, grads);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (parents[0], parents[1]);
                let ws = self.value(w).shape().to_vec();
                if want(&x) {
                    let xs = self.value(x).shape();
                    let t = conv_bwd_input(g, self.value(w), *stride, *pad, xs[2], xs[3])?;
                    acc(x, t, grads);
                }
                if want(&w) {
                    let t = conv_bwd_weight(self.value(x), g, *stride, *pad, ws[2], ws[3])?;
                    acc(w, t, grads);
                }
            }
            Op::ConvT2d { stride, pad } => {
                let (x, w) = (parents[0], parents[1]);
                let ws = self.value(w).shape().to_vec();
                if want(&x) {
                    let t = conv_fwd(g, self.value(w), *stride, *pad)?;
                    acc(x, t, grads);
                }
                if want(&w) {
                    // Same contraction as the conv weight gradient with the
                    // roles of input and output swapped.
                    let t = conv_bwd_weight(g, self.value(x), *stride, *pad, ws[2], ws[3])?;
                    acc(w, t, grads);
                }
            }
            Op::UpsampleNearest { factor } => {
                if want(&parents[0]) {
                    let xs = self.value(parents[0]).shape();
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let f = *factor;
                    let (oh, ow) = (h * f, w * f);
                    let mut gx = Tensor::zeros(&[b, c, h, w]);
                    let d = gx.data_mut();
                    let gd = g.data();
                    for bc in 0..b * c {
                        let ib = bc * h * w;
                        let ob = bc * oh * ow;
                        for y in 0..oh {
                            let iy = y / f;
                            for xcol in 0..ow {
                                d[ib + iy * w + xcol / f] += gd[ob + y * ow + xcol];
                            }
                        }
                    }
                    acc(parents[0], gx, grads);
                }
            }
            Op::GroupNorm { groups, eps } => {
                let (x, gamma, beta) = (parents[0], parents[1], parents[2]);
                let (gx, gg, gb) = norm_bwd(
                    self.value(x),
                    self.value(gamma),
                    g,
                    *groups,
                    *eps,
                    true,
                    want(&x),
                    want(&gamma),
                    want(&beta),
                )?;
                if let Some(t) = gx {
                    acc(x, t, grads);
                }
                if let Some(t) = gg {
                    acc(gamma, t, grads);
                }
                if let Some(t) = gb {
                    acc(beta, t, grads);
                }
            }
            Op::LayerNorm { eps } => {
                let (x, gamma, beta) = (parents[0], parents[1], parents[2]);
                let (gx, gg, gb) = norm_bwd(
                    self.value(x),
                    self.value(gamma),
                    g,
                    0,
                    *eps,
                    false,
                    want(&x),
                    want(&gamma),
                    want(&beta),
                )?;
                if let Some(t) = gx {
                    acc(x, t, grads);
                }
                if let Some(t) = gg {
                    acc(gamma, t, grads);
                }
                if let Some(t) = gb {
                    acc(beta, t, grads);
                }
            }
            Op::Silu => {
                if want(&parents[0]) {
                    let xv = self.value(parents[0]);
                    let mut t = g.clone();
                    for (gv, xv) in t.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(*xv);
                        *gv *= s * (1.0 + xv * (1.0 - s));
                    }
                    acc(parents[0], t, grads);
                }
            }
            Op::Tanh => {
                if want(&parents[0]) {
                    let yv = &node.value;
                    let mut t = g.clone();
                    for (gv, y) in t.data_mut().iter_mut().zip(yv.data()) {
                        *gv *= 1.0 - y * y;
                    }
                    acc(parents[0], t, grads);
                }
            }
            Op::Softmax { axis } => {
                if want(&parents[0]) {
                    let y = &node.value;
                    let shape = y.shape().to_vec();
                    let len = shape[*axis];
                    let mut gx = g.clone();
                    for_each_lane(&shape, *axis, |base, stride| {
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += gx.data()[base + j * stride] * y.data()[base + j * stride];
                        }
                        let d = gx.data_mut();
                        for j in 0..len {
                            let o = base + j * stride;
                            d[o] = y.data()[o] * (d[o] - dot);
                        }
                    });
                    acc(parents[0], gx, grads);
                }
            }
            Op::LogSoftmax { axis } => {
                if want(&parents[0]) {
                    let y = &node.value;
                    let shape = y.shape().to_vec();
                    let len = shape[*axis];
                    let mut gx = g.clone();
                    for_each_lane(&shape, *axis, |base, stride| {
                        let mut sum = 0.0;
                        for j in 0..len {
                            sum += gx.data()[base + j * stride];
                        }
                        let d = gx.data_mut();
                        for j in 0..len {
                            let o = base + j * stride;
                            d[o] -= y.data()[o].exp() * sum;
                        }
                    });
                    acc(parents[0], gx, grads);
                }
            }
            Op::SqDist => {
                let (y, cb) = (parents[0], parents[1]);
                let yv = self.value(y);
                let cv = self.value(cb);
                let d = &node.value;
                let (b, l, c) = (yv.shape()[0], yv.shape()[1], yv.shape()[2]);
                let k = cv.shape()[0];
                let mut gy = if want(&y) {
                    Some(Tensor::zeros(&[b, l, c]))
                } else {
                    None
                };
                let mut gc = if want(&cb) {
                    Some(Tensor::zeros(&[k, c]))
                } else {
                    None
                };
                let yd = yv.data();
                let cd = cv.data();
                for t in 0..b * l {
                    for kk in 0..k {
                        if d.data()[t * k + kk] == 0.0 {
                            continue;
                        }
                        let gv = g.data()[t * k + kk];
                        if gv == 0.0 {
                            continue;
                        }
                        for cc in 0..c {
                            let diff = yd[t * c + cc] - cd[kk * c + cc];
                            if let Some(gy) = gy.as_mut() {
                                gy.data_mut()[t * c + cc] += 2.0 * gv * diff;
                            }
                            if let Some(gc) = gc.as_mut() {
                                gc.data_mut()[kk * c + cc] -= 2.0 * gv * diff;
                            }
                        }
                    }
                }
                if let Some(t) = gy {
                    acc(y, t, grads);
                }
                if let Some(t) = gc {
                    acc(cb, t, grads);
                }
            }
            Op::Gather { indices } => {
                if want(&parents[0]) {
                    let cv = self.value(parents[0]);
                    let (k, c) = (cv.shape()[0], cv.shape()[1]);
                    let mut gc = Tensor::zeros(&[k, c]);
                    let d = gc.data_mut();
                    for (m, &idx) in indices.iter().enumerate() {
                        for cc in 0..c {
                            d[idx * c + cc] += g.data()[m * c + cc];
                        }
                    }
                    acc(parents[0], gc, grads);
                }
            }
            Op::SelectTokens { sources } => {
                if want(&parents[0]) {
                    let xv = self.value(parents[0]);
                    let (b, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let m = sources.len();
                    let mut gx = Tensor::zeros(&[b, l, c]);
                    let d = gx.data_mut();
                    for bb in 0..b {
                        for (j, src) in sources.iter().enumerate() {
                            if let Some(t) = src {
                                let to = (bb * l + t) * c;
                                let from = (bb * m + j) * c;
                                for cc in 0..c {
                                    d[to + cc] += g.data()[from + cc];
                                }
                            }
                        }
                    }
                    acc(parents[0], gx, grads);
                }
            }
            Op::ConcatTokens { lens } => {
                let total: usize = lens.iter().sum();
                let c = *node.value.shape().last().unwrap();
                let b = node.value.shape()[0];
                let mut at = 0usize;
                for (pi, &p) in parents.iter().enumerate() {
                    let pl = lens[pi];
                    if want(&p) {
                        let mut gp = Tensor::zeros(&[b, pl, c]);
                        let d = gp.data_mut();
                        for bb in 0..b {
                            let from = (bb * total + at) * c;
                            let to = bb * pl * c;
                            d[to..to + pl * c].copy_from_slice(&g.data()[from..from + pl * c]);
                        }
                        acc(p, gp, grads);
                    }
                    at += pl;
                }
            }
            Op::SliceTokens { start, len } => {
                if want(&parents[0]) {
                    let xv = self.value(parents[0]);
                    let (b, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let mut gx = Tensor::zeros(&[b, l, c]);
                    let d = gx.data_mut();
                    for bb in 0..b {
                        let to = (bb * l + start) * c;
                        let from = bb * len * c;
                        d[to..to + len * c].copy_from_slice(&g.data()[from..from + len * c]);
                    }
                    acc(parents[0], gx, grads);
                }
            }
            Op::Reshape => {
                if want(&parents[0]) {
                    let pshape = self.value(parents[0]).shape().to_vec();
                    acc(parents[0], g.reshaped(&pshape)?, grads);
                }
            }
            Op::Permute { axes } => {
                if want(&parents[0]) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    acc(parents[0], permute_fwd(g, &inv)?, grads);
                }
            }
            Op::MeanAll => {
                if want(&parents[0]) {
                    let xv = self.value(parents[0]);
                    let v = g.data()[0] / xv.numel() as f64;
                    acc(parents[0], Tensor::full(xv.shape(), v), grads);
                }
            }
            Op::SumAll => {
                if want(&parents[0]) {
                    let xv = self.value(parents[0]);
                    acc(parents[0], Tensor::full(xv.shape(), g.data()[0]), grads);
                }
            }
            Op::CrossEntropy => {
                let (p, lq) = (parents[0], parents[1]);
                let gv = g.data()[0];
                if want(&p) {
                    let mut t = self.value(lq).clone();
                    for v in t.data_mut() {
                        *v *= -gv;
                    }
                    acc(p, t, grads);
                }
                if want(&lq) {
                    let mut t = self.value(p).clone();
                    for v in t.data_mut() {
                        *v *= -gv;
                    }
                    acc(lq, t, grads);
                }
            }
            Op::Mse => {
                let (a, b) = (parents[0], parents[1]);
                let n = self.value(a).numel() as f64;
                let gv = g.data()[0];
                if want(&a) || want(&b) {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let mut diff = Tensor::zeros(av.shape());
                    for ((d, x), y) in diff.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *d = 2.0 * gv * (x - y) / n;
                    }
                    if want(&b) {
                        let mut neg = diff.clone();
                        for v in neg.data_mut() {
                            *v = -*v;
                        }
                        acc(b, neg, grads);
                    }
                    if want(&a) {
                        acc(a, diff, grads);
                    }
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elementwise(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Calls f(base_offset, stride) once per 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("{what}: expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::shape(format!("{what}: expected rank 3, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::shape(format!("{what}: expected rank 4, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]))
}

// ---- MatMul kernels ----

fn matmul_fwd(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    if a.rank() < 2 {
        return Err(Error::shape("matmul: lhs must have rank >= 2"));
    }
    let ar = a.rank();
    let (m, ka) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let (kb, n, b_batched) = matmul_b_dims(a, b, transpose_b)?;
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul: inner dims {ka} vs {kb} (lhs {:?}, rhs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out_shape = a.shape()[..ar - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = Tensor::zeros(&out_shape);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for t in 0..batch {
        let ab = t * m * ka;
        let bb = if b_batched { t * kb * n } else { 0 };
        let ob = t * m * n;
        mm_accum(
            &ad[ab..ab + m * ka],
            &bd[bb..bb + kb * n],
            &mut od[ob..ob + m * n],
            m,
            ka,
            n,
            transpose_b,
        );
    }
    Ok(out)
}

fn matmul_b_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, bool)> {
    let br = b.rank();
    let (d0, d1) = if br == 2 {
        (b.shape()[0], b.shape()[1])
    } else if br == a.rank() && b.shape()[..br - 2] == a.shape()[..br - 2] {
        (b.shape()[br - 2], b.shape()[br - 1])
    } else {
        return Err(Error::shape(format!(
            "matmul: rhs {:?} incompatible with lhs {:?}",
            b.shape(),
            a.shape()
        )));
    };
    let (k, n) = if transpose_b { (d1, d0) } else { (d0, d1) };
    Ok((k, n, br != 2))
}

/// out[m, n] += A[m, k] * B, with B stored [k, n] or (transposed) [n, k].
fn mm_accum(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, tb: bool) {
    if tb {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                out[i * n + j] += dot;
            }
        }
    } else {
        for i in 0..m {
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out[k, n] += A^T[k, m] * G[m, n], i.e. out[l, j] += sum_i A[i, l] G[i, j].
fn mm_at_b(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[allow(clippy::type_complexity)]
fn matmul_bwd(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    tb: bool,
    want_a: bool,
    want_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let ar = a.rank();
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let b_batched = b.rank() != 2;
    let n = *g.shape().last().unwrap();
    let mut ga = if want_a { Some(Tensor::zeros(a.shape())) } else { None };
    let mut gb = if want_b { Some(Tensor::zeros(b.shape())) } else { None };
    let ad = a.data();
    let bd = b.data();
    let gd = g.data();
    for t in 0..batch {
        let ab = t * m * k;
        let bb = if b_batched { t * k * n } else { 0 };
        let ob = t * m * n;
        let gslice = &gd[ob..ob + m * n];
        if let Some(ga) = ga.as_mut() {
            let out = &mut ga.data_mut()[ab..ab + m * k];
            if tb {
                // dA = G * B, with B stored [n, k]
                mm_accum(gslice, &bd[bb..bb + n * k], out, m, n, k, false);
            } else {
                // dA = G * B^T, with B stored [k, n]
                mm_accum(gslice, &bd[bb..bb + k * n], out, m, n, k, true);
            }
        }
        if let Some(gb) = gb.as_mut() {
            if tb {
                // dB[j, l] += sum_i G[i, j] A[i, l]
                let out = &mut gb.data_mut()[bb..bb + n * k];
                mm_at_b(gslice, &ad[ab..ab + m * k], out, m, n, k);
            } else {
                // dB[l, j] += sum_i A[i, l] G[i, j]
                let out = &mut gb.data_mut()[bb..bb + k * n];
                mm_at_b(&ad[ab..ab + m * k], gslice, out, m, k, n);
            }
        }
    }
    Ok((ga, gb))
}

// ---- Convolution kernels ----

fn conv_out_dim(input: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if span < k || stride == 0 {
        return Err(Error::shape(format!(
            "conv: kernel {k} larger than padded input {span} (or zero stride)"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn conv_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, ci, h, wd) = dims4(x, "conv input")?;
    let (co, ci2, kh, kw) = dims4(w, "conv weight")?;
    if ci != ci2 {
        return Err(Error::shape(format!(
            "conv: input channels {ci} vs weight channels {ci2}"
        )));
    }
    let oh = conv_out_dim(h, pad, kh, stride)?;
    let ow = conv_out_dim(wd, pad, kw, stride)?;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    let p = pad as isize;
    for bb in 0..b {
        for o in 0..co {
            let obase = (bb * co + o) * oh * ow;
            for c in 0..ci {
                let wbase = (o * ci + c) * kh * kw;
                let xbase = (bb * ci + c) * h * wd;
                for oy in 0..oh {
                    let iy0 = (oy * stride) as isize - p;
                    for ox in 0..ow {
                        let ix0 = (ox * stride) as isize - p;
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[xrow + ix as usize] * wdat[wrow + kx];
                            }
                        }
                        od[obase + oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_bwd_input(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Result<Tensor> {
    let (b, co, oh, ow) = dims4(gy, "conv grad")?;
    let (co2, ci, kh, kw) = dims4(w, "conv weight")?;
    if co != co2 {
        return Err(Error::shape("conv backward: channel mismatch"));
    }
    let mut gx = Tensor::zeros(&[b, ci, h, wd]);
    let gd = gy.data();
    let wdat = w.data();
    let xd = gx.data_mut();
    let p = pad as isize;
    for bb in 0..b {
        for o in 0..co {
            let obase = (bb * co + o) * oh * ow;
            for c in 0..ci {
                let wbase = (o * ci + c) * kh * kw;
                let xbase = (bb * ci + c) * h * wd;
                for oy in 0..oh {
                    let iy0 = (oy * stride) as isize - p;
                    for ox in 0..ow {
                        let gv = gd[obase + oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * stride) as isize - p;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                xd[xrow + ix as usize] += gv * wdat[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

fn conv_bwd_weight(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor> {
    let (b, ci, h, wd) = dims4(x, "conv input")?;
    let (b2, co, oh, ow) = dims4(gy, "conv grad")?;
    if b != b2 {
        return Err(Error::shape("conv backward: batch mismatch"));
    }
    let mut gw = Tensor::zeros(&[co, ci, kh, kw]);
    let xd = x.data();
    let gd = gy.data();
    let wdat = gw.data_mut();
    let p = pad as isize;
    for bb in 0..b {
        for o in 0..co {
            let obase = (bb * co + o) * oh * ow;
            for c in 0..ci {
                let wbase = (o * ci + c) * kh * kw;
                let xbase = (bb * ci + c) * h * wd;
                for oy in 0..oh {
                    let iy0 = (oy * stride) as isize - p;
                    for ox in 0..ow {
                        let gv = gd[obase + oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * stride) as isize - p;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                wdat[wrow + kx] += gv * xd[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// Transposed conv with weight [Cin, Cout, kh, kw]; spatial output
/// stride*(in-1) + k - 2*pad. Computed as the adjoint of conv_fwd.
fn convt_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, c1x, h, wd) = dims4(x, "conv_t input")?;
    let (c1, _, kh, kw) = dims4(w, "conv_t weight")?;
    if c1x != c1 {
        return Err(Error::shape(format!(
            "conv_t: input channels {c1x} vs weight channels {c1}"
        )));
    }
    let oh = (stride * (h - 1) + kh).checked_sub(2 * pad).ok_or_else(|| {
        Error::shape("conv_t: padding larger than output")
    })?;
    let ow = (stride * (wd - 1) + kw)
        .checked_sub(2 * pad)
        .ok_or_else(|| Error::shape("conv_t: padding larger than output"))?;
    conv_bwd_input(x, w, stride, pad, oh, ow)
}

// ---- Normalization backward (shared by group and layer norm) ----

/// Backward through an affine normalization. For group norm the statistics
/// run over [C/groups, H, W] blocks (contiguous in memory); for layer norm
/// over the trailing dim. `gamma_per_channel` picks the group-norm indexing.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn norm_bwd(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    groups: usize,
    eps: f64,
    gamma_per_channel: bool,
    want_x: bool,
    want_gamma: bool,
    want_beta: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let (block, blocks, hw) = if gamma_per_channel {
        let (b, c, h, w) = dims4(x, "group_norm input")?;
        let cg = c / groups;
        (cg * h * w, b * groups, h * w)
    } else {
        let d = *x.shape().last().unwrap();
        (d, x.numel() / d, 1)
    };
    let gammalen = gamma.numel();
    let mut gx = if want_x { Some(Tensor::zeros(x.shape())) } else { None };
    let mut gg = if want_gamma {
        Some(Tensor::zeros(gamma.shape()))
    } else {
        None
    };
    let mut gb = if want_beta {
        Some(Tensor::zeros(gamma.shape()))
    } else {
        None
    };
    let xd = x.data();
    let gd = g.data();
    let gad = gamma.data();
    let n = block as f64;
    let mut xhat = vec![0.0; block];
    let mut hbuf = vec![0.0; block];
    for blk in 0..blocks {
        let base = blk * block;
        let slice = &xd[base..base + block];
        let mean = slice.iter().sum::<f64>() / n;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let ch_of = |e: usize| -> usize {
            if gamma_per_channel {
                ((blk % groups) * (gammalen / groups)) + e / hw
            } else {
                e
            }
        };
        for e in 0..block {
            xhat[e] = (slice[e] - mean) * inv;
            hbuf[e] = gd[base + e] * gad[ch_of(e)];
        }
        if let Some(gg) = gg.as_mut() {
            let d = gg.data_mut();
            for e in 0..block {
                d[ch_of(e)] += gd[base + e] * xhat[e];
            }
        }
        if let Some(gb) = gb.as_mut() {
            let d = gb.data_mut();
            for e in 0..block {
                d[ch_of(e)] += gd[base + e];
            }
        }
        if let Some(gx) = gx.as_mut() {
            let m1 = hbuf.iter().sum::<f64>() / n;
            let m2 = hbuf.iter().zip(&xhat).map(|(h, xh)| h * xh).sum::<f64>() / n;
            let d = gx.data_mut();
            for e in 0..block {
                d[base + e] = inv * (hbuf[e] - m1 - xhat[e] * m2);
            }
        }
    }
    Ok((gx, gg, gb))
}

fn permute_fwd(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    if axes.len() != r {
        return Err(Error::shape("permute: axes length must match rank"));
    }
    let mut seen = vec![false; r];
    for &a in axes {
        if a >= r || seen[a] {
            return Err(Error::contract("permute: axes must be a permutation"));
        }
        seen[a] = true;
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut out = Tensor::zeros(&out_shape);
    {
        let xd = x.data();
        let od = out.data_mut();
        for (flat, o) in od.iter_mut().enumerate() {
            let mut rem = flat;
            let mut src = 0usize;
            for d in 0..r {
                let idx = rem / out_strides[d];
                rem %= out_strides[d];
                src += idx * in_strides[axes[d]];
            }
            *o = xd[src];
        }
    }
    Ok(out)
}

// ---- Gradient checking ----

/// Result of comparing analytic gradients against central differences.
pub struct GradCheckReport {
    pub per_input: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Checks analytic gradients of a scalar-valued computation against central
/// finite differences. `build` must construct the same computation each call
/// from the given leaf ids. Relative error for one element is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(inputs: &[(&str, Tensor)], epsilon: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(_, t)| g.leaf(t.clone(), true))
        .collect();
    let root = build(&mut g, &ids)?;
    if g.value(root).numel() != 1 {
        return Err(Error::contract("grad_check: root must be scalar"));
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(id, (_, t))| {
            grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |tensors: Vec<Tensor>| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.into_iter().map(|t| g.leaf(t, false)).collect();
        let root = build(&mut g, &ids)?;
        g.value(root).item()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    for (i, (name, tensor)) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        for e in 0..tensor.numel() {
            let make = |delta: f64| -> Vec<Tensor> {
                let mut ts: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
                ts[i].data_mut()[e] += delta;
                ts
            };
            let fp = eval(make(epsilon))?;
            let fm = eval(make(-epsilon))?;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[i].data()[e];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        per_input.push((name.to_string(), worst));
    }
    Ok(GradCheckReport {
        per_input,
        max_rel_err: max_rel,
    })
}
