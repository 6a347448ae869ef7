//! Recorded computation graph with reverse-mode differentiation.
//!
//! Operations append nodes to a [`Graph`]; each node stores the operation
//! kind, its input node ids, and the computed value. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every trainable leaf.
//! Replaying the tape re-executes the same evaluation code on the recorded
//! leaves, so replayed values are bit-identical to the recorded ones.
//!
//! The operation set is deliberately small: exactly what the fusion gate,
//! the decoder read-out, and the training losses need. All reductions run
//! row-major and sequential so results are deterministic.

use std::collections::BTreeMap;

use crate::align::{bilinear_raw, src_coord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Variants carry input node ids plus whatever
/// attributes the backward pass needs.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// C = A @ B, A: m×k, B: k×n.
    Matmul {
        a: usize,
        b: usize,
    },
    /// 2-D transpose.
    Transpose {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    /// Elementwise product (same shape). The mask-application workhorse.
    Mul {
        a: usize,
        b: usize,
    },
    /// Multiply by a compile-time constant.
    Scale {
        x: usize,
        c: f64,
    },
    /// X: m×n plus a rank-1 bias of length n broadcast over rows.
    AddRowBias {
        x: usize,
        bias: usize,
    },
    /// Elementwise x - s where s is a scalar node.
    SubScalar {
        x: usize,
        s: usize,
    },
    /// Elementwise x / s where s is a scalar node.
    DivScalar {
        x: usize,
        s: usize,
    },
    Gelu {
        x: usize,
    },
    Abs {
        x: usize,
    },
    /// Row-stable softmax of X/tau.
    SoftmaxRows {
        x: usize,
        tau: f64,
    },
    /// Sum of all entries, yielding a scalar.
    Sum {
        x: usize,
    },
    /// Single element extraction, yielding a scalar.
    Select {
        x: usize,
        index: usize,
    },
    /// Same data, new shape.
    Reshape {
        x: usize,
    },
    /// Per-channel align-corners bilinear interpolation of a token grid.
    /// x: (h·w)×c, output: (th·tw)×c.
    BilinearResize {
        x: usize,
        h: usize,
        w: usize,
        c: usize,
        th: usize,
        tw: usize,
    },
    /// 2×2/stride-2 average pooling of an h×w raster counting only pixels
    /// valid under `mask`; windows with no valid pixel produce 0.
    MaskedPool2 {
        x: usize,
        h: usize,
        w: usize,
        mask: Vec<bool>,
    },
    /// Forward difference between valid neighbors of an h×w raster, along
    /// rows (`horizontal`) or columns; invalid pairs produce 0.
    MaskedDiff {
        x: usize,
        h: usize,
        w: usize,
        horizontal: bool,
        mask: Vec<bool>,
    },
    /// Columns [start, start+len) of a rank-2 tensor.
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    ConcatCols {
        parts: Vec<usize>,
        widths: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by leaf node id; shapes match the parameters.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id.0)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_node.iter().map(|(k, v)| (NodeId(*k), v))
    }
}

/// GELU, tanh form.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * du
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
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

    /// Insert a leaf. Its `requires_grad` flag decides whether backward
    /// reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push(Op::Leaf, t)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        NodeId(id)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].value.requires_grad())
    }

    fn record(&mut self, op: Op) -> NodeId {
        let inputs = op_inputs(&op);
        let needs_grad = self.any_grad(&inputs);
        let mut value = eval_op(&op, &|i| &self.nodes[i].value);
        value.set_requires_grad(needs_grad);
        self.push(op, value)
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul expects m×k by k×n, got {sa:?} by {sb:?}"
            )));
        }
        Ok(self.record(Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose expects a rank-2 tensor, got {s:?}"
            )));
        }
        Ok(self.record(Op::Transpose { x: x.0 }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.record(Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.record(Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.record(Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.record(Op::Scale { x: x.0, c })
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Dimension(format!(
                "add_row_bias expects m×n plus length-n bias, got {sx:?} plus {sb:?}"
            )));
        }
        Ok(self.record(Op::AddRowBias {
            x: x.0,
            bias: bias.0,
        }))
    }

    pub fn sub_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.expect_scalar("sub_scalar", s)?;
        Ok(self.record(Op::SubScalar { x: x.0, s: s.0 }))
    }

    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.expect_scalar("div_scalar", s)?;
        Ok(self.record(Op::DivScalar { x: x.0, s: s.0 }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Gelu { x: x.0 })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Abs { x: x.0 })
    }

    /// Row-stable softmax of X/tau over a rank-2 tensor. `tau = 1` is the
    /// plain scaled-dot softmax; `tau > 1` spreads each row's mass.
    pub fn softmax_rows(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "softmax_rows expects a rank-2 tensor, got {s:?}"
            )));
        }
        Ok(self.record(Op::SoftmaxRows { x: x.0, tau }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Sum { x: x.0 })
    }

    /// mean = sum / numel.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        if index >= self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "select index {index} out of range for {} elements",
                self.value(x).numel()
            )));
        }
        Ok(self.record(Op::Select { x: x.0, index }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {shape:?}",
                self.value(x).shape()
            )));
        }
        let n = self.record(Op::Reshape { x: x.0 });
        // eval_op cannot see the target shape, so patch it here.
        let data = self.nodes[n.0].value.data().to_vec();
        let grad = self.nodes[n.0].value.requires_grad();
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(grad);
        self.nodes[n.0].value = t;
        Ok(n)
    }

    pub fn bilinear_resize(
        &mut self,
        x: NodeId,
        h: usize,
        w: usize,
        th: usize,
        tw: usize,
    ) -> Result<NodeId> {
        let s = self.value(x).shape();
        if th == 0 || tw == 0 {
            return Err(Error::Parameter(format!(
                "bilinear target grid must be at least 1×1, got {th}×{tw}"
            )));
        }
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::Dimension(format!(
                "bilinear_resize expects (h·w)×c with h={h}, w={w}, got {s:?}"
            )));
        }
        let c = s[1];
        Ok(self.record(Op::BilinearResize {
            x: x.0,
            h,
            w,
            c,
            th,
            tw,
        }))
    }

    pub fn masked_pool2(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return Err(Error::Dimension(format!(
                "masked_pool2 expects an h×w raster with matching mask, got {s:?} and {} mask bits",
                mask.len()
            )));
        }
        let (h, w) = (s[0], s[1]);
        if h < 2 || w < 2 {
            return Err(Error::Parameter(format!(
                "masked_pool2 needs at least a 2×2 raster, got {h}×{w}"
            )));
        }
        Ok(self.record(Op::MaskedPool2 {
            x: x.0,
            h,
            w,
            mask: mask.to_vec(),
        }))
    }

    pub fn masked_diff(&mut self, x: NodeId, horizontal: bool, mask: &[bool]) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return Err(Error::Dimension(format!(
                "masked_diff expects an h×w raster with matching mask, got {s:?} and {} mask bits",
                mask.len()
            )));
        }
        let (h, w) = (s[0], s[1]);
        if (horizontal && w < 2) || (!horizontal && h < 2) {
            return Err(Error::Parameter(format!(
                "masked_diff along {} needs extent ≥ 2, raster is {h}×{w}",
                if horizontal { "rows" } else { "columns" }
            )));
        }
        Ok(self.record(Op::MaskedDiff {
            x: x.0,
            h,
            w,
            horizontal,
            mask: mask.to_vec(),
        }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) out of range for shape {s:?}",
                start + len
            )));
        }
        Ok(self.record(Op::SliceCols { x: x.0, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols parts must share row count {rows}, got {s:?}"
                )));
            }
            widths.push(s[1]);
        }
        Ok(self.record(Op::ConcatCols {
            parts: parts.iter().map(|p| p.0).collect(),
            widths,
        }))
    }

    fn same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{what} expects equal shapes, got {sa:?} and {sb:?}"
            )));
        }
        Ok(())
    }

    fn expect_scalar(&self, what: &str, s: NodeId) -> Result<()> {
        if !self.value(s).is_scalar() {
            return Err(Error::Dimension(format!(
                "{what} expects a scalar node, got shape {:?}",
                self.value(s).shape()
            )));
        }
        Ok(())
    }

    // ── Reverse pass ────────────────────────────────────────────────

    /// Gradients of a scalar `output` with respect to every leaf recorded
    /// with `requires_grad`. Leaves the output does not depend on receive
    /// no entry.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if !self.value(output).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                if let Some(g) = grads[i].take() {
                    let mut t = Tensor::new(node.value.shape().to_vec(), g)?;
                    t.set_requires_grad(false);
                    out.by_node.insert(i, t);
                }
            }
        }
        Ok(out)
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], id: usize, contrib: &[f64]) {
        if !self.nodes[id].value.requires_grad() {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.numel()]);
        for (dst, src) in slot.iter_mut().zip(contrib) {
            *dst += src;
        }
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: usize| self.nodes[id].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                if self.nodes[*a].value.requires_grad() {
                    // dA = G · Bᵀ
                    let bd = val(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bd[t * n + j];
                            }
                            da[r * k + t] = s;
                        }
                    }
                    self.add_into(grads, *a, &da);
                }
                if self.nodes[*b].value.requires_grad() {
                    // dB = Aᵀ · G
                    let ad = val(*a);
                    let mut db = vec![0.0; k * n];
                    for t in 0..k {
                        for r in 0..m {
                            let av = ad[r * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[t * n + j] += av * g[r * n + j];
                            }
                        }
                    }
                    self.add_into(grads, *b, &db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                let mut dx = vec![0.0; r * c];
                for a in 0..r {
                    for b in 0..c {
                        dx[b * r + a] = g[a * c + b];
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.add_into(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_into(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].value.requires_grad() {
                    let da: Vec<f64> = g.iter().zip(val(*b)).map(|(g, b)| g * b).collect();
                    self.add_into(grads, *a, &da);
                }
                if self.nodes[*b].value.requires_grad() {
                    let db: Vec<f64> = g.iter().zip(val(*a)).map(|(g, a)| g * a).collect();
                    self.add_into(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_into(grads, *x, &dx);
            }
            Op::AddRowBias { x, bias } => {
                self.add_into(grads, *x, g);
                if self.nodes[*bias].value.requires_grad() {
                    let n = self.nodes[*bias].value.numel();
                    let mut db = vec![0.0; n];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                    self.add_into(grads, *bias, &db);
                }
            }
            Op::SubScalar { x, s } => {
                self.add_into(grads, *x, g);
                if self.nodes[*s].value.requires_grad() {
                    let total: f64 = g.iter().sum();
                    self.add_into(grads, *s, &[-total]);
                }
            }
            Op::DivScalar { x, s } => {
                let sv = val(*s)[0];
                if self.nodes[*x].value.requires_grad() {
                    let dx: Vec<f64> = g.iter().map(|v| v / sv).collect();
                    self.add_into(grads, *x, &dx);
                }
                if self.nodes[*s].value.requires_grad() {
                    let xd = val(*x);
                    let mut acc = 0.0;
                    for (gv, xv) in g.iter().zip(xd) {
                        acc += gv * xv;
                    }
                    self.add_into(grads, *s, &[-acc / (sv * sv)]);
                }
            }
            Op::Gelu { x } => {
                let xd = val(*x);
                let dx: Vec<f64> = g.iter().zip(xd).map(|(g, &x)| g * gelu_deriv(x)).collect();
                self.add_into(grads, *x, &dx);
            }
            Op::Abs { x } => {
                let xd = val(*x);
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_into(grads, *x, &dx);
            }
            Op::SoftmaxRows { x, tau } => {
                let y = self.nodes[i].value.data();
                let (rows, cols) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot) / tau;
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.nodes[*x].value.numel()];
                self.add_into(grads, *x, &dx);
            }
            Op::Select { x, index } => {
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                dx[*index] = g[0];
                self.add_into(grads, *x, &dx);
            }
            Op::Reshape { x } => {
                self.add_into(grads, *x, g);
            }
            Op::BilinearResize { x, h, w, c, th, tw } => {
                let mut dx = vec![0.0; h * w * c];
                for ty in 0..*th {
                    let sy = src_coord(ty, *th, *h);
                    let y0 = sy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let fy = sy - y0 as f64;
                    for tx in 0..*tw {
                        let sx = src_coord(tx, *tw, *w);
                        let x0 = sx.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let fx = sx - x0 as f64;
                        let go = &g[(ty * tw + tx) * c..(ty * tw + tx + 1) * c];
                        let corners = [
                            (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                            (y0 * w + x1, (1.0 - fy) * fx),
                            (y1 * w + x0, fy * (1.0 - fx)),
                            (y1 * w + x1, fy * fx),
                        ];
                        for (tok, wgt) in corners {
                            if wgt == 0.0 {
                                continue;
                            }
                            for ch in 0..*c {
                                dx[tok * c + ch] += wgt * go[ch];
                            }
                        }
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::MaskedPool2 { x, h, w, mask } => {
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let members = [
                            (2 * oy) * w + 2 * ox,
                            (2 * oy) * w + 2 * ox + 1,
                            (2 * oy + 1) * w + 2 * ox,
                            (2 * oy + 1) * w + 2 * ox + 1,
                        ];
                        let count = members.iter().filter(|&&p| mask[p]).count();
                        if count == 0 {
                            continue;
                        }
                        let share = g[oy * ow + ox] / count as f64;
                        for p in members {
                            if mask[p] {
                                dx[p] += share;
                            }
                        }
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::MaskedDiff {
                x,
                h,
                w,
                horizontal,
                mask,
            } => {
                let mut dx = vec![0.0; h * w];
                if *horizontal {
                    for y in 0..*h {
                        for xx in 0..w - 1 {
                            let cur = y * w + xx;
                            let next = y * w + xx + 1;
                            if mask[cur] && mask[next] {
                                let gv = g[y * (w - 1) + xx];
                                dx[next] += gv;
                                dx[cur] -= gv;
                            }
                        }
                    }
                } else {
                    for y in 0..h - 1 {
                        for xx in 0..*w {
                            let cur = y * w + xx;
                            let next = (y + 1) * w + xx;
                            if mask[cur] && mask[next] {
                                let gv = g[y * w + xx];
                                dx[next] += gv;
                                dx[cur] -= gv;
                            }
                        }
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..*len {
                        dx[r * cols + start + j] = g[r * len + j];
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::ConcatCols { parts, widths } => {
                let rows = self.nodes[i].value.rows();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, wdt) in parts.iter().zip(widths) {
                    if self.nodes[*p].value.requires_grad() {
                        let mut dp = vec![0.0; rows * wdt];
                        for r in 0..rows {
                            for j in 0..*wdt {
                                dp[r * wdt + j] = g[r * total + offset + j];
                            }
                        }
                        self.add_into(grads, *p, &dp);
                    }
                    offset += wdt;
                }
            }
        }
    }

    /// Re-execute every recorded operation from the stored leaves and return
    /// the recomputed values, in node order. Recorded and replayed values are
    /// bit-identical because both run the same evaluation code in the same
    /// order.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let mut v = eval_op(op, &|i| &values[i]);
                    // Reshape carries its target shape only in the stored value.
                    if matches!(op, Op::Reshape { .. }) {
                        v = {
                            let mut t = Tensor::new(node.value.shape().to_vec(), v.data().to_vec())
                                .expect("replay reshape");
                            t.set_requires_grad(v.requires_grad());
                            t
                        };
                    }
                    v
                }
            };
            values.push(v);
        }
        values
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
            vec![*a, *b]
        }
        Op::Transpose { x }
        | Op::Scale { x, .. }
        | Op::Gelu { x }
        | Op::Abs { x }
        | Op::SoftmaxRows { x, .. }
        | Op::Sum { x }
        | Op::Select { x, .. }
        | Op::Reshape { x }
        | Op::BilinearResize { x, .. }
        | Op::MaskedPool2 { x, .. }
        | Op::MaskedDiff { x, .. }
        | Op::SliceCols { x, .. } => vec![*x],
        Op::AddRowBias { x, bias } => vec![*x, *bias],
        Op::SubScalar { x, s } | Op::DivScalar { x, s } => vec![*x, *s],
        Op::ConcatCols { parts, .. } => parts.clone(),
    }
}

/// Forward evaluation of one operation. Shared by recording and replay.
fn eval_op<'a>(op: &Op, value_of: &dyn Fn(usize) -> &'a Tensor) -> Tensor {
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Matmul { a, b } => {
            let (ta, tb) = (value_of(*a), value_of(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let out = matmul_raw(ta.data(), tb.data(), m, k, n);
            Tensor::new(vec![m, n], out).expect("matmul shape")
        }
        Op::Transpose { x } => {
            let t = value_of(*x);
            let (r, c) = (t.rows(), t.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = t.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out).expect("transpose shape")
        }
        Op::Add { a, b } => zip_elem(value_of(*a), value_of(*b), |x, y| x + y),
        Op::Sub { a, b } => zip_elem(value_of(*a), value_of(*b), |x, y| x - y),
        Op::Mul { a, b } => zip_elem(value_of(*a), value_of(*b), |x, y| x * y),
        Op::Scale { x, c } => map_elem(value_of(*x), |v| v * c),
        Op::AddRowBias { x, bias } => {
            let (t, b) = (value_of(*x), value_of(*bias));
            let n = b.numel();
            let out: Vec<f64> = t
                .data()
                .iter()
                .enumerate()
                .map(|(idx, v)| v + b.data()[idx % n])
                .collect();
            Tensor::new(t.shape().to_vec(), out).expect("bias shape")
        }
        Op::SubScalar { x, s } => {
            let sv = value_of(*s).data()[0];
            map_elem(value_of(*x), |v| v - sv)
        }
        Op::DivScalar { x, s } => {
            let sv = value_of(*s).data()[0];
            map_elem(value_of(*x), |v| v / sv)
        }
        Op::Gelu { x } => map_elem(value_of(*x), gelu_scalar),
        Op::Abs { x } => map_elem(value_of(*x), f64::abs),
        Op::SoftmaxRows { x, tau } => {
            let t = value_of(*x);
            let (rows, cols) = (t.rows(), t.cols());
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &t.data()[r * cols..(r + 1) * cols];
                let orow = &mut out[r * cols..(r + 1) * cols];
                let mut max = f64::NEG_INFINITY;
                for (o, v) in orow.iter_mut().zip(row) {
                    *o = v / tau;
                    if *o > max {
                        max = *o;
                    }
                }
                let mut total = 0.0;
                for o in orow.iter_mut() {
                    *o = (*o - max).exp();
                    total += *o;
                }
                for o in orow.iter_mut() {
                    *o /= total;
                }
            }
            Tensor::new(vec![rows, cols], out).expect("softmax shape")
        }
        Op::Sum { x } => {
            let mut acc = 0.0;
            for v in value_of(*x).data() {
                acc += v;
            }
            Tensor::scalar(acc)
        }
        Op::Select { x, index } => Tensor::scalar(value_of(*x).data()[*index]),
        Op::Reshape { x } => value_of(*x).clone(),
        Op::BilinearResize { x, h, w, c, th, tw } => {
            let t = value_of(*x);
            let out = bilinear_raw(t.data(), *h, *w, *c, *th, *tw);
            Tensor::new(vec![th * tw, *c], out).expect("resize shape")
        }
        Op::MaskedPool2 { x, h, w, mask } => {
            let t = value_of(*x);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let members = [
                        (2 * oy) * w + 2 * ox,
                        (2 * oy) * w + 2 * ox + 1,
                        (2 * oy + 1) * w + 2 * ox,
                        (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    let mut acc = 0.0;
                    let mut count = 0usize;
                    for p in members {
                        if mask[p] {
                            acc += t.data()[p];
                            count += 1;
                        }
                    }
                    out[oy * ow + ox] = if count > 0 { acc / count as f64 } else { 0.0 };
                }
            }
            Tensor::new(vec![oh, ow], out).expect("pool shape")
        }
        Op::MaskedDiff {
            x,
            h,
            w,
            horizontal,
            mask,
        } => {
            let t = value_of(*x);
            if *horizontal {
                let mut out = vec![0.0; h * (w - 1)];
                for y in 0..*h {
                    for xx in 0..w - 1 {
                        let cur = y * w + xx;
                        let next = y * w + xx + 1;
                        if mask[cur] && mask[next] {
                            out[y * (w - 1) + xx] = t.data()[next] - t.data()[cur];
                        }
                    }
                }
                Tensor::new(vec![*h, w - 1], out).expect("diff shape")
            } else {
                let mut out = vec![0.0; (h - 1) * w];
                for y in 0..h - 1 {
                    for xx in 0..*w {
                        let cur = y * w + xx;
                        let next = (y + 1) * w + xx;
                        if mask[cur] && mask[next] {
                            out[y * w + xx] = t.data()[next] - t.data()[cur];
                        }
                    }
                }
                Tensor::new(vec![h - 1, *w], out).expect("diff shape")
            }
        }
        Op::SliceCols { x, start, len } => {
            let t = value_of(*x);
            let (rows, cols) = (t.rows(), t.cols());
            let mut out = vec![0.0; rows * len];
            for r in 0..rows {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
            }
            Tensor::new(vec![rows, *len], out).expect("slice shape")
        }
        Op::ConcatCols { parts, widths } => {
            let rows = value_of(parts[0]).rows();
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; rows * total];
            let mut offset = 0;
            for (p, wdt) in parts.iter().zip(widths) {
                let t = value_of(*p);
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + wdt]
                        .copy_from_slice(&t.data()[r * wdt..(r + 1) * wdt]);
                }
                offset += wdt;
            }
            Tensor::new(vec![rows, total], out).expect("concat shape")
        }
    }
}

fn zip_elem(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let out: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::new(a.shape().to_vec(), out).expect("elementwise shape")
}

fn map_elem(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let out: Vec<f64> = t.data().iter().map(|v| f(*v)).collect();
    Tensor::new(t.shape().to_vec(), out).expect("elementwise shape")
}
