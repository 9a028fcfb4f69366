//! Reverse-mode autodiff on a Wengert tape.
//!
//! Ops are recorded in execution order into an arena; `backward` replays them
//! in reverse. Gradient accumulation order is fixed by op order, so repeated
//! backward runs over the same tape produce bitwise-identical gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added to the variance inside the layernorm root.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value stored on a [`Tape`]. Only valid for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValId(usize);

impl ValId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running count of scalar multiply-add pairs.
///
/// Only matmul-backed ops record work here (linear layers, attention score
/// and value products, convolution realized as matmul). Elementwise ops,
/// reductions, and data movement count zero.
#[derive(Debug, Default, Clone)]
pub struct FlopCounter {
    mul_adds: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        FlopCounter { mul_adds: 0 }
    }

    pub fn record(&mut self, mul_adds: u64) {
        self.mul_adds += mul_adds;
    }

    pub fn total(&self) -> u64 {
        self.mul_adds
    }

    pub fn reset(&mut self) {
        self.mul_adds = 0;
    }
}

struct Node {
    tensor: Tensor,
    /// True when this value can influence some requires_grad leaf's gradient;
    /// backward skips gradient flow into nodes where this is false.
    needs_grad: bool,
}

enum Op {
    Leaf,
    Matmul { a: ValId, b: ValId },
    Transpose { x: ValId },
    Reshape { x: ValId },
    Concat { xs: Vec<ValId>, axis: usize },
    Slice { x: ValId, axis: usize, from: usize },
    Add { a: ValId, b: ValId },
    Mul { a: ValId, b: ValId },
    Scale { x: ValId, c: f64 },
    AddBias { x: ValId, b: ValId },
    AddPerRow { x: ValId, b: ValId },
    ScaleRows { x: ValId, w: ValId },
    Gelu { x: ValId },
    Softmax { x: ValId, axis: usize },
    LayerNorm { x: ValId, gain: ValId, bias: ValId },
    GatherRows { table: ValId, idx: Vec<usize> },
    MaxPoolGrid { x: ValId, rows: usize, cols: usize },
    Sum { x: ValId },
    CrossEntropy { logits: ValId, targets: Vec<usize> },
}

/// Arena tape: op `i` produced tensor `i`.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    flops: FlopCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            flops: FlopCounter::new(),
        }
    }

    // ── Access ──────────────────────────────────────────────────────────

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: ValId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: ValId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Gradient assigned by the last `backward` call, if this value was
    /// registered with `requires_grad`.
    pub fn grad(&self, id: ValId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn mul_adds(&self) -> u64 {
        self.flops.total()
    }

    pub fn reset_flops(&mut self) {
        self.flops.reset();
    }

    // ── Value registration ──────────────────────────────────────────────

    /// Copies a tensor onto the tape as a leaf. The leaf's `requires_grad`
    /// flag is taken from the tensor.
    pub fn leaf(&mut self, tensor: &Tensor) -> ValId {
        let needs = tensor.requires_grad();
        self.push(tensor.clone(), needs, Op::Leaf)
    }

    /// Registers plain data as a non-differentiable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<ValId> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, false, Op::Leaf))
    }

    fn push(&mut self, tensor: Tensor, needs_grad: bool, op: Op) -> ValId {
        let id = ValId(self.nodes.len());
        self.nodes.push(Node { tensor, needs_grad });
        self.ops.push(op);
        id
    }

    fn needs(&self, id: ValId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_rank(&self, id: ValId, rank: usize, op: &'static str) -> Result<()> {
        if self.shape(id).len() != rank {
            return Err(Error::Contract(format!(
                "{op} expects rank-{rank} input, got shape {:?}",
                self.shape(id)
            )));
        }
        Ok(())
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// `(m, k) x (k, n) -> (m, n)`, recording `m * k * n` multiply-adds.
    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.check_rank(a, 2, "matmul")?;
        self.check_rank(b, 2, "matmul")?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.flops.record(m as u64 * k as u64 * n as u64);
        let t = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: ValId) -> Result<ValId> {
        self.check_rank(x, 2, "transpose")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Transpose { x }))
    }

    /// Reinterprets the value with a new shape of equal element count.
    pub fn reshape(&mut self, x: ValId, shape: &[usize]) -> Result<ValId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Reshape { x }))
    }

    /// Concatenates rank-2 values along `axis` (0 or 1).
    pub fn concat(&mut self, xs: &[ValId], axis: usize) -> Result<ValId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::InvalidAxis {
                axis,
                shape: self.shape(xs[0]).to_vec(),
            });
        }
        for &x in xs {
            self.check_rank(x, 2, "concat")?;
            if self.shape(x)[1 - axis] != self.shape(xs[0])[1 - axis] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(xs[0]).to_vec(),
                    right: self.shape(x).to_vec(),
                });
            }
        }
        let fixed = self.shape(xs[0])[1 - axis];
        let total: usize = xs.iter().map(|&x| self.shape(x)[axis]).sum();
        let (rows, cols) = if axis == 0 { (total, fixed) } else { (fixed, total) };
        let mut out = vec![0.0; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for &x in xs {
                let len = self.data(x).len();
                out[at..at + len].copy_from_slice(self.data(x));
                at += len;
            }
        } else {
            let mut col_at = 0;
            for &x in xs {
                let w = self.shape(x)[1];
                let xd = self.data(x);
                for i in 0..rows {
                    out[i * cols + col_at..i * cols + col_at + w]
                        .copy_from_slice(&xd[i * w..(i + 1) * w]);
                }
                col_at += w;
            }
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(t, needs, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Copies the half-open range `[from, to)` along `axis` of a rank-2 value.
    pub fn slice(&mut self, x: ValId, axis: usize, from: usize, to: usize) -> Result<ValId> {
        self.check_rank(x, 2, "slice")?;
        if axis > 1 {
            return Err(Error::InvalidAxis {
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        let extent = self.shape(x)[axis];
        if from > to || to > extent {
            return Err(Error::Contract(format!(
                "slice range {from}..{to} out of bounds for extent {extent}"
            )));
        }
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xd = self.data(x);
        let out;
        let shape;
        if axis == 0 {
            out = xd[from * c..to * c].to_vec();
            shape = vec![to - from, c];
        } else {
            let w = to - from;
            let mut buf = vec![0.0; r * w];
            for i in 0..r {
                buf[i * w..(i + 1) * w].copy_from_slice(&xd[i * c + from..i * c + to]);
            }
            out = buf;
            shape = vec![r, w];
        }
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Slice { x, axis, from }))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Mul { a, b }))
    }

    fn same_shape(&self, a: ValId, b: ValId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> ValId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, needs, Op::Scale { x, c })
    }

    /// `out[i, j] = x[i, j] + b[j]` with `b` a rank-1 value of length `cols`.
    pub fn add_bias(&mut self, x: ValId, b: ValId) -> Result<ValId> {
        self.check_rank(x, 2, "add_bias")?;
        self.check_rank(b, 1, "add_bias")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(b)[0] != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let xd = self.data(x);
        let bd = self.data(b);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, needs, Op::AddBias { x, b }))
    }

    /// `out[i, j] = x[i, j] + b[i]` with `b` a rank-1 value of length `rows`.
    pub fn add_per_row(&mut self, x: ValId, b: ValId) -> Result<ValId> {
        self.check_rank(x, 2, "add_per_row")?;
        self.check_rank(b, 1, "add_per_row")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(b)[0] != r {
            return Err(Error::ShapeMismatch {
                op: "add_per_row",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let xd = self.data(x);
        let bd = self.data(b);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[i];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, needs, Op::AddPerRow { x, b }))
    }

    /// `out[i, j] = x[i, j] * w[i]` with `w` a rank-1 value of length `rows`.
    /// Used to re-zero padded token rows (`w` is a 0/1 mask).
    pub fn scale_rows(&mut self, x: ValId, w: ValId) -> Result<ValId> {
        self.check_rank(x, 2, "scale_rows")?;
        self.check_rank(w, 1, "scale_rows")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(w)[0] != r {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] * wd[i];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(t, needs, Op::ScaleRows { x, w }))
    }

    /// Gaussian error linear unit, tanh realization.
    pub fn gelu(&mut self, x: ValId) -> ValId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, needs, Op::Gelu { x })
    }

    /// Softmax along `axis` (0 or 1) of a rank-2 value.
    ///
    /// `-inf` entries map to exactly-zero weights. A lane that is entirely
    /// `-inf` produces an all-zero lane rather than an error; callers that
    /// mask every key get zero attention output for that query.
    pub fn softmax(&mut self, x: ValId, axis: usize) -> Result<ValId> {
        self.check_rank(x, 2, "softmax")?;
        if axis > 1 {
            return Err(Error::InvalidAxis {
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        let (lanes, lane_len, stride, step) = lane_layout(r, c, axis);
        for lane in 0..lanes {
            let base = lane * stride;
            let mut m = f64::NEG_INFINITY;
            for i in 0..lane_len {
                m = m.max(xd[base + i * step]);
            }
            if m == f64::NEG_INFINITY {
                continue; // fully masked lane stays all-zero
            }
            let mut z = 0.0;
            for i in 0..lane_len {
                let e = (xd[base + i * step] - m).exp();
                out[base + i * step] = e;
                z += e;
            }
            for i in 0..lane_len {
                out[base + i * step] /= z;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Softmax { x, axis }))
    }

    /// Per-row layernorm over the last axis with trainable gain and bias.
    ///
    /// A zero-variance row normalizes to zeros, so the output row is the bias.
    pub fn layernorm(&mut self, x: ValId, gain: ValId, bias: ValId) -> Result<ValId> {
        self.check_rank(x, 2, "layernorm")?;
        self.check_rank(gain, 1, "layernorm")?;
        self.check_rank(bias, 1, "layernorm")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(gain)[0] != c || self.shape(bias)[0] != c {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let (mu, sd) = row_moments(row);
            for j in 0..c {
                out[i * c + j] = gd[j] * (row[j] - mu) / sd + bd[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(t, needs, Op::LayerNorm { x, gain, bias }))
    }

    /// `out[i] = table[idx[i]]` for a rank-2 table; backward scatter-adds.
    pub fn gather_rows(&mut self, table: ValId, idx: &[usize]) -> Result<ValId> {
        self.check_rank(table, 2, "gather_rows")?;
        let (r, c) = (self.shape(table)[0], self.shape(table)[1]);
        for &i in idx {
            if i >= r {
                return Err(Error::TokenOutOfRange { id: i, vocab: r });
            }
        }
        let td = self.data(table);
        let mut out = vec![0.0; idx.len() * c];
        for (o, &i) in idx.iter().enumerate() {
            out[o * c..(o + 1) * c].copy_from_slice(&td[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let needs = self.needs(table);
        Ok(self.push(t, needs, Op::GatherRows { table, idx: idx.to_vec() }))
    }

    /// Channelwise 2x2 stride-2 max over a token grid.
    ///
    /// Input rows are a `rows x cols` grid flattened row-major; output is the
    /// `(rows/2) x (cols/2)` grid in the same order. Ties route the gradient
    /// to the lowest flat index in the window.
    pub fn max_pool_grid(&mut self, x: ValId, rows: usize, cols: usize) -> Result<ValId> {
        self.check_rank(x, 2, "max_pool_grid")?;
        if rows % 2 != 0 || cols % 2 != 0 || rows == 0 || cols == 0 {
            return Err(Error::Contract(format!(
                "max_pool_grid needs a nonempty even grid, got {rows}x{cols}"
            )));
        }
        if self.shape(x)[0] != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "max_pool_grid",
                left: self.shape(x).to_vec(),
                right: vec![rows * cols],
            });
        }
        let d = self.shape(x)[1];
        let xd = self.data(x);
        let (or, oc) = (rows / 2, cols / 2);
        let mut out = vec![0.0; or * oc * d];
        for bi in 0..or {
            for bj in 0..oc {
                let window = pool_window(bi, bj, cols);
                let orow = (bi * oc + bj) * d;
                for ch in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    for &tok in &window {
                        let v = xd[tok * d + ch];
                        if v > best {
                            best = v;
                        }
                    }
                    out[orow + ch] = best;
                }
            }
        }
        let t = Tensor::new(vec![or * oc, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::MaxPoolGrid { x, rows, cols }))
    }

    /// Sum of all entries, producing a scalar (shape `[1]`).
    pub fn sum(&mut self, x: ValId) -> ValId {
        let s: f64 = self.data(x).iter().sum();
        let t = Tensor::scalar(s);
        let needs = self.needs(x);
        self.push(t, needs, Op::Sum { x })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, in nats. One target per logits row.
    pub fn cross_entropy(&mut self, logits: ValId, targets: &[usize]) -> Result<ValId> {
        self.check_rank(logits, 2, "cross_entropy")?;
        let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= c {
                return Err(Error::TokenOutOfRange { id: t, vocab: c });
            }
        }
        let xd = self.data(logits);
        let mut total = 0.0;
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let t = Tensor::scalar(total / r as f64);
        let needs = self.needs(logits);
        Ok(self.push(t, needs, Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Assigns `.grad` on every
    /// `requires_grad` leaf (zeros when the leaf does not reach the loss);
    /// other values keep `grad = None`.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "backward: id {} not on this tape",
                loss.0
            )));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }

        let n = self.nodes.len();
        let mut ws: Vec<Option<Vec<f64>>> = vec![None; n];
        ws[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let g = match ws[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(i, &g, &mut ws);
            ws[i] = Some(g);
        }

        for i in 0..n {
            if self.nodes[i].tensor.requires_grad() {
                let numel = self.nodes[i].tensor.numel();
                let g = ws[i].take().unwrap_or_else(|| vec![0.0; numel]);
                self.nodes[i].tensor.set_grad(g);
            }
        }
        Ok(())
    }

    fn acc(&self, ws: &mut [Option<Vec<f64>>], id: ValId, f: impl FnOnce(&mut [f64])) {
        if !self.needs(id) {
            return;
        }
        let numel = self.nodes[id.0].tensor.numel();
        let buf = ws[id.0].get_or_insert_with(|| vec![0.0; numel]);
        f(buf);
    }

    fn backward_op(&mut self, i: usize, g: &[f64], ws: &mut [Option<Vec<f64>>]) {
        // Ops are matched by index: op i produced tensor i.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[r * k + p] = s;
                        }
                    }
                    self.flops.record(m as u64 * n as u64 * k as u64);
                    self.acc(ws, *a, |buf| {
                        for (o, v) in buf.iter_mut().zip(&da) {
                            *o += v;
                        }
                    });
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let arow = &ad[r * k..(r + 1) * k];
                        let grow = &g[r * n..(r + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    self.flops.record(m as u64 * k as u64 * n as u64);
                    self.acc(ws, *b, |buf| {
                        for (o, v) in buf.iter_mut().zip(&db) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.acc(ws, *x, |buf| {
                    for a in 0..r {
                        for b in 0..c {
                            buf[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(ws, *x, |buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::Concat { xs, axis } => {
                if *axis == 0 {
                    let mut at = 0;
                    for &x in xs {
                        let len = self.nodes[x.0].tensor.numel();
                        let piece = &g[at..at + len];
                        self.acc(ws, x, |buf| {
                            for (o, v) in buf.iter_mut().zip(piece) {
                                *o += v;
                            }
                        });
                        at += len;
                    }
                } else {
                    let rows = self.shape(xs[0])[0];
                    let total: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
                    let mut col_at = 0;
                    for &x in xs {
                        let w = self.shape(x)[1];
                        self.acc(ws, x, |buf| {
                            for r in 0..rows {
                                for j in 0..w {
                                    buf[r * w + j] += g[r * total + col_at + j];
                                }
                            }
                        });
                        col_at += w;
                    }
                }
            }
            Op::Slice { x, axis, from } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out_shape = self.nodes[i].tensor.shape().to_vec();
                self.acc(ws, *x, |buf| {
                    if *axis == 0 {
                        let start = from * c;
                        for (o, v) in buf[start..start + g.len()].iter_mut().zip(g) {
                            *o += v;
                        }
                    } else {
                        let w = out_shape[1];
                        for row in 0..r {
                            for j in 0..w {
                                buf[row * c + from + j] += g[row * w + j];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(ws, *a, |buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.acc(ws, *b, |buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bd = self.data(*b).to_vec();
                self.acc(ws, *a, |buf| {
                    for ((o, v), w) in buf.iter_mut().zip(g).zip(&bd) {
                        *o += v * w;
                    }
                });
                let ad = self.data(*a).to_vec();
                self.acc(ws, *b, |buf| {
                    for ((o, v), w) in buf.iter_mut().zip(g).zip(&ad) {
                        *o += v * w;
                    }
                });
            }
            Op::Scale { x, c } => {
                self.acc(ws, *x, |buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v * c;
                    }
                });
            }
            Op::AddBias { x, b } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.acc(ws, *x, |buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.acc(ws, *b, |buf| {
                    for row in 0..r {
                        for j in 0..c {
                            buf[j] += g[row * c + j];
                        }
                    }
                });
            }
            Op::AddPerRow { x, b } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.acc(ws, *x, |buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.acc(ws, *b, |buf| {
                    for row in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[row * c + j];
                        }
                        buf[row] += s;
                    }
                });
            }
            Op::ScaleRows { x, w } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let wd = self.data(*w).to_vec();
                self.acc(ws, *x, |buf| {
                    for row in 0..r {
                        for j in 0..c {
                            buf[row * c + j] += g[row * c + j] * wd[row];
                        }
                    }
                });
                let xd = self.data(*x).to_vec();
                self.acc(ws, *w, |buf| {
                    for row in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[row * c + j] * xd[row * c + j];
                        }
                        buf[row] += s;
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = self.data(*x).to_vec();
                self.acc(ws, *x, |buf| {
                    for ((o, v), &xv) in buf.iter_mut().zip(g).zip(&xd) {
                        *o += v * gelu_grad_scalar(xv);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let y = self.nodes[i].tensor.data().to_vec();
                let (lanes, lane_len, stride, step) = lane_layout(r, c, *axis);
                self.acc(ws, *x, |buf| {
                    for lane in 0..lanes {
                        let base = lane * stride;
                        let mut dot = 0.0;
                        for t in 0..lane_len {
                            let p = base + t * step;
                            dot += y[p] * g[p];
                        }
                        for t in 0..lane_len {
                            let p = base + t * step;
                            buf[p] += y[p] * (g[p] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xd = self.data(*x).to_vec();
                let gd = self.data(*gain).to_vec();
                self.acc(ws, *x, |buf| {
                    for row in 0..r {
                        let xrow = &xd[row * c..(row + 1) * c];
                        let grow = &g[row * c..(row + 1) * c];
                        let (mu, sd) = row_moments(xrow);
                        let mut mean_a = 0.0;
                        let mut mean_ax = 0.0;
                        for j in 0..c {
                            let xh = (xrow[j] - mu) / sd;
                            let a = gd[j] * grow[j];
                            mean_a += a;
                            mean_ax += a * xh;
                        }
                        mean_a /= c as f64;
                        mean_ax /= c as f64;
                        for j in 0..c {
                            let xh = (xrow[j] - mu) / sd;
                            let a = gd[j] * grow[j];
                            buf[row * c + j] += (a - mean_a - xh * mean_ax) / sd;
                        }
                    }
                });
                self.acc(ws, *gain, |buf| {
                    for row in 0..r {
                        let xrow = &xd[row * c..(row + 1) * c];
                        let (mu, sd) = row_moments(xrow);
                        for j in 0..c {
                            buf[j] += g[row * c + j] * (xrow[j] - mu) / sd;
                        }
                    }
                });
                self.acc(ws, *bias, |buf| {
                    for row in 0..r {
                        for j in 0..c {
                            buf[j] += g[row * c + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let c = self.shape(*table)[1];
                self.acc(ws, *table, |buf| {
                    for (o, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[row * c + j] += g[o * c + j];
                        }
                    }
                });
            }
            Op::MaxPoolGrid { x, rows, cols } => {
                let d = self.shape(*x)[1];
                let xd = self.data(*x).to_vec();
                let (or_, oc) = (rows / 2, cols / 2);
                self.acc(ws, *x, |buf| {
                    for bi in 0..or_ {
                        for bj in 0..oc {
                            let window = pool_window(bi, bj, *cols);
                            let orow = (bi * oc + bj) * d;
                            for ch in 0..d {
                                // Recompute the argmax with the same tie rule
                                // as forward: strictly-greater keeps the
                                // lowest flat index on ties.
                                let mut best = window[0];
                                for &tok in &window[1..] {
                                    if xd[tok * d + ch] > xd[best * d + ch] {
                                        best = tok;
                                    }
                                }
                                buf[best * d + ch] += g[orow + ch];
                            }
                        }
                    }
                });
            }
            Op::Sum { x } => {
                self.acc(ws, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let (r, c) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let xd = self.data(*logits).to_vec();
                let scale = g[0] / r as f64;
                self.acc(ws, *logits, |buf| {
                    for row in 0..r {
                        let xrow = &xd[row * c..(row + 1) * c];
                        let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = xrow.iter().map(|v| (v - m).exp()).sum();
                        for j in 0..c {
                            let p = (xrow[j] - m).exp() / z;
                            let ind = if j == targets[row] { 1.0 } else { 0.0 };
                            buf[row * c + j] += scale * (p - ind);
                        }
                    }
                });
            }
        }
        self.ops[i] = op;
    }
}

// ── Scalar helpers ──────────────────────────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + LAYERNORM_EPS).sqrt())
}

/// (lanes, lane_len, lane_stride, element_step) for iterating a 2-D tensor
/// lane-wise along `axis`.
fn lane_layout(r: usize, c: usize, axis: usize) -> (usize, usize, usize, usize) {
    if axis == 1 {
        (r, c, c, 1)
    } else {
        (c, r, 1, c)
    }
}

/// Flat token indices of the 2x2 window at block position (bi, bj).
fn pool_window(bi: usize, bj: usize, cols: usize) -> [usize; 4] {
    let r = 2 * bi;
    let c = 2 * bj;
    [
        r * cols + c,
        r * cols + c + 1,
        (r + 1) * cols + c,
        (r + 1) * cols + c + 1,
    ]
}
