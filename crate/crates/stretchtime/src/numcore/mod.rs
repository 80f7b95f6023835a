//! Dense f64 tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns an arena of [`Tensor`] nodes and an ordered record of
//! primitive applications. Forward methods compute eagerly; [`Tape::backward`]
//! replays the record in reverse, accumulating adjoints into `grad` buffers.
//! All computation is 64-bit; layouts are row-major; broadcasting is limited
//! to a trailing-suffix rule (the smaller shape must be a suffix of the
//! larger one, the empty shape acting as a scalar).
//!
//! Tapes are single-threaded. Distinct tapes share no state and may run on
//! distinct threads.

pub mod gradcheck;
pub mod kernels;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{primitive}: shape mismatch: {detail}")]
    ShapeMismatch {
        primitive: &'static str,
        detail: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {context} (flat index {index})")]
    NonFinite { context: String, index: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

/// Handle into a tape's node arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One node: a dense f64 buffer plus gradient metadata.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// How the operands of a binary elementwise op line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Align {
    Same,
    /// rhs shape is a strict suffix of lhs shape; rhs is repeated over the
    /// leading dims.
    RhsSuffix,
    /// lhs shape is a strict suffix of rhs shape.
    LhsSuffix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

/// Recorded primitive application. Saved forward context (values needed by
/// the reverse pass that are not retained in the arena) rides along.
#[derive(Debug, Clone)]
enum Op {
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Bin {
        kind: BinKind,
        a: TensorId,
        b: TensorId,
        align: Align,
    },
    ScalarMul {
        x: TensorId,
        factor: f64,
    },
    Concat {
        inputs: Vec<TensorId>,
        sizes: Vec<usize>,
        outer: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Transpose {
        x: TensorId,
        rows: usize,
        cols: usize,
    },
    Reduce {
        x: TensorId,
        axis: usize,
        mean: bool,
    },
    ReduceAll {
        x: TensorId,
        mean: bool,
    },
    Softmax {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Unary {
        kind: UnaryKind,
        x: TensorId,
    },
    CumSum {
        x: TensorId,
        axis: usize,
    },
    MaskedZero {
        x: TensorId,
        mask: TensorId,
    },
    Embedding {
        table: TensorId,
        indices: Vec<usize>,
    },
    Reshape {
        x: TensorId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Softplus,
    Tanh,
    Exp,
    Sin,
    Cos,
}

#[derive(Debug, Clone)]
struct Step {
    op: Op,
    out: TensorId,
}

/// Arena of tensors plus the ordered record of primitive applications.
pub struct Tape {
    nodes: Vec<Tensor>,
    steps: Vec<Step>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(primitive: &'static str, detail: String) -> NumError {
    NumError::ShapeMismatch { primitive, detail }
}

fn align_of(primitive: &'static str, a: &[usize], b: &[usize]) -> Result<Align> {
    if a == b {
        Ok(Align::Same)
    } else if a.len() > b.len() && a[a.len() - b.len()..] == *b {
        Ok(Align::RhsSuffix)
    } else if b.len() > a.len() && b[b.len() - a.len()..] == *a {
        Ok(Align::LhsSuffix)
    } else {
        Err(shape_err(
            primitive,
            format!("{a:?} and {b:?} are neither equal nor suffix-broadcastable"),
        ))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            steps: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records; use for pure evaluation.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            steps: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn recorded_steps(&self) -> usize {
        self.steps.len()
    }

    // ── node access ──────────────────────────────────────────────────

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.values(id).len(), 1);
        self.values(id)[0]
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── leaf creation ────────────────────────────────────────────────

    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            values.len(),
            numel(&shape),
            "leaf buffer length {} does not match shape {:?}",
            values.len(),
            shape
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            values,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        id
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], vec![])
    }

    fn push_result(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: impl FnOnce() -> Op,
    ) -> TensorId {
        let record = requires_grad && self.grad_enabled;
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            values,
            requires_grad: record,
            grad: None,
        });
        if record {
            self.steps.push(Step { op: op(), out: id });
        }
        id
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── primitives ───────────────────────────────────────────────────

    /// 2-D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.values(a), self.values(b), &mut out, m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_result(out, vec![m, n], rg, || Op::Matmul { a, b, m, k, n }))
    }

    fn binary(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let align = align_of(name, self.shape(a), self.shape(b))?;
        let (big, small) = match align {
            Align::LhsSuffix => (b, a),
            _ => (a, b),
        };
        let out_shape = self.shape(big).to_vec();
        let bn = self.values(big).len();
        let sn = self.values(small).len().max(1);
        debug_assert_eq!(bn % sn, 0);
        let mut out = vec![0.0; bn];
        {
            let av = self.values(a);
            let bv = self.values(b);
            let apply = |x: f64, y: f64| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
            };
            match align {
                Align::Same => {
                    for ((o, x), y) in out.iter_mut().zip(av).zip(bv) {
                        *o = apply(*x, *y);
                    }
                }
                Align::RhsSuffix => {
                    for (ochunk, achunk) in out.chunks_mut(sn).zip(av.chunks(sn)) {
                        for ((o, x), y) in ochunk.iter_mut().zip(achunk).zip(bv) {
                            *o = apply(*x, *y);
                        }
                    }
                }
                Align::LhsSuffix => {
                    for (ochunk, bchunk) in out.chunks_mut(sn).zip(bv.chunks(sn)) {
                        for ((o, x), y) in ochunk.iter_mut().zip(av).zip(bchunk) {
                            *o = apply(*x, *y);
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_result(out, out_shape, rg, || Op::Bin { kind, a, b, align }))
    }

    /// Elementwise sum; the smaller operand may be a trailing suffix of the
    /// larger and is repeated over the leading dims.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scalar_mul(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push_result(out, shape, rg, || Op::ScalarMul { x, factor })
    }

    /// x + c, sugar over a scalar constant plus broadcast add.
    pub fn scalar_add(&mut self, x: TensorId, offset: f64) -> TensorId {
        let c = self.scalar(offset);
        self.add(x, c).expect("scalar broadcast cannot fail")
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.scalar_mul(x, -1.0)
    }

    /// Concatenate along the last dim. All leading dims must agree.
    pub fn concat(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.is_empty() {
            return Err(shape_err("concat", "inputs must have rank >= 1".into()));
        }
        let lead = &first[..first.len() - 1];
        let mut sizes = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err(
                    "concat",
                    format!("leading dims differ: {first:?} vs {s:?}"),
                ));
            }
            sizes.push(s[s.len() - 1]);
        }
        let total: usize = sizes.iter().sum();
        let outer = numel(lead);
        let mut out = vec![0.0; outer * total];
        for r in 0..outer {
            let mut off = 0;
            for (idx, &id) in inputs.iter().enumerate() {
                let w = sizes[idx];
                let src = &self.values(id)[r * w..(r + 1) * w];
                out[r * total + off..r * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.needs_grad(inputs);
        let inputs = inputs.to_vec();
        Ok(self.push_result(out, shape, rg, || Op::Concat {
            inputs,
            sizes,
            outer,
        }))
    }

    /// Contiguous slice along `axis`.
    pub fn slice(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("axis {axis} range {start}..{} of shape {s:?}", start + len),
            ));
        }
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let mut out = vec![0.0; outer * len * inner];
        let src_stride = s[axis] * inner;
        for o in 0..outer {
            let src = &self.values(x)
                [o * src_stride + start * inner..o * src_stride + (start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.needs_grad(&[x]);
        Ok(self.push_result(out, shape, rg, || Op::Slice {
            x,
            axis,
            start,
            len,
        }))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err(
                "transpose",
                format!("expected rank 2, got {s:?}"),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; rows * cols];
        kernels::transpose(self.values(x), &mut out, rows, cols);
        let rg = self.needs_grad(&[x]);
        Ok(
            self.push_result(out, vec![cols, rows], rg, || Op::Transpose {
                x,
                rows,
                cols,
            }),
        )
    }

    fn reduce(&mut self, x: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let name = if mean { "mean" } else { "sum" };
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err(
                if mean { "mean" } else { "sum" },
                format!("axis {axis} of shape {s:?}"),
            ));
        }
        let _ = name;
        let outer: usize = s[..axis].iter().product();
        let dim = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let v = self.values(x);
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for d in 0..dim {
                    acc += v[(o * dim + d) * inner + i];
                }
                out[o * inner + i] = if mean { acc / dim as f64 } else { acc };
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let rg = self.needs_grad(&[x]);
        Ok(self.push_result(out, shape, rg, || Op::Reduce { x, axis, mean }))
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let acc: f64 = self.values(x).iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push_result(vec![acc], vec![], rg, || Op::ReduceAll { x, mean: false })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.values(x).len().max(1);
        let acc: f64 = self.values(x).iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push_result(vec![acc / n as f64], vec![], rg, || Op::ReduceAll {
            x,
            mean: true,
        })
    }

    /// Row-wise softmax over the last dim.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(shape_err("softmax", "rank must be >= 1".into()));
        }
        let cols = s[s.len() - 1];
        let rows = numel(&s) / cols;
        let mut out = vec![0.0; rows * cols];
        let v = self.values(x);
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (d, &xv) in dst.iter_mut().zip(row) {
                *d = (xv - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push_result(out, s, rg, || Op::Softmax { x }))
    }

    /// Layer normalization over the last dim with learnable scale and shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        const EPS: f64 = 1e-5;
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(shape_err("layer_norm", "rank must be >= 1".into()));
        }
        let cols = s[s.len() - 1];
        let rows = numel(&s) / cols;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "scale {:?} / shift {:?} must be [{cols}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        {
            let v = self.values(x);
            let g = self.values(gamma);
            let b = self.values(beta);
            for r in 0..rows {
                let row = &v[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let istd = 1.0 / (var + EPS).sqrt();
                inv_std[r] = istd;
                for c in 0..cols {
                    let h = (row[c] - mean) * istd;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * g[c] + b[c];
                }
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push_result(out, s, rg, || Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        }))
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> TensorId {
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Softplus => kernels::softplus(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Sin => v.sin(),
                UnaryKind::Cos => v.cos(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push_result(out, shape, rg, || Op::Unary { kind, x })
    }

    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn sin(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sin, x)
    }
    pub fn cos(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Cos, x)
    }

    /// Inclusive cumulative sum along `axis`.
    pub fn cumsum(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("cumsum", format!("axis {axis} of shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let dim = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = self.values(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for d in 0..dim {
                    acc += out[(o * dim + d) * inner + i];
                    out[(o * dim + d) * inner + i] = acc;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push_result(out, s, rg, || Op::CumSum { x, axis }))
    }

    /// Elementwise product with a non-differentiable mask (dropout
    /// application). The mask may be a trailing suffix of `x`.
    pub fn masked_zero(&mut self, x: TensorId, mask: TensorId) -> Result<TensorId> {
        if self.nodes[mask.0].requires_grad {
            return Err(NumError::Invalid(
                "masked_zero: mask must not require grad".into(),
            ));
        }
        let align = align_of("masked_zero", self.shape(x), self.shape(mask))?;
        if align == Align::LhsSuffix {
            return Err(shape_err(
                "masked_zero",
                format!(
                    "mask {:?} larger than input {:?}",
                    self.shape(mask),
                    self.shape(x)
                ),
            ));
        }
        let xv = self.values(x);
        let mv = self.values(mask);
        let ln = xv.len();
        let sn = mv.len().max(1);
        let mut out = vec![0.0; ln];
        for (ochunk, xchunk) in out.chunks_mut(sn).zip(xv.chunks(sn)) {
            for ((o, x), m) in ochunk.iter_mut().zip(xchunk).zip(mv) {
                *o = x * m;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push_result(out, shape, rg, || Op::MaskedZero { x, mask }))
    }

    /// Row gather: out[i] = table[indices[i]], table of shape (rows, d).
    pub fn embedding(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err(
                "embedding",
                format!("table must be rank 2, got {s:?}"),
            ));
        }
        let (rows, d) = (s[0], s[1]);
        for &ix in indices {
            if ix >= rows {
                return Err(shape_err(
                    "embedding",
                    format!("index {ix} out of range for table with {rows} rows"),
                ));
            }
        }
        let mut out = vec![0.0; indices.len() * d];
        for (i, &ix) in indices.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&self.values(table)[ix * d..(ix + 1) * d]);
        }
        let rg = self.needs_grad(&[table]);
        let indices = indices.to_vec();
        Ok(
            self.push_result(out, vec![indices.len(), d], rg, || Op::Embedding {
                table,
                indices,
            }),
        )
    }

    /// Reinterpret the buffer under a new shape of identical element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.values(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.values(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push_result(out, shape, rg, || Op::Reshape { x }))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Propagate d(loss)/d(node) into every `requires_grad` node reachable
    /// from `loss`. Gradients accumulate additively across calls.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for si in (0..self.steps.len()).rev() {
            let out = self.steps[si].out;
            let d_out = match adj[out.0].take() {
                Some(d) => d,
                None => continue,
            };
            self.backprop(&self.steps[si].op, out, &d_out, &mut adj)?;
            // Restore so intermediate adjoints stay queryable afterwards.
            adj[out.0] = Some(d_out);
        }

        for (i, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                if self.nodes[i].requires_grad {
                    match &mut self.nodes[i].grad {
                        Some(g) => {
                            for (gi, ai) in g.iter_mut().zip(&a) {
                                *gi += ai;
                            }
                        }
                        None => self.nodes[i].grad = Some(a),
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(adj: &mut [Option<Vec<f64>>], id: TensorId, contrib: &[f64]) {
        match &mut adj[id.0] {
            Some(a) => {
                for (ai, ci) in a.iter_mut().zip(contrib) {
                    *ai += ci;
                }
            }
            None => adj[id.0] = Some(contrib.to_vec()),
        }
    }

    /// d_out elementwise times `other`, with `other` cycling when it is a
    /// trailing suffix of the output shape.
    fn cycled_product(d_out: &[f64], other: &[f64]) -> Vec<f64> {
        let sn = other.len().max(1);
        let mut out = vec![0.0; d_out.len()];
        for (ochunk, dchunk) in out.chunks_mut(sn).zip(d_out.chunks(sn)) {
            for ((o, d), x) in ochunk.iter_mut().zip(dchunk).zip(other) {
                *o = d * x;
            }
        }
        out
    }

    fn reduce_to_suffix(d_out: &[f64], small_len: usize) -> Vec<f64> {
        let mut d = vec![0.0; small_len];
        for chunk in d_out.chunks(small_len) {
            for (di, v) in d.iter_mut().zip(chunk) {
                *di += v;
            }
        }
        d
    }

    fn backprop(
        &self,
        op: &Op,
        out: TensorId,
        d_out: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let _ = out;
        match op {
            Op::Matmul { a, b, m, k, n } => {
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(d_out, self.values(*b), &mut da, *m, *n, *k);
                    Self::accumulate(adj, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(self.values(*a), d_out, &mut db, *m, *k, *n);
                    Self::accumulate(adj, *b, &db);
                }
            }
            Op::Bin { kind, a, b, align } => {
                let la = self.values(*a).len();
                let lb = self.values(*b).len();
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = match (kind, align) {
                        (BinKind::Mul, _) => {
                            let prod = Self::cycled_product(d_out, self.values(*b));
                            if *align == Align::LhsSuffix {
                                Self::reduce_to_suffix(&prod, la)
                            } else {
                                prod
                            }
                        }
                        (_, Align::LhsSuffix) => Self::reduce_to_suffix(d_out, la),
                        _ => d_out.to_vec(),
                    };
                    Self::accumulate(adj, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = match (kind, align) {
                        (BinKind::Mul, _) => {
                            let prod = Self::cycled_product(d_out, self.values(*a));
                            if *align == Align::RhsSuffix {
                                Self::reduce_to_suffix(&prod, lb)
                            } else {
                                prod
                            }
                        }
                        (BinKind::Add, Align::RhsSuffix) => Self::reduce_to_suffix(d_out, lb),
                        (BinKind::Add, _) => d_out.to_vec(),
                        (BinKind::Sub, Align::RhsSuffix) => {
                            let d = Self::reduce_to_suffix(d_out, lb);
                            d.iter().map(|v| -v).collect()
                        }
                        (BinKind::Sub, _) => d_out.iter().map(|v| -v).collect(),
                    };
                    Self::accumulate(adj, *b, &db);
                }
            }
            Op::ScalarMul { x, factor } => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<f64> = d_out.iter().map(|d| d * factor).collect();
                    Self::accumulate(adj, *x, &dx);
                }
            }
            Op::Concat {
                inputs,
                sizes,
                outer,
            } => {
                let total: usize = sizes.iter().sum();
                for (idx, &inp) in inputs.iter().enumerate() {
                    if !self.nodes[inp.0].requires_grad {
                        continue;
                    }
                    let w = sizes[idx];
                    let off: usize = sizes[..idx].iter().sum();
                    let mut d = vec![0.0; outer * w];
                    for r in 0..*outer {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&d_out[r * total + off..r * total + off + w]);
                    }
                    Self::accumulate(adj, inp, &d);
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                if self.nodes[x.0].requires_grad {
                    let s = self.shape(*x);
                    let inner: usize = s[axis + 1..].iter().product();
                    let outer: usize = s[..*axis].iter().product();
                    let src_stride = s[*axis] * inner;
                    let mut d = vec![0.0; self.values(*x).len()];
                    for o in 0..outer {
                        d[o * src_stride + start * inner..o * src_stride + (start + len) * inner]
                            .copy_from_slice(&d_out[o * len * inner..(o + 1) * len * inner]);
                    }
                    Self::accumulate(adj, *x, &d);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if self.nodes[x.0].requires_grad {
                    let mut d = vec![0.0; rows * cols];
                    kernels::transpose(d_out, &mut d, *cols, *rows);
                    Self::accumulate(adj, *x, &d);
                }
            }
            Op::Reduce { x, axis, mean } => {
                if self.nodes[x.0].requires_grad {
                    let s = self.shape(*x);
                    let outer: usize = s[..*axis].iter().product();
                    let dim = s[*axis];
                    let inner: usize = s[*axis + 1..].iter().product();
                    let scale = if *mean { 1.0 / dim as f64 } else { 1.0 };
                    let mut d = vec![0.0; self.values(*x).len()];
                    for o in 0..outer {
                        for dd in 0..dim {
                            for i in 0..inner {
                                d[(o * dim + dd) * inner + i] = d_out[o * inner + i] * scale;
                            }
                        }
                    }
                    Self::accumulate(adj, *x, &d);
                }
            }
            Op::ReduceAll { x, mean } => {
                if self.nodes[x.0].requires_grad {
                    let n = self.values(*x).len();
                    let scale = if *mean { 1.0 / n as f64 } else { 1.0 };
                    let d = vec![d_out[0] * scale; n];
                    Self::accumulate(adj, *x, &d);
                }
            }
            Op::Softmax { x } => {
                if self.nodes[x.0].requires_grad {
                    // d_x = y * (d_y - sum(d_y * y)) per row, with y the
                    // retained forward output.
                    let y = self.values(out);
                    let s = self.shape(*x);
                    let cols = s[s.len() - 1];
                    let rows = y.len() / cols;
                    let mut d = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yo = &y[r * cols..(r + 1) * cols];
                        let go = &d_out[r * cols..(r + 1) * cols];
                        let dot: f64 = yo.iter().zip(go).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] = yo[c] * (go[c] - dot);
                        }
                    }
                    Self::accumulate(adj, *x, &d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = self.shape(*gamma)[0];
                let rows = xhat.len() / cols;
                let g = self.values(*gamma);
                if self.nodes[x.0].requires_grad {
                    let mut d = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_gdy = 0.0;
                        let mut mean_gdy_xhat = 0.0;
                        for c in 0..cols {
                            let gdy = g[c] * d_out[r * cols + c];
                            mean_gdy += gdy;
                            mean_gdy_xhat += gdy * xhat[r * cols + c];
                        }
                        mean_gdy /= cols as f64;
                        mean_gdy_xhat /= cols as f64;
                        for c in 0..cols {
                            let gdy = g[c] * d_out[r * cols + c];
                            d[r * cols + c] =
                                (gdy - mean_gdy - xhat[r * cols + c] * mean_gdy_xhat) * inv_std[r];
                        }
                    }
                    Self::accumulate(adj, *x, &d);
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += d_out[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    Self::accumulate(adj, *gamma, &dg);
                }
                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += d_out[r * cols + c];
                        }
                    }
                    Self::accumulate(adj, *beta, &db);
                }
            }
            Op::Unary { kind, x } => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.values(*x);
                    let d: Vec<f64> = d_out
                        .iter()
                        .zip(xv)
                        .map(|(d, &v)| {
                            d * match kind {
                                UnaryKind::Softplus => kernels::sigmoid(v),
                                UnaryKind::Tanh => {
                                    let t = v.tanh();
                                    1.0 - t * t
                                }
                                UnaryKind::Exp => v.exp(),
                                UnaryKind::Sin => v.cos(),
                                UnaryKind::Cos => -v.sin(),
                            }
                        })
                        .collect();
                    Self::accumulate(adj, *x, &d);
                }
            }
            Op::CumSum { x, axis } => {
                if self.nodes[x.0].requires_grad {
                    // adjoint of inclusive cumsum = reversed inclusive cumsum.
                    let s = self.shape(*x);
                    let outer: usize = s[..*axis].iter().product();
                    let dim = s[*axis];
                    let inner: usize = s[*axis + 1..].iter().product();
                    let mut d = d_out.to_vec();
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut acc = 0.0;
                            for dd in (0..dim).rev() {
                                acc += d[(o * dim + dd) * inner + i];
                                d[(o * dim + dd) * inner + i] = acc;
                            }
                        }
                    }
                    Self::accumulate(adj, *x, &d);
                }
            }
            Op::MaskedZero { x, mask } => {
                if self.nodes[x.0].requires_grad {
                    let d = Self::cycled_product(d_out, self.values(*mask));
                    Self::accumulate(adj, *x, &d);
                }
            }
            Op::Embedding { table, indices } => {
                if self.nodes[table.0].requires_grad {
                    let d_table_len = self.values(*table).len();
                    let d = self.shape(*table)[1];
                    let mut dt = vec![0.0; d_table_len];
                    for (i, &ix) in indices.iter().enumerate() {
                        for c in 0..d {
                            dt[ix * d + c] += d_out[i * d + c];
                        }
                    }
                    Self::accumulate(adj, *table, &dt);
                }
            }
            Op::Reshape { x } => {
                if self.nodes[x.0].requires_grad {
                    Self::accumulate(adj, *x, d_out);
                }
            }
        }
        Ok(())
    }
}
