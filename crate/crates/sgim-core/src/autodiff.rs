//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] in execution order; the tape is a
//! DAG because every op only references earlier node ids, so replaying it in
//! reverse visits each node after all of its consumers. Matmul and the
//! reductions accumulate in f64 internally, everything is stored as f32.

use crate::error::{Error, Result};

const NORM_EPS: f32 = 1e-12;

/// Dense row-major f32 tensor. `grad` is populated for `requires_grad`
/// leaves after a backward pass (see [`Tape::grad_into`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Zero the gradient buffer in place (allocating it on first use).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f32),
    AddScalar(Id, f32),
    /// Multiply every element of `a` by the scalar node `s`.
    MulScalarNode { a: Id, s: Id },
    /// a[m×k] · b[k×n]
    Matmul { a: Id, b: Id, m: usize, k: usize, n: usize },
    /// a[m×k] · b[n×k]ᵀ
    MatmulNT { a: Id, b: Id, m: usize, k: usize, n: usize },
    Relu(Id),
    Tanh(Id),
    Sigmoid(Id),
    Exp(Id),
    Log(Id),
    Sqrt(Id),
    Sum(Id),
    Mean(Id),
    LogSoftmaxRow { a: Id, rows: usize, cols: usize },
    L2Normalize(Id),
    /// Gather rows of `table` ([vocab×dim]) by index; scatter-add backward.
    EmbedRows { table: Id, ids: Vec<usize>, dim: usize },
    SliceRows { a: Id, start: usize, cols: usize },
    ConcatRows { parts: Vec<Id>, cols: usize },
    /// 4×4 average pool per channel over a [c,h,w] tensor.
    AvgPool4 { a: Id, c: usize, h: usize, w: usize },
    Reshape(Id),
    /// Identity forward, blocks gradient flow.
    Detach(Id),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

/// Records ops during the forward pass; replays them in reverse for gradients.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), checked: false }
    }

    /// A tape that verifies every op output is finite.
    pub fn checked() -> Self {
        Tape { nodes: Vec::new(), checked: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Id {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Register a constant leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Id {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Id {
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn value(&self, id: Id) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: Id) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: Id) -> f32 {
        self.nodes[id.0].data[0]
    }

    /// Gradient accumulated at `id` by the last backward pass.
    pub fn grad(&self, id: Id) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copy the gradient at `id` into the tensor's `grad` buffer
    /// (zeros when no gradient flowed to it).
    pub fn grad_into(&self, id: Id, t: &mut Tensor) {
        let g = match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; t.numel()],
        };
        t.grad = Some(g);
    }

    /// Materialize a node as a standalone tensor.
    pub fn tensor(&self, id: Id) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Id {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, grad: None, requires_grad });
        Id(self.nodes.len() - 1)
    }

    fn emit(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, rg: bool) -> Result<Id> {
        if self.checked {
            if let Some(v) = data.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("{:?} produced non-finite value {v}", op)));
            }
        }
        Ok(self.push(op, shape, data, rg))
    }

    fn same_shape(&self, op: &'static str, a: Id, b: Id) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.emit(Op::Add(a, b), self.nodes[a.0].shape.clone(), data, rg)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.emit(Op::Sub(a, b), self.nodes[a.0].shape.clone(), data, rg)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.emit(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data, rg)
    }

    pub fn scale(&mut self, a: Id, c: f32) -> Result<Id> {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.emit(Op::Scale(a, c), self.nodes[a.0].shape.clone(), data, rg)
    }

    pub fn add_scalar(&mut self, a: Id, c: f32) -> Result<Id> {
        let data = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.emit(Op::AddScalar(a, c), self.nodes[a.0].shape.clone(), data, rg)
    }

    /// Scale tensor `a` by the value of scalar node `s`.
    pub fn mul_scalar_node(&mut self, a: Id, s: Id) -> Result<Id> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::contract("mul_scalar_node: s must be scalar"));
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[a.0].data.iter().map(|x| x * sv).collect();
        let rg = self.rg(a) || self.rg(s);
        self.emit(Op::MulScalarNode { a, s }, self.nodes[a.0].shape.clone(), data, rg)
    }

    // ── linear algebra ───────────────────────────────────────────

    fn matmul_dims(&self, op: &'static str, a: Id, b: Id, transposed: bool) -> Result<(usize, usize, usize)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let bad = || Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(bad());
        }
        if transposed {
            // a[m×k] · b[n×k]ᵀ
            if sa[1] != sb[1] {
                return Err(bad());
            }
            Ok((sa[0], sa[1], sb[0]))
        } else {
            if sa[1] != sb[0] {
                return Err(bad());
            }
            Ok((sa[0], sa[1], sb[1]))
        }
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (m, k, n) = self.matmul_dims("matmul", a, b, false)?;
        let data = mm(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.emit(Op::Matmul { a, b, m, k, n }, vec![m, n], data, rg)
    }

    /// `a[m×k] · b[n×k]ᵀ` — the row-by-row inner-product form used for
    /// similarity matrices.
    pub fn matmul_nt(&mut self, a: Id, b: Id) -> Result<Id> {
        let (m, k, n) = self.matmul_dims("matmul_nt", a, b, true)?;
        let data = mm_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.emit(Op::MatmulNT { a, b, m, k, n }, vec![m, n], data, rg)
    }

    // ── activations and pointwise maps ───────────────────────────

    pub fn relu(&mut self, a: Id) -> Result<Id> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.emit(Op::Relu(a), self.nodes[a.0].shape.clone(), data, rg)
    }

    pub fn tanh(&mut self, a: Id) -> Result<Id> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let rg = self.rg(a);
        self.emit(Op::Tanh(a), self.nodes[a.0].shape.clone(), data, rg)
    }

    pub fn sigmoid(&mut self, a: Id) -> Result<Id> {
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.emit(Op::Sigmoid(a), self.nodes[a.0].shape.clone(), data, rg)
    }

    pub fn exp(&mut self, a: Id) -> Result<Id> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        self.emit(Op::Exp(a), self.nodes[a.0].shape.clone(), data, rg)
    }

    pub fn log(&mut self, a: Id) -> Result<Id> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        self.emit(Op::Log(a), self.nodes[a.0].shape.clone(), data, rg)
    }

    /// Derivative is 1/(2√x); pair with [`Tape::add_scalar`] for an ε-guard
    /// when the argument can reach zero.
    pub fn sqrt(&mut self, a: Id) -> Result<Id> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.sqrt()).collect();
        let rg = self.rg(a);
        self.emit(Op::Sqrt(a), self.nodes[a.0].shape.clone(), data, rg)
    }

    // ── reductions ───────────────────────────────────────────────

    pub fn sum(&mut self, a: Id) -> Result<Id> {
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x as f64).sum();
        let rg = self.rg(a);
        self.emit(Op::Sum(a), vec![1], vec![s as f32], rg)
    }

    pub fn mean(&mut self, a: Id) -> Result<Id> {
        let n = self.nodes[a.0].data.len();
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x as f64).sum();
        let rg = self.rg(a);
        self.emit(Op::Mean(a), vec![1], vec![(s / n as f64) as f32], rg)
    }

    // ── structured ops ───────────────────────────────────────────

    /// Row-wise log-softmax of an [m×n] matrix, max-subtracted for stability.
    pub fn log_softmax_row(&mut self, a: Id) -> Result<Id> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::contract(format!(
                "log_softmax_row expects a matrix, got shape {:?}",
                shape
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let lse = (lse.ln()) as f32 + max;
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        let rg = self.rg(a);
        self.emit(Op::LogSoftmaxRow { a, rows, cols }, shape, out, rg)
    }

    /// x / (‖x‖₂ + ε) over the whole tensor, ε = 1e-12.
    pub fn l2_normalize(&mut self, a: Id) -> Result<Id> {
        let x = &self.nodes[a.0].data;
        let norm = l2_norm(x);
        if self.checked && norm == 0.0 {
            return Err(Error::Numerical("l2_normalize of a zero vector".into()));
        }
        let s = 1.0 / (norm + NORM_EPS);
        let data = x.iter().map(|&v| v * s).collect();
        let rg = self.rg(a);
        self.emit(Op::L2Normalize(a), self.nodes[a.0].shape.clone(), data, rg)
    }

    /// Gather rows of a [vocab×dim] table by index.
    pub fn embed_rows(&mut self, table: Id, ids: &[usize]) -> Result<Id> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::contract("embed_rows expects a matrix table"));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::contract("embed_rows: empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!(
                "embed_rows: index {bad} out of range for table with {vocab} rows"
            )));
        }
        let t = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(table);
        self.emit(
            Op::EmbedRows { table, ids: ids.to_vec(), dim },
            vec![ids.len(), dim],
            out,
            rg,
        )
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Id, start: usize, len: usize) -> Result<Id> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::contract("slice_rows expects a matrix"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if len == 0 || start + len > rows {
            return Err(Error::contract(format!(
                "slice_rows: rows {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let data = self.nodes[a.0].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        self.emit(Op::SliceRows { a, start, cols }, vec![len, cols], data, rg)
    }

    /// Stack matrices with a common column count along the row axis.
    pub fn concat_rows(&mut self, parts: &[Id]) -> Result<Id> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no inputs"));
        }
        let cols = {
            let s = &self.nodes[parts[0].0].shape;
            if s.len() != 2 {
                return Err(Error::contract("concat_rows expects matrices"));
            }
            s[1]
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            rows += s[0];
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.emit(Op::ConcatRows { parts: parts.to_vec(), cols }, vec![rows, cols], data, rg)
    }

    /// 4×4 average pool per channel over a [c,h,w] tensor (h, w multiples of 4).
    pub fn avg_pool4(&mut self, a: Id) -> Result<Id> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 3 || shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(Error::contract(format!(
                "avg_pool4 expects [c,h,w] with h,w multiples of 4, got {:?}",
                shape
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / 4, w / 4);
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            acc += x[ch * h * w + (oy * 4 + dy) * w + ox * 4 + dx] as f64;
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = (acc / 16.0) as f32;
                }
            }
        }
        let rg = self.rg(a);
        self.emit(Op::AvgPool4 { a, c, h, w }, vec![c, oh, ow], out, rg)
    }

    pub fn reshape(&mut self, a: Id, shape: Vec<usize>) -> Result<Id> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        self.emit(Op::Reshape(a), shape, data, rg)
    }

    /// Identity on values, blocks gradients.
    pub fn detach(&mut self, a: Id) -> Result<Id> {
        let data = self.nodes[a.0].data.clone();
        self.emit(Op::Detach(a), self.nodes[a.0].shape.clone(), data, false)
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; accumulates gradients additively
    /// across fan-out into every reachable node that requires grad.
    pub fn backward(&mut self, loss: Id) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.clone().unwrap();
            self.backward_op(i, &op, &g);
        }
        Ok(())
    }

    fn accum(&mut self, id: Id, contrib: &[f32]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => self.nodes[id.0].grad = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op, g: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                let neg: Vec<f32> = g.iter().map(|&v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = zip_map(g, &self.nodes[b.0].data, |gv, bv| gv * bv);
                    self.accum(*a, &da);
                }
                if self.rg(*b) {
                    let db = zip_map(g, &self.nodes[a.0].data, |gv, av| gv * av);
                    self.accum(*b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = g.iter().map(|&v| v * c).collect();
                self.accum(*a, &da);
            }
            Op::AddScalar(a, _) => self.accum(*a, g),
            Op::MulScalarNode { a, s } => {
                if self.rg(*a) {
                    let sv = self.nodes[s.0].data[0];
                    let da: Vec<f32> = g.iter().map(|&v| v * sv).collect();
                    self.accum(*a, &da);
                }
                if self.rg(*s) {
                    let ds: f64 = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &av)| gv as f64 * av as f64)
                        .sum();
                    self.accum(*s, &[ds as f32]);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.rg(*a) {
                    // dA = g · Bᵀ
                    let da = mm_nt(g, &self.nodes[b.0].data, *m, *n, *k);
                    self.accum(*a, &da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · g
                    let db = mm_tn(&self.nodes[a.0].data, g, *k, *m, *n);
                    self.accum(*b, &db);
                }
            }
            Op::MatmulNT { a, b, m, k, n } => {
                if self.rg(*a) {
                    // dA = g · B
                    let da = mm(g, &self.nodes[b.0].data, *m, *n, *k);
                    self.accum(*a, &da);
                }
                if self.rg(*b) {
                    // dB = gᵀ · A
                    let db = mm_tn(g, &self.nodes[a.0].data, *n, *m, *k);
                    self.accum(*b, &db);
                }
            }
            Op::Relu(a) => {
                // subgradient at 0 is 0
                let da = zip_map(&self.nodes[a.0].data, g, |x, gv| if x > 0.0 { gv } else { 0.0 });
                self.accum(*a, &da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[out_idx].data;
                let da = zip_map(y, g, |yv, gv| gv * (1.0 - yv * yv));
                self.accum(*a, &da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[out_idx].data;
                let da = zip_map(y, g, |yv, gv| gv * yv * (1.0 - yv));
                self.accum(*a, &da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[out_idx].data;
                let da = zip_map(y, g, |yv, gv| gv * yv);
                self.accum(*a, &da);
            }
            Op::Log(a) => {
                let da = zip_map(&self.nodes[a.0].data, g, |x, gv| gv / x);
                self.accum(*a, &da);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[out_idx].data;
                let da = zip_map(y, g, |yv, gv| gv * 0.5 / yv);
                self.accum(*a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.nodes[a.0].data.len()];
                self.accum(*a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len() as f32;
                let da = vec![g[0] / n; self.nodes[a.0].data.len()];
                self.accum(*a, &da);
            }
            Op::LogSoftmaxRow { a, rows, cols } => {
                // dx = g − softmax(x) · Σ_row g
                let y = &self.nodes[out_idx].data;
                let mut da = vec![0.0f32; rows * cols];
                for r in 0..*rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().map(|&v| v as f64).sum();
                    for c in 0..*cols {
                        let p = y[r * cols + c].exp();
                        da[r * cols + c] = gr[c] - p * gsum as f32;
                    }
                }
                self.accum(*a, &da);
            }
            Op::L2Normalize(a) => {
                // y = x·s with s = 1/(‖x‖+ε):
                // dx = s·g − (x·g)·x / (‖x‖·(‖x‖+ε)²)
                let x = &self.nodes[a.0].data;
                let norm = l2_norm(x);
                let s = 1.0 / (norm + NORM_EPS);
                let xg: f64 = x.iter().zip(g).map(|(&xv, &gv)| xv as f64 * gv as f64).sum();
                let coef = if norm > 0.0 {
                    (xg / (norm as f64 * ((norm + NORM_EPS) as f64).powi(2))) as f32
                } else {
                    0.0
                };
                let da = zip_map(x, g, |xv, gv| s * gv - coef * xv);
                self.accum(*a, &da);
            }
            Op::EmbedRows { table, ids, dim } => {
                let vocab = self.nodes[table.0].shape[0];
                let mut dt = vec![0.0f32; vocab * dim];
                for (row, &idx) in ids.iter().enumerate() {
                    for c in 0..*dim {
                        dt[idx * dim + c] += g[row * dim + c];
                    }
                }
                self.accum(*table, &dt);
            }
            Op::SliceRows { a, start, cols } => {
                let mut da = vec![0.0f32; self.nodes[a.0].data.len()];
                da[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accum(*a, &da);
            }
            Op::ConcatRows { parts, cols: _ } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.rg(p) {
                        let dp = g[offset..offset + len].to_vec();
                        self.accum(p, &dp);
                    }
                    offset += len;
                }
            }
            Op::AvgPool4 { a, c, h, w } => {
                let (oh, ow) = (h / 4, w / 4);
                let mut da = vec![0.0f32; c * h * w];
                for ch in 0..*c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[ch * oh * ow + oy * ow + ox] / 16.0;
                            for dy in 0..4 {
                                for dx in 0..4 {
                                    da[ch * h * w + (oy * 4 + dy) * w + ox * 4 + dx] = gv;
                                }
                            }
                        }
                    }
                }
                self.accum(*a, &da);
            }
            Op::Reshape(a) => self.accum(*a, g),
            Op::Detach(_) => {}
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn l2_norm(x: &[f32]) -> f32 {
    let ss: f64 = x.iter().map(|&v| v as f64 * v as f64).sum();
    ss.sqrt() as f32
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// a[m×k] · b[k×n], f64 accumulation.
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// a[m×k] · b[n×k]ᵀ, f64 accumulation.
fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av as f64 * bv as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// a[k×m]ᵀ · b[k×n], f64 accumulation.
fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i] as f64;
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences. Returns the max over coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Id) -> Result<Id>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check: h must be positive"));
    }
    let mut leaf = x.clone();
    leaf.requires_grad = true;

    let mut tape = Tape::new();
    let id = tape.leaf(&leaf);
    let y = f(&mut tape, id)?;
    if tape.value(y).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic: Vec<f32> = match tape.grad(id) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let pid = t.constant(probe);
        let out = f(&mut t, pid)?;
        Ok(t.scalar_value(out) as f64)
    };

    let mut max_err = 0.0f32;
    let mut probe = x.clone();
    probe.requires_grad = false;
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data[i] = orig;

        let numeric = ((fp - fm) / (2.0 * h as f64)) as f32;
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0f32.max(a.abs()).max(numeric.abs());
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive triple-loop matmul, kept independent of the engine's kernels.
    fn matmul_oracle(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn det_rand(seed: u64, n: usize) -> Vec<f32> {
        // splitmix64-based uniform in [-1, 1)
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_add(0x9e3779b97f4a7c15);
                let mut z = s;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                z ^= z >> 31;
                ((z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as f32
            })
            .collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = t.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(&Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y), &[17.0, 39.0]);

        // random shapes against the oracle
        let (m, k, n) = (5, 7, 3);
        let av = det_rand(1, m * k);
        let bv = det_rand(2, k * n);
        let mut t = Tape::new();
        let a = t.constant(&Tensor::matrix(m, k, av.clone()).unwrap());
        let b = t.constant(&Tensor::matrix(k, n, bv.clone()).unwrap());
        let y = t.matmul(a, b).unwrap();
        let expect = matmul_oracle(&av, &bv, m, k, n);
        for (got, want) in t.value(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut t = Tape::new();
        let z = t.constant(&Tensor::zeros(vec![2, 3]));
        let b = t.constant(&Tensor::matrix(3, 4, det_rand(3, 12)).unwrap());
        let y = t.matmul(z, b).unwrap();
        assert_eq!(t.shape(y), &[2, 4]);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::zeros(vec![2, 3]));
        let b = t.constant(&Tensor::zeros(vec![4, 5]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn l2_normalize_cases() {
        let mut t = Tape::new();
        let unit = t.constant(&Tensor::vector(vec![1.0, 0.0, 0.0]));
        let y = t.l2_normalize(unit).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0, 0.0]);

        let v = t.constant(&Tensor::vector(vec![3.0, 4.0]));
        let y = t.l2_normalize(v).unwrap();
        assert!((t.value(y)[0] - 0.6).abs() < 1e-6);
        assert!((t.value(y)[1] - 0.8).abs() < 1e-6);
        let norm: f32 = t.value(y).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        // ε-guard maps zero to zero
        let z = t.constant(&Tensor::vector(vec![0.0, 0.0]));
        let y = t.l2_normalize(z).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn checked_mode_flags_zero_normalize_and_nonfinite() {
        let mut t = Tape::checked();
        let z = t.constant(&Tensor::vector(vec![0.0, 0.0]));
        assert!(t.l2_normalize(z).is_err());

        let mut t = Tape::checked();
        let v = t.constant(&Tensor::vector(vec![-1.0]));
        assert!(t.log(v).is_err());
    }

    #[test]
    fn log_softmax_row_cases() {
        // constant row → every entry −log n
        let mut t = Tape::new();
        let a = t.constant(&Tensor::matrix(1, 4, vec![0.7; 4]).unwrap());
        let y = t.log_softmax_row(a).unwrap();
        for &v in t.value(y) {
            assert!((v + (4.0f32).ln()).abs() < 1e-6);
        }

        // direct-formula oracle for [0, 1]
        let mut t = Tape::new();
        let a = t.constant(&Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let y = t.log_softmax_row(a).unwrap();
        assert!((t.value(y)[0] - (-1.31326)).abs() < 1e-4);
        assert!((t.value(y)[1] - (-0.31326)).abs() < 1e-4);

        // shift invariance
        let row = det_rand(7, 6);
        let shifted: Vec<f32> = row.iter().map(|v| v + 3.25).collect();
        let mut t = Tape::new();
        let a = t.constant(&Tensor::matrix(1, 6, row).unwrap());
        let b = t.constant(&Tensor::matrix(1, 6, shifted).unwrap());
        let ya = t.log_softmax_row(a).unwrap();
        let yb = t.log_softmax_row(b).unwrap();
        for (va, vb) in t.value(ya).iter().zip(t.value(yb)) {
            assert!((va - vb).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_identity_and_square() {
        // y = x (scalar) → grad 1
        let x = Tensor::scalar(2.5).with_grad();
        let mut t = Tape::new();
        let id = t.leaf(&x);
        t.backward(id).unwrap();
        assert_eq!(t.grad(id).unwrap(), &[1.0]);

        // y = Σ x⊙x at (1,2,3) → (2,4,6)
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad();
        let mut t = Tape::new();
        let id = t.leaf(&x);
        let sq = t.mul(id, id).unwrap();
        let y = t.sum(sq).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(id).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = Tensor::vector(vec![1.0, 2.0]).with_grad();
        let mut t = Tape::new();
        let id = t.leaf(&x);
        assert!(t.backward(id).is_err());
    }

    #[test]
    fn fanout_accumulates_exactly_twice() {
        let x = Tensor::vector(det_rand(11, 5)).with_grad();

        let grad_of = |double: bool| -> Vec<f32> {
            let mut t = Tape::new();
            let id = t.leaf(&x);
            let f1 = {
                let m = t.mul(id, id).unwrap();
                t.sum(m).unwrap()
            };
            let y = if double {
                let f2 = {
                    let m = t.mul(id, id).unwrap();
                    t.sum(m).unwrap()
                };
                t.add(f1, f2).unwrap()
            } else {
                f1
            };
            t.backward(y).unwrap();
            t.grad(id).unwrap().to_vec()
        };

        let single = grad_of(false);
        let doubled = grad_of(true);
        for (s, d) in single.iter().zip(&doubled) {
            assert_eq!(2.0 * s, *d);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let x = det_rand(13, 24);
        let run = || {
            let mut t = Tape::new();
            let a = t.constant(&Tensor::matrix(4, 6, x.clone()).unwrap());
            let b = t.tanh(a).unwrap();
            let c = t.l2_normalize(b).unwrap();
            let d = t.log_softmax_row(c).unwrap();
            let y = t.sum(d).unwrap();
            t.scalar_value(y).to_bits()
        };
        assert_eq!(run(), run());
    }

    /// Per-op finite-difference sweep: 10 random points each.
    #[test]
    fn grad_check_all_ops() {
        type BuildFn = fn(&mut Tape, Id) -> Result<Id>;
        let cases: Vec<(&str, BuildFn, Vec<usize>)> = vec![
            ("add", |t, x| {
                let c = t.constant_from(vec![2, 3], vec![0.3; 6]);
                let y = t.add(x, c)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![2, 3]),
            ("sub", |t, x| {
                let c = t.constant_from(vec![2, 3], vec![0.4; 6]);
                let y = t.sub(x, c)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![2, 3]),
            ("mul", |t, x| {
                let c = t.constant_from(vec![6], (1..=6).map(|i| i as f32 / 3.0).collect());
                let y = t.mul(x, c)?;
                t.sum(y)
            }, vec![6]),
            ("matmul", |t, x| {
                let c = t.constant_from(vec![3, 2], (1..=6).map(|i| 0.2 * i as f32).collect());
                let y = t.matmul(x, c)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![2, 3]),
            ("matmul_nt", |t, x| {
                let c = t.constant_from(vec![4, 3], (1..=12).map(|i| 0.1 * i as f32).collect());
                let y = t.matmul_nt(x, c)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![2, 3]),
            ("relu", |t, x| {
                let y = t.relu(x)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![8]),
            ("tanh", |t, x| {
                let y = t.tanh(x)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![8]),
            ("exp", |t, x| {
                let y = t.exp(x)?;
                t.sum(y)
            }, vec![6]),
            ("log", |t, x| {
                let s = t.mul(x, x)?;
                let s = t.add_scalar(s, 1.5)?;
                let y = t.log(s)?;
                t.sum(y)
            }, vec![6]),
            ("sqrt", |t, x| {
                let s = t.mul(x, x)?;
                let s = t.add_scalar(s, 0.5)?;
                let y = t.sqrt(s)?;
                t.sum(y)
            }, vec![6]),
            ("sum", |t, x| t.sum(x), vec![7]),
            ("mean", |t, x| {
                let m = t.mul(x, x)?;
                t.mean(m)
            }, vec![7]),
            ("log_softmax_row", |t, x| {
                let y = t.log_softmax_row(x)?;
                let w = t.constant_from(vec![2, 4], (1..=8).map(|i| 0.1 * i as f32).collect());
                let m = t.mul(y, w)?;
                t.sum(m)
            }, vec![2, 4]),
            ("l2_normalize", |t, x| {
                let y = t.l2_normalize(x)?;
                let w = t.constant_from(vec![5], vec![0.9, -0.3, 0.5, 0.1, -0.7]);
                let m = t.mul(y, w)?;
                t.sum(m)
            }, vec![5]),
            ("slice_rows", |t, x| {
                let y = t.slice_rows(x, 1, 2)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![4, 3]),
            ("concat_rows", |t, x| {
                let c = t.constant_from(vec![1, 3], vec![0.2, -0.4, 0.6]);
                let y = t.concat_rows(&[x, c, x])?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![2, 3]),
            ("sigmoid", |t, x| {
                let y = t.sigmoid(x)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![6]),
            ("embed_rows", |t, x| {
                let y = t.embed_rows(x, &[0, 2, 2, 1])?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![3, 4]),
            ("avg_pool4", |t, x| {
                let y = t.avg_pool4(x)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![2, 4, 8]),
            ("mul_scalar_node", |t, x| {
                let s = t.sum(x)?;
                let y = t.mul_scalar_node(x, s)?;
                let m = t.mul(y, y)?;
                t.sum(m)
            }, vec![5]),
        ];

        for (name, f, shape) in cases {
            for trial in 0..10 {
                let n: usize = shape.iter().product();
                let mut data = det_rand(0x5eed + trial * 101 + n as u64, n);
                if name == "relu" {
                    // keep points away from the kink
                    for v in &mut data {
                        if v.abs() < 1e-2 {
                            *v = 0.25;
                        }
                    }
                }
                let x = Tensor::new(shape.clone(), data).unwrap();
                let err = grad_check(f, &x, 1e-3).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: max rel err {err}");
            }
        }
    }

    #[test]
    fn grad_check_linear_is_tiny() {
        let x = Tensor::vector(det_rand(21, 9));
        let err = grad_check(|t, x| t.sum(x), &x, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_rejects_nonscalar() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(grad_check(|t, x| t.mul(x, x), &x, 1e-3).is_err());
    }

    #[test]
    fn grad_check_detects_corrupted_backward() {
        // forward equals Σ x², but detach hides one factor from the tape,
        // so the analytic gradient is x instead of 2x
        let x = Tensor::vector(det_rand(31, 6));
        let err = grad_check(
            |t, x| {
                let frozen = t.detach(x)?;
                let m = t.mul(x, frozen)?;
                t.sum(m)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err > 1e-2, "negative control too accurate: {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]).with_grad();
        let mut t = Tape::new();
        let id = t.leaf(&x);
        let d = t.detach(id).unwrap();
        let m = t.mul(d, d).unwrap();
        let y = t.sum(m).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(id).is_none());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::vector(vec![0.0, -1.0, 2.0]).with_grad();
        let mut t = Tape::new();
        let id = t.leaf(&x);
        let y = t.relu(id).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(id).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn leaf_grad_has_leaf_shape() {
        let x = Tensor::matrix(3, 4, det_rand(41, 12)).unwrap().with_grad();
        let mut t = Tape::new();
        let id = t.leaf(&x);
        let m = t.mul(id, id).unwrap();
        let y = t.sum(m).unwrap();
        t.backward(y).unwrap();
        let mut out = x.clone();
        t.grad_into(id, &mut out);
        assert_eq!(out.grad.as_ref().unwrap().len(), out.numel());
    }
}
