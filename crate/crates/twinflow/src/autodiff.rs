//! Tape-based reverse-mode automatic differentiation over dense f64 arrays
//! of rank 1 or 2.
//!
//! A [`Tape`] records primitive operations during the forward pass. Values
//! built without a tape node are constants: they participate in arithmetic
//! but no gradient flows through them. [`Tape::backward`] replays the tape
//! in reverse insertion order once and returns per-node gradient buffers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} do not conform")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward requires a loss recorded on the tape")]
    DetachedLoss,
    #[error("gather index {index} out of range for table with {rows} rows")]
    GatherOutOfRange { index: usize, rows: usize },
}

/// Shape of a value: rank 1 (`[n]`) or rank 2 (`[rows, cols]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn vector(n: usize) -> Self {
        assert!(n > 0, "zero-sized shape");
        Shape { dims: vec![n] }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized shape");
        Shape { dims: vec![rows, cols] }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Rows/cols view: rank-1 values are treated as a single row.
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.dims[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn is_scalar(&self) -> bool {
        self.len() == 1
    }
}

/// Handle into the tape's node list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A dense f64 value, optionally recorded on a tape.
#[derive(Debug, Clone)]
pub struct DiffValue {
    pub data: Vec<f64>,
    pub shape: Shape,
    node: Option<NodeId>,
}

impl DiffValue {
    pub fn constant(data: Vec<f64>, shape: Shape) -> Self {
        assert_eq!(data.len(), shape.len(), "buffer length must match shape");
        DiffValue { data, shape, node: None }
    }

    pub fn scalar(v: f64) -> Self {
        DiffValue::constant(vec![v], Shape::vector(1))
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        DiffValue::constant(data, Shape::vector(n))
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        DiffValue::constant(data, Shape::matrix(rows, cols))
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Forward-identity, backward-zero: same data, no tape node.
pub fn stop_gradient(v: &DiffValue) -> DiffValue {
    DiffValue {
        data: v.data.clone(),
        shape: v.shape.clone(),
        node: None,
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(f64, NodeId),
    MatMul(NodeId, NodeId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Silu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatRows(NodeId, NodeId),
    RowScale { m: NodeId, s: NodeId },
    GatherRows { table: NodeId, indices: Vec<usize> },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    shape: Shape,
}

/// Gradient buffers keyed by node id, produced by [`Tape::backward`].
pub struct GradMap {
    grads: Vec<Vec<f64>>,
}

impl GradMap {
    /// Gradient buffer for a node; zero-filled if the loss never reached it.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

/// One tape per loss evaluation; cleared (dropped) after backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable leaf (parameter or input) on the tape.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape) -> DiffValue {
        assert_eq!(data.len(), shape.len(), "buffer length must match shape");
        let id = self.push(Op::Leaf, data.clone(), shape.clone());
        DiffValue { data, shape, node: Some(id) }
    }

    fn push(&mut self, op: Op, value: Vec<f64>, shape: Shape) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, shape });
        id
    }

    /// Intern an unrecorded operand as a constant leaf so backward can
    /// read its value; its gradient buffer is simply never consumed.
    fn operand(&mut self, v: &DiffValue) -> NodeId {
        match v.node {
            Some(id) => id,
            None => self.push(Op::Leaf, v.data.clone(), v.shape.clone()),
        }
    }

    fn record_binary(
        &mut self,
        op_name: &'static str,
        a: &DiffValue,
        b: &DiffValue,
        data: Vec<f64>,
        shape: Shape,
        make: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> DiffValue {
        let _ = op_name;
        if !a.is_recorded() && !b.is_recorded() {
            return DiffValue { data, shape, node: None };
        }
        let ia = self.operand(a);
        let ib = self.operand(b);
        let id = self.push(make(ia, ib), data.clone(), shape.clone());
        DiffValue { data, shape, node: Some(id) }
    }

    fn record_unary(
        &mut self,
        a: &DiffValue,
        data: Vec<f64>,
        shape: Shape,
        make: impl FnOnce(NodeId) -> Op,
    ) -> DiffValue {
        if !a.is_recorded() {
            return DiffValue { data, shape, node: None };
        }
        let ia = a.node.unwrap();
        let id = self.push(make(ia), data.clone(), shape.clone());
        DiffValue { data, shape, node: Some(id) }
    }

    // ── elementwise binary ops (scalar broadcast allowed) ──

    fn zip(
        &mut self,
        op: &'static str,
        a: &DiffValue,
        b: &DiffValue,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<DiffValue, AutodiffError> {
        let (data, shape) = if a.shape == b.shape {
            (
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                a.shape.clone(),
            )
        } else if b.shape.is_scalar() {
            let s = b.data[0];
            (a.data.iter().map(|&x| f(x, s)).collect(), a.shape.clone())
        } else if a.shape.is_scalar() {
            let s = a.data[0];
            (b.data.iter().map(|&y| f(s, y)).collect(), b.shape.clone())
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: a.shape.dims.clone(),
                rhs: b.shape.dims.clone(),
            });
        };
        Ok(self.record_binary(op, a, b, data, shape, make))
    }

    pub fn add(&mut self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue, AutodiffError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue, AutodiffError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue, AutodiffError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scalar_mul(&mut self, c: f64, a: &DiffValue) -> DiffValue {
        let data = a.data.iter().map(|&x| c * x).collect();
        let shape = a.shape.clone();
        self.record_unary(a, data, shape, |ia| Op::ScalarMul(c, ia))
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue, AutodiffError> {
        if a.shape.rank() != 2 || b.shape.rank() != 2 || a.shape.cols() != b.shape.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.dims.clone(),
                rhs: b.shape.dims.clone(),
            });
        }
        let (m, k, n) = (a.shape.rows(), a.shape.cols(), b.shape.cols());
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        let shape = Shape::matrix(m, n);
        Ok(self.record_binary("matmul", a, b, data, shape, Op::MatMul))
    }

    /// `x·W + b` with the bias broadcast over rows. Rank-1 `x` is treated
    /// as a single row and yields a rank-1 result.
    pub fn affine(
        &mut self,
        x: &DiffValue,
        w: &DiffValue,
        b: &DiffValue,
    ) -> Result<DiffValue, AutodiffError> {
        if w.shape.rank() != 2 || x.shape.cols() != w.shape.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                lhs: x.shape.dims.clone(),
                rhs: w.shape.dims.clone(),
            });
        }
        let (rows, k, n) = (x.shape.rows(), w.shape.rows(), w.shape.cols());
        if b.shape.rank() != 1 || b.shape.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                lhs: w.shape.dims.clone(),
                rhs: b.shape.dims.clone(),
            });
        }
        let mut data = matmul_raw(&x.data, &w.data, rows, k, n);
        for r in 0..rows {
            for c in 0..n {
                data[r * n + c] += b.data[c];
            }
        }
        let shape = if x.shape.rank() == 1 {
            Shape::vector(n)
        } else {
            Shape::matrix(rows, n)
        };
        if !x.is_recorded() && !w.is_recorded() && !b.is_recorded() {
            return Ok(DiffValue { data, shape, node: None });
        }
        let ix = self.operand(x);
        let iw = self.operand(w);
        let ib = self.operand(b);
        let id = self.push(Op::Affine { x: ix, w: iw, b: ib }, data.clone(), shape.clone());
        Ok(DiffValue { data, shape, node: Some(id) })
    }

    // ── nonlinearities ──

    pub fn tanh(&mut self, a: &DiffValue) -> DiffValue {
        let data = a.data.iter().map(|&x| x.tanh()).collect();
        let shape = a.shape.clone();
        self.record_unary(a, data, shape, Op::Tanh)
    }

    pub fn silu(&mut self, a: &DiffValue) -> DiffValue {
        let data = a.data.iter().map(|&x| x * sigmoid(x)).collect();
        let shape = a.shape.clone();
        self.record_unary(a, data, shape, Op::Silu)
    }

    pub fn square(&mut self, a: &DiffValue) -> DiffValue {
        let data = a.data.iter().map(|&x| x * x).collect();
        let shape = a.shape.clone();
        self.record_unary(a, data, shape, Op::Square)
    }

    // ── reductions ──

    pub fn sum(&mut self, a: &DiffValue) -> DiffValue {
        let s: f64 = a.data.iter().sum();
        self.record_unary(a, vec![s], Shape::vector(1), Op::Sum)
    }

    pub fn mean(&mut self, a: &DiffValue) -> DiffValue {
        let s: f64 = a.data.iter().sum();
        let m = s / a.data.len() as f64;
        self.record_unary(a, vec![m], Shape::vector(1), Op::Mean)
    }

    // ── structural ops ──

    /// Stack `a` on top of `b` along the row axis (rank-1 values concatenate).
    pub fn concat_rows(&mut self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue, AutodiffError> {
        let shape = if a.shape.rank() == 1 && b.shape.rank() == 1 {
            Shape::vector(a.shape.len() + b.shape.len())
        } else if a.shape.rank() == 2 && b.shape.rank() == 2 && a.shape.cols() == b.shape.cols() {
            Shape::matrix(a.shape.rows() + b.shape.rows(), a.shape.cols())
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape.dims.clone(),
                rhs: b.shape.dims.clone(),
            });
        };
        let mut data = Vec::with_capacity(shape.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(self.record_binary("concat_rows", a, b, data, shape, Op::ConcatRows))
    }

    /// Scale each row of `m` by the matching entry of the rank-1 vector `s`.
    pub fn row_scale(&mut self, m: &DiffValue, s: &DiffValue) -> Result<DiffValue, AutodiffError> {
        if m.shape.rank() != 2 || s.shape.rank() != 1 || s.shape.len() != m.shape.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_scale",
                lhs: m.shape.dims.clone(),
                rhs: s.shape.dims.clone(),
            });
        }
        let (rows, cols) = (m.shape.rows(), m.shape.cols());
        let mut data = m.data.clone();
        for r in 0..rows {
            let f = s.data[r];
            for c in 0..cols {
                data[r * cols + c] *= f;
            }
        }
        let shape = m.shape.clone();
        Ok(self.record_binary("row_scale", m, s, data, shape, |im, is| Op::RowScale {
            m: im,
            s: is,
        }))
    }

    /// Row lookup into a rank-2 table (embedding gather).
    pub fn gather_rows(
        &mut self,
        table: &DiffValue,
        indices: &[usize],
    ) -> Result<DiffValue, AutodiffError> {
        let (rows, cols) = (table.shape.rows(), table.shape.cols());
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::GatherOutOfRange { index: i, rows });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&table.data[i * cols..(i + 1) * cols]);
        }
        let shape = Shape::matrix(indices.len(), cols);
        if !table.is_recorded() {
            return Ok(DiffValue { data, shape, node: None });
        }
        let it = table.node.unwrap();
        let id = self.push(
            Op::GatherRows { table: it, indices: indices.to_vec() },
            data.clone(),
            shape.clone(),
        );
        Ok(DiffValue { data, shape, node: Some(id) })
    }

    // ── backward ──

    /// Reverse sweep from a recorded scalar loss. Every node gets a
    /// gradient buffer; nodes the loss never reached keep zeros.
    pub fn backward(&self, loss: &DiffValue) -> Result<GradMap, AutodiffError> {
        let root = loss.node.ok_or(AutodiffError::DetachedLoss)?;
        if loss.shape.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss.shape.dims.clone()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            // splitting around i lets us write into parent buffers (< i)
            // while reading this node's gradient
            let (lower, upper) = grads.split_at_mut(i);
            let dz = &upper[0];
            if dz.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate_broadcast(lower, *a, dz, 1.0, &self.nodes);
                    accumulate_broadcast(lower, *b, dz, 1.0, &self.nodes);
                }
                Op::Sub(a, b) => {
                    accumulate_broadcast(lower, *a, dz, 1.0, &self.nodes);
                    accumulate_broadcast(lower, *b, dz, -1.0, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if av.len() == bv.len() {
                        for j in 0..dz.len() {
                            lower[a.0][j] += dz[j] * bv[j];
                            lower[b.0][j] += dz[j] * av[j];
                        }
                    } else if bv.len() == 1 {
                        let s = bv[0];
                        let mut acc = 0.0;
                        for j in 0..dz.len() {
                            lower[a.0][j] += dz[j] * s;
                            acc += dz[j] * av[j];
                        }
                        lower[b.0][0] += acc;
                    } else {
                        let s = av[0];
                        let mut acc = 0.0;
                        for j in 0..dz.len() {
                            lower[b.0][j] += dz[j] * s;
                            acc += dz[j] * bv[j];
                        }
                        lower[a.0][0] += acc;
                    }
                }
                Op::ScalarMul(c, a) => {
                    for j in 0..dz.len() {
                        lower[a.0][j] += c * dz[j];
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape.rows(), self.nodes[a.0].shape.cols());
                    let n = self.nodes[b.0].shape.cols();
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    matmul_acc_nt(&mut lower[a.0], dz, bv, m, n, k); // dA += dZ·Bᵀ
                    matmul_acc_tn(&mut lower[b.0], av, dz, m, k, n); // dB += Aᵀ·dZ
                }
                Op::Affine { x, w, b } => {
                    let (m, k) = (self.nodes[x.0].shape.rows(), self.nodes[x.0].shape.cols());
                    let n = self.nodes[w.0].shape.cols();
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    matmul_acc_nt(&mut lower[x.0], dz, wv, m, n, k);
                    matmul_acc_tn(&mut lower[w.0], xv, dz, m, k, n);
                    let db = &mut lower[b.0];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += dz[r * n + c];
                        }
                    }
                }
                Op::Tanh(a) => {
                    for j in 0..dz.len() {
                        let y = node.value[j];
                        lower[a.0][j] += dz[j] * (1.0 - y * y);
                    }
                }
                Op::Silu(a) => {
                    let xv = &self.nodes[a.0].value;
                    for j in 0..dz.len() {
                        let s = sigmoid(xv[j]);
                        lower[a.0][j] += dz[j] * s * (1.0 + xv[j] * (1.0 - s));
                    }
                }
                Op::Square(a) => {
                    let xv = &self.nodes[a.0].value;
                    for j in 0..dz.len() {
                        lower[a.0][j] += dz[j] * 2.0 * xv[j];
                    }
                }
                Op::Sum(a) => {
                    let g = dz[0];
                    for v in lower[a.0].iter_mut() {
                        *v += g;
                    }
                }
                Op::Mean(a) => {
                    let g = dz[0] / self.nodes[a.0].value.len() as f64;
                    for v in lower[a.0].iter_mut() {
                        *v += g;
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    for j in 0..na {
                        lower[a.0][j] += dz[j];
                    }
                    for j in na..dz.len() {
                        lower[b.0][j - na] += dz[j];
                    }
                }
                Op::RowScale { m, s } => {
                    let cols = node.shape.cols();
                    let mv = &self.nodes[m.0].value;
                    let sv = &self.nodes[s.0].value;
                    for r in 0..sv.len() {
                        let f = sv[r];
                        let mut acc = 0.0;
                        for c in 0..cols {
                            let j = r * cols + c;
                            lower[m.0][j] += dz[j] * f;
                            acc += dz[j] * mv[j];
                        }
                        lower[s.0][r] += acc;
                    }
                }
                Op::GatherRows { table, indices } => {
                    let cols = node.shape.cols();
                    for (b, &row) in indices.iter().enumerate() {
                        for c in 0..cols {
                            lower[table.0][row * cols + c] += dz[b * cols + c];
                        }
                    }
                }
            }
        }
        Ok(GradMap { grads })
    }
}

/// Scatter `dz * sign` into the gradient of operand `a`, summing when the
/// operand was a broadcast scalar.
fn accumulate_broadcast(grads: &mut [Vec<f64>], a: NodeId, dz: &[f64], sign: f64, nodes: &[Node]) {
    let target = &mut grads[a.0];
    if nodes[a.0].value.len() == dz.len() {
        for j in 0..dz.len() {
            target[j] += sign * dz[j];
        }
    } else {
        target[0] += sign * dz.iter().sum::<f64>();
    }
}

/// Plain row-major matmul: C[m,n] = A[m,k] · B[k,n].
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    out
}

/// acc[m,k] += A[m,n] · Bᵀ where B is [k,n].
fn matmul_acc_nt(acc: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut acc[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            crow[p] += s;
        }
    }
}

/// acc[k,n] += Aᵀ · B where A is [m,k], B is [m,n].
fn matmul_acc_tn(acc: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut acc[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}
