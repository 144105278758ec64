//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! The trainer needs gradients both at parameters and at intermediate
//! activations (the perturbation tensors injected into the model), so the
//! tape keeps every node addressable and lets callers mark non-leaf nodes
//! for gradient retention. All arithmetic is `f64`.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("gradient not retained for this node; call retain_grad() before backward")]
    GradNotRetained,
    #[error("no gradient computed yet for this node")]
    NoGradient,
}

/// A plain value: shape plus row-major data. Used for parameters, gradient
/// snapshots, and anything that lives outside a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a 2-D array.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }
}

#[derive(Clone, Debug)]
#[allow(dead_code)] // some payloads exist for Debug output only
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// matrix [T,D] + row vector [D] broadcast over rows
    AddRow(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MatMul(usize, usize),
    /// A @ B^T
    MatMulNT(usize, usize),
    /// rows of a [V,D] table selected by token ids
    Embedding(usize, Vec<usize>),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows(usize, f64),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    /// stack [1,D] (or [k,D]) blocks vertically
    ConcatRows(Vec<usize>),
    /// join [T,D1] and [T,D2] side by side
    ConcatCols(usize, usize),
    SliceRows(usize, usize, usize),
    SumAll(usize),
    MeanAll(usize),
    /// out[t] = M[t, cols[t]]
    PickPerRow(usize, Vec<usize>),
    StopGrad(usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    retain: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Append-only computation graph. Confined to one thread.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to a node on a [`Graph`]. Cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    idx: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        // leaves keep their gradient by default, intermediates on request
        let retain = requires_grad && matches!(op, Op::Leaf);
        inner.nodes.push(Node { shape, data, op, requires_grad, retain, grad: None });
        Tensor { graph: self.clone(), idx }
    }

    /// Differentiable leaf (parameters, perturbations).
    pub fn leaf(&self, value: Array) -> Tensor {
        self.push(value.shape, value.data, Op::Leaf, true)
    }

    /// Non-differentiable leaf (inputs, masks, fixed perturbations).
    pub fn constant(&self, value: Array) -> Tensor {
        self.push(value.shape, value.data, Op::Leaf, false)
    }

    fn req(&self, idx: usize) -> bool {
        self.inner.borrow().nodes[idx].requires_grad
    }

    /// Back-propagates from a scalar root, seeding with `seed` instead of 1.
    /// Gradients accumulate additively into retained nodes across calls.
    pub fn backward_seeded(&self, root: &Tensor, seed: f64) -> Result<(), AutodiffError> {
        let grads = self.compute_gradients(root, seed)?;
        let root_is_const = !self.req(root.idx);
        let mut inner = self.inner.borrow_mut();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut inner.nodes[idx];
            if !node.retain || !node.requires_grad {
                continue;
            }
            // zero-influence nodes still receive an explicit zero gradient,
            // except for a constant root where nothing is written at all
            let g = match g {
                Some(g) => g,
                None if root_is_const => continue,
                None => vec![0.0; node.data.len()],
            };
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    pub fn backward(&self, root: &Tensor) -> Result<(), AutodiffError> {
        self.backward_seeded(root, 1.0)
    }

    /// Computes gradients of `root` w.r.t. every node that requires grad,
    /// without touching the stored per-node gradients. Used for side
    /// computations (e.g. token-selection gradients) that must not
    /// contaminate the accumulated parameter gradients.
    pub fn transient_gradients(&self, root: &Tensor, seed: f64) -> Result<TransientGrads, AutodiffError> {
        let grads = self.compute_gradients(root, seed)?;
        Ok(TransientGrads { grads })
    }

    fn compute_gradients(&self, root: &Tensor, seed: f64) -> Result<Vec<Option<Vec<f64>>>, AutodiffError> {
        assert!(Rc::ptr_eq(&self.inner, &root.graph.inner), "root from another graph");
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let root_shape = &nodes[root.idx].shape;
        if nodes[root.idx].data.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[root.idx].requires_grad {
            // constant root: nothing depends on differentiable inputs
            return Ok(grads);
        }
        grads[root.idx] = Some(vec![seed]);

        for idx in (0..=root.idx).rev() {
            let Some(go) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            backprop_op(node, &go, nodes, &mut grads, self);
            grads[idx] = Some(go);
        }
        // drop gradients of non-requires_grad nodes
        for (idx, g) in grads.iter_mut().enumerate() {
            if !nodes[idx].requires_grad {
                *g = None;
            }
        }
        Ok(grads)
    }
}

/// Gradient snapshot from [`Graph::transient_gradients`].
pub struct TransientGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl TransientGrads {
    pub fn get(&self, t: &Tensor) -> Option<Array> {
        self.grads[t.idx]
            .as_ref()
            .map(|g| Array::new(t.shape(), g.clone()))
    }
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.idx].shape.clone()
    }

    pub fn value(&self) -> Array {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.idx];
        Array::new(node.shape.clone(), node.data.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.req(self.idx)
    }

    /// Marks this node so backward stores its gradient.
    pub fn retain_grad(&self) {
        self.graph.inner.borrow_mut().nodes[self.idx].retain = true;
    }

    /// Stored gradient after backward. Errors if the node was never marked
    /// for retention or if no backward has written to it.
    pub fn grad(&self) -> Result<Array, AutodiffError> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.idx];
        if !node.retain || !node.requires_grad {
            return Err(AutodiffError::GradNotRetained);
        }
        match &node.grad {
            Some(g) => Ok(Array::new(node.shape.clone(), g.clone())),
            None => Err(AutodiffError::NoGradient),
        }
    }

    pub fn zero_grad(&self) {
        self.graph.inner.borrow_mut().nodes[self.idx].grad = None;
    }

    fn same_graph(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
    }

    fn binary_shape_eq(&self, other: &Tensor, op: &str) -> Vec<usize> {
        self.same_graph(other);
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
        a
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let shape = self.binary_shape_eq(other, "add");
        let inner = self.graph.inner.borrow();
        let data: Vec<f64> = inner.nodes[self.idx]
            .data
            .iter()
            .zip(&inner.nodes[other.idx].data)
            .map(|(a, b)| a + b)
            .collect();
        let req = inner.nodes[self.idx].requires_grad || inner.nodes[other.idx].requires_grad;
        drop(inner);
        self.graph.push(shape, data, Op::Add(self.idx, other.idx), req)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let shape = self.binary_shape_eq(other, "sub");
        let inner = self.graph.inner.borrow();
        let data: Vec<f64> = inner.nodes[self.idx]
            .data
            .iter()
            .zip(&inner.nodes[other.idx].data)
            .map(|(a, b)| a - b)
            .collect();
        let req = inner.nodes[self.idx].requires_grad || inner.nodes[other.idx].requires_grad;
        drop(inner);
        self.graph.push(shape, data, Op::Sub(self.idx, other.idx), req)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let shape = self.binary_shape_eq(other, "mul");
        let inner = self.graph.inner.borrow();
        let data: Vec<f64> = inner.nodes[self.idx]
            .data
            .iter()
            .zip(&inner.nodes[other.idx].data)
            .map(|(a, b)| a * b)
            .collect();
        let req = inner.nodes[self.idx].requires_grad || inner.nodes[other.idx].requires_grad;
        drop(inner);
        self.graph.push(shape, data, Op::Mul(self.idx, other.idx), req)
    }

    /// `[T,D] + [D]`, the bias broadcast.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        self.same_graph(row);
        let shape = self.shape();
        let rshape = row.shape();
        assert_eq!(shape.len(), 2, "add_row: lhs must be 2-D, got {shape:?}");
        let d = *shape.last().unwrap();
        assert_eq!(rshape, vec![d], "add_row: shape mismatch {shape:?} vs {rshape:?}");
        let inner = self.graph.inner.borrow();
        let m = &inner.nodes[self.idx].data;
        let v = &inner.nodes[row.idx].data;
        let data: Vec<f64> = m.iter().enumerate().map(|(i, a)| a + v[i % d]).collect();
        let req = inner.nodes[self.idx].requires_grad || inner.nodes[row.idx].requires_grad;
        drop(inner);
        self.graph.push(shape, data, Op::AddRow(self.idx, row.idx), req)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg(self.idx), |v| -v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(self.idx, c), |v| c * v)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar(self.idx, c), |v| v + c)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh(self.idx), |v| v.tanh())
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.idx), |v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid(self.idx), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn stop_grad(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.idx];
        let (shape, data) = (node.shape.clone(), node.data.clone());
        drop(inner);
        self.graph.push(shape, data, Op::StopGrad(self.idx), false)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.idx];
        let shape = node.shape.clone();
        let data: Vec<f64> = node.data.iter().map(|v| f(*v)).collect();
        let req = node.requires_grad;
        drop(inner);
        self.graph.push(shape, data, op, req)
    }

    fn dims2(&self, op: &str) -> (usize, usize) {
        let s = self.shape();
        assert_eq!(s.len(), 2, "{op}: expected 2-D tensor, got {s:?}");
        (s[0], s[1])
    }

    /// `[M,K] @ [K,N] -> [M,N]`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (m, k) = self.dims2("matmul");
        let (k2, n) = other.dims2("matmul");
        assert_eq!(k, k2, "matmul: inner dims mismatch [{m},{k}] @ [{k2},{n}]");
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.idx].data;
        let b = &inner.nodes[other.idx].data;
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
        let req = inner.nodes[self.idx].requires_grad || inner.nodes[other.idx].requires_grad;
        drop(inner);
        self.graph.push(vec![m, n], c, Op::MatMul(self.idx, other.idx), req)
    }

    /// `[M,K] @ [N,K]^T -> [M,N]`
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (m, k) = self.dims2("matmul_nt");
        let (n, k2) = other.dims2("matmul_nt");
        assert_eq!(k, k2, "matmul_nt: inner dims mismatch [{m},{k}] @ [{n},{k2}]^T");
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.idx].data;
        let b = &inner.nodes[other.idx].data;
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let req = inner.nodes[self.idx].requires_grad || inner.nodes[other.idx].requires_grad;
        drop(inner);
        self.graph.push(vec![m, n], c, Op::MatMulNT(self.idx, other.idx), req)
    }

    /// Looks up rows of a `[V,D]` table: out `[T,D]` with out[t] = table[ids[t]].
    pub fn embedding(&self, ids: &[usize]) -> Tensor {
        let (v, d) = self.dims2("embedding");
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range (vocab {v})");
        }
        let inner = self.graph.inner.borrow();
        let table = &inner.nodes[self.idx].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        let req = inner.nodes[self.idx].requires_grad;
        drop(inner);
        self.graph
            .push(vec![ids.len(), d], data, Op::Embedding(self.idx, ids.to_vec()), req)
    }

    pub fn softmax_rows(&self) -> Tensor {
        let (t, v) = self.dims2("softmax_rows");
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.idx].data;
        let mut data = vec![0.0; t * v];
        for r in 0..t {
            let row = &x[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - m).exp();
                data[r * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                data[r * v + j] /= sum;
            }
        }
        let req = inner.nodes[self.idx].requires_grad;
        drop(inner);
        self.graph.push(vec![t, v], data, Op::SoftmaxRows(self.idx), req)
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        let (t, v) = self.dims2("log_softmax_rows");
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.idx].data;
        let mut data = vec![0.0; t * v];
        for r in 0..t {
            let row = &x[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..v {
                data[r * v + j] = row[j] - lse;
            }
        }
        let req = inner.nodes[self.idx].requires_grad;
        drop(inner);
        self.graph.push(vec![t, v], data, Op::LogSoftmaxRows(self.idx), req)
    }

    /// Per-row layer norm without affine parameters.
    pub fn layer_norm_rows(&self, eps: f64) -> Tensor {
        let (t, d) = self.dims2("layer_norm_rows");
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.idx].data;
        let mut data = vec![0.0; t * d];
        for r in 0..t {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv;
            }
        }
        let req = inner.nodes[self.idx].requires_grad;
        drop(inner);
        self.graph
            .push(vec![t, d], data, Op::LayerNormRows(self.idx, eps), req)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let (t, d) = self.dims2("slice_rows");
        assert!(start <= end && end <= t, "slice_rows: range {start}..{end} out of {t} rows");
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.idx].data;
        let data = x[start * d..end * d].to_vec();
        let req = inner.nodes[self.idx].requires_grad;
        drop(inner);
        self.graph
            .push(vec![end - start, d], data, Op::SliceRows(self.idx, start, end), req)
    }

    pub fn sum_all(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let s: f64 = inner.nodes[self.idx].data.iter().sum();
        let req = inner.nodes[self.idx].requires_grad;
        drop(inner);
        self.graph.push(vec![1], vec![s], Op::SumAll(self.idx), req)
    }

    pub fn mean_all(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let n = inner.nodes[self.idx].data.len();
        let s: f64 = inner.nodes[self.idx].data.iter().sum();
        let req = inner.nodes[self.idx].requires_grad;
        drop(inner);
        self.graph
            .push(vec![1], vec![s / n as f64], Op::MeanAll(self.idx), req)
    }

    /// out[t] = self[t, cols[t]]; shape [T].
    pub fn pick_per_row(&self, cols: &[usize]) -> Tensor {
        let (t, v) = self.dims2("pick_per_row");
        assert_eq!(cols.len(), t, "pick_per_row: need one column per row");
        for &c in cols {
            assert!(c < v, "pick_per_row: column {c} out of range {v}");
        }
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.idx].data;
        let data: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| x[r * v + c]).collect();
        let req = inner.nodes[self.idx].requires_grad;
        drop(inner);
        self.graph
            .push(vec![t], data, Op::PickPerRow(self.idx, cols.to_vec()), req)
    }
}

/// Stacks 2-D tensors with equal column counts vertically.
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_rows: empty input");
    let graph = parts[0].graph.clone();
    let d = parts[0].shape()[1];
    let mut total = 0;
    let mut data = Vec::new();
    let mut req = false;
    let mut idxs = Vec::with_capacity(parts.len());
    for p in parts {
        parts[0].same_graph(p);
        let s = p.shape();
        assert_eq!(s.len(), 2, "concat_rows: expected 2-D parts");
        assert_eq!(s[1], d, "concat_rows: column mismatch {d} vs {}", s[1]);
        total += s[0];
        let inner = graph.inner.borrow();
        data.extend_from_slice(&inner.nodes[p.idx].data);
        req |= inner.nodes[p.idx].requires_grad;
        idxs.push(p.idx);
    }
    graph.push(vec![total, d], data, Op::ConcatRows(idxs), req)
}

/// Joins `[T,D1]` and `[T,D2]` into `[T,D1+D2]`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    a.same_graph(b);
    let (t, d1) = a.dims2("concat_cols");
    let (t2, d2) = b.dims2("concat_cols");
    assert_eq!(t, t2, "concat_cols: row mismatch {t} vs {t2}");
    let graph = a.graph.clone();
    let inner = graph.inner.borrow();
    let av = &inner.nodes[a.idx].data;
    let bv = &inner.nodes[b.idx].data;
    let mut data = Vec::with_capacity(t * (d1 + d2));
    for r in 0..t {
        data.extend_from_slice(&av[r * d1..(r + 1) * d1]);
        data.extend_from_slice(&bv[r * d2..(r + 1) * d2]);
    }
    let req = inner.nodes[a.idx].requires_grad || inner.nodes[b.idx].requires_grad;
    drop(inner);
    graph.push(vec![t, d1 + d2], data, Op::ConcatCols(a.idx, b.idx), req)
}

fn accum(grads: &mut Vec<Option<Vec<f64>>>, nodes: &[Node], idx: usize, add: impl Fn(&mut [f64])) {
    if !nodes[idx].requires_grad {
        return;
    }
    let g = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].data.len()]);
    add(g);
}

fn backprop_op(node: &Node, go: &[f64], nodes: &[Node], grads: &mut Vec<Option<Vec<f64>>>, _g: &Graph) {
    match &node.op {
        Op::Leaf | Op::StopGrad(_) => {}
        Op::Add(a, b) => {
            accum(grads, nodes, *a, |g| {
                for (x, y) in g.iter_mut().zip(go) {
                    *x += y;
                }
            });
            accum(grads, nodes, *b, |g| {
                for (x, y) in g.iter_mut().zip(go) {
                    *x += y;
                }
            });
        }
        Op::Sub(a, b) => {
            accum(grads, nodes, *a, |g| {
                for (x, y) in g.iter_mut().zip(go) {
                    *x += y;
                }
            });
            accum(grads, nodes, *b, |g| {
                for (x, y) in g.iter_mut().zip(go) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            accum(grads, nodes, *a, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * bv[i];
                }
            });
            accum(grads, nodes, *b, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * av[i];
                }
            });
        }
        Op::AddRow(a, b) => {
            let d = nodes[*b].data.len();
            accum(grads, nodes, *a, |g| {
                for (x, y) in g.iter_mut().zip(go) {
                    *x += y;
                }
            });
            accum(grads, nodes, *b, |g| {
                for (i, y) in go.iter().enumerate() {
                    g[i % d] += y;
                }
            });
        }
        Op::Neg(a) => accum(grads, nodes, *a, |g| {
            for (x, y) in g.iter_mut().zip(go) {
                *x -= y;
            }
        }),
        Op::Scale(a, c) => {
            let c = *c;
            accum(grads, nodes, *a, |g| {
                for (x, y) in g.iter_mut().zip(go) {
                    *x += c * y;
                }
            });
        }
        Op::AddScalar(a, _) => accum(grads, nodes, *a, |g| {
            for (x, y) in g.iter_mut().zip(go) {
                *x += y;
            }
        }),
        Op::MatMul(a, b) => {
            let m = nodes[*a].shape[0];
            let k = nodes[*a].shape[1];
            let n = nodes[*b].shape[1];
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            // dA = dC @ B^T
            accum(grads, nodes, *a, |g| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += go[i * n + j] * bv[p * n + j];
                        }
                        g[i * k + p] += s;
                    }
                }
            });
            // dB = A^T @ dC
            accum(grads, nodes, *b, |g| {
                for p in 0..k {
                    for i in 0..m {
                        let av_ip = av[i * k + p];
                        if av_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            g[p * n + j] += av_ip * go[i * n + j];
                        }
                    }
                }
            });
        }
        Op::MatMulNT(a, b) => {
            let m = nodes[*a].shape[0];
            let k = nodes[*a].shape[1];
            let n = nodes[*b].shape[0];
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            // C = A B^T: dA = dC @ B, dB = dC^T @ A
            accum(grads, nodes, *a, |g| {
                for i in 0..m {
                    for j in 0..n {
                        let gij = go[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            g[i * k + p] += gij * bv[j * k + p];
                        }
                    }
                }
            });
            accum(grads, nodes, *b, |g| {
                for j in 0..n {
                    for i in 0..m {
                        let gij = go[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            g[j * k + p] += gij * av[i * k + p];
                        }
                    }
                }
            });
        }
        Op::Embedding(a, ids) => {
            let d = nodes[*a].shape[1];
            accum(grads, nodes, *a, |g| {
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += go[t * d + j];
                    }
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let t = node.shape[0];
            let v = node.shape[1];
            let p = &node.data;
            accum(grads, nodes, *a, |g| {
                for r in 0..t {
                    let prow = &p[r * v..(r + 1) * v];
                    let grow = &go[r * v..(r + 1) * v];
                    let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    for j in 0..v {
                        g[r * v + j] += prow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let t = node.shape[0];
            let v = node.shape[1];
            let lp = &node.data;
            accum(grads, nodes, *a, |g| {
                for r in 0..t {
                    let grow = &go[r * v..(r + 1) * v];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..v {
                        g[r * v + j] += grow[j] - lp[r * v + j].exp() * gsum;
                    }
                }
            });
        }
        Op::LayerNormRows(a, eps) => {
            let t = node.shape[0];
            let d = node.shape[1];
            let df = d as f64;
            let x = &nodes[*a].data;
            let y = &node.data;
            accum(grads, nodes, *a, |g| {
                for r in 0..t {
                    let xr = &x[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &go[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / df;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gr.iter().sum::<f64>() / df;
                    let gydot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / df;
                    for j in 0..d {
                        g[r * d + j] += inv * (gr[j] - gmean - yr[j] * gydot);
                    }
                }
            });
        }
        Op::Tanh(a) => {
            let y = &node.data;
            accum(grads, nodes, *a, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Relu(a) => {
            let x = &nodes[*a].data;
            accum(grads, nodes, *a, |g| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        g[i] += go[i];
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.data;
            accum(grads, nodes, *a, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].data.len();
                let slice = &go[offset..offset + n];
                accum(grads, nodes, p, |g| {
                    for (x, y) in g.iter_mut().zip(slice) {
                        *x += y;
                    }
                });
                offset += n;
            }
        }
        Op::ConcatCols(a, b) => {
            let t = node.shape[0];
            let d1 = nodes[*a].shape[1];
            let d2 = nodes[*b].shape[1];
            accum(grads, nodes, *a, |g| {
                for r in 0..t {
                    for j in 0..d1 {
                        g[r * d1 + j] += go[r * (d1 + d2) + j];
                    }
                }
            });
            accum(grads, nodes, *b, |g| {
                for r in 0..t {
                    for j in 0..d2 {
                        g[r * d2 + j] += go[r * (d1 + d2) + d1 + j];
                    }
                }
            });
        }
        Op::SliceRows(a, start, _end) => {
            let d = nodes[*a].shape[1];
            let start = *start;
            accum(grads, nodes, *a, |g| {
                for (i, y) in go.iter().enumerate() {
                    g[start * d + i] += y;
                }
            });
        }
        Op::SumAll(a) => accum(grads, nodes, *a, |g| {
            for x in g.iter_mut() {
                *x += go[0];
            }
        }),
        Op::MeanAll(a) => {
            let n = nodes[*a].data.len() as f64;
            accum(grads, nodes, *a, |g| {
                for x in g.iter_mut() {
                    *x += go[0] / n;
                }
            });
        }
        Op::PickPerRow(a, cols) => {
            let v = nodes[*a].shape[1];
            accum(grads, nodes, *a, |g| {
                for (r, &c) in cols.iter().enumerate() {
                    g[r * v + c] += go[r];
                }
            });
        }
    }
}
