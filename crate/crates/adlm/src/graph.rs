//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Every forward op appends one node to the tape; `backward` walks the tape
//! in reverse, so each node is visited exactly once. Graphs are rebuilt per
//! forward pass and are single-threaded; distinct graphs are independent.

use crate::tensor::{matmul_nt_raw, matmul_raw, Scalar, Tensor, TensorError};

/// Handle to a node on one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// a: [..., m, k] x b: [k, n]
    Matmul { a: NodeId, b: NodeId },
    /// a: [m, k] x b: [n, k]^T
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: T },
    /// a: [..., n] + row: [n], broadcast over leading rows
    AddRow { a: NodeId, row: NodeId },
    Relu { a: NodeId },
    SoftmaxLastDim { a: NodeId },
    /// Square [t, t] scores; row i is normalized over columns 0..=i only.
    CausalSoftmax { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: T },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceCols { a: NodeId, lo: usize, hi: usize },
    ConcatCols { parts: Vec<NodeId> },
    SumAll { a: NodeId },
    /// Mean over `active` positions of -log softmax(logits)[target].
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Ordered record of executed operations; one reverse sweep computes all
/// gradients.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// New leaf from a tensor value; `requires_grad` marks it for gradient
    /// accumulation in `backward`.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient (positional encodings, masks...).
    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.leaf(t, false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node data consistent")
    }

    /// Gradient of the last `backward` loss w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> Result<&[T], TensorError> {
        self.nodes[id.0]
            .grad
            .as_deref()
            .ok_or(TensorError::GradMissing(id.0))
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// `a [..., m, k] x b [k, n] -> [..., m, n]`; leading batch dims of `a`
    /// are flattened into rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let k = bshape[0];
        let n = bshape[1];
        let rows: usize = ashape[..ashape.len() - 1].iter().product();
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, rows, k, n);
        let mut out_shape = ashape.clone();
        *out_shape.last_mut().unwrap() = n;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, out_shape, req, Op::Matmul { a, b }))
    }

    /// `a [m, k] x b [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[0]);
        let data = matmul_nt_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![m, n], req, Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, req, Op::Add { a, b }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(data, shape, req, Op::Scale { a, factor })
    }

    /// Broadcast-add a length-n row vector over the rows of `a [..., n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(row) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rowv = self.nodes[row.0].data.clone();
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rowv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(data, shape, req, Op::AddRow { a, row }))
    }

    /// Elementwise max(0, x); gradient passes where x > 0, zero where x <= 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(data, shape, req, Op::Relu { a })
    }

    /// Row-wise softmax over the last dimension, max-subtracted for
    /// stability. NaN inputs propagate NaN.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> NodeId {
        let n = *self.shape(a).last().expect("softmax needs rank >= 1");
        let src = &self.nodes[a.0].data;
        let mut data = vec![T::zero(); src.len()];
        for (r, chunk) in src.chunks_exact(n).enumerate() {
            softmax_row(chunk, &mut data[r * n..(r + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(data, shape, req, Op::SoftmaxLastDim { a })
    }

    /// Softmax over a square score matrix where row i may only attend to
    /// columns 0..=i; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(TensorError::BadRank {
                op: "causal_softmax",
                expected: "square [t, t] matrix",
                got: shape,
            });
        }
        let t = shape[0];
        let src = &self.nodes[a.0].data;
        let mut data = vec![T::zero(); t * t];
        for i in 0..t {
            softmax_row(&src[i * t..i * t + i + 1], &mut data[i * t..i * t + i + 1]);
        }
        let req = self.requires(a);
        Ok(self.push(data, shape, req, Op::CausalSoftmax { a }))
    }

    /// Per-row zero-mean unit-variance normalization then affine transform.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    ) -> Result<NodeId, TensorError> {
        let h = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![T::zero(); src.len()];
        for (r, chunk) in src.chunks_exact(h).enumerate() {
            let (mean, inv_std) = row_norm_stats(chunk, eps);
            for j in 0..h {
                data[r * h + j] = (chunk[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(data, shape, req, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Row lookup into `table [v, h]`; the one-hot-times-matrix realization
    /// of an embedding. Gradients scatter-add into the table rows.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "gather_rows",
                expected: "2-d table",
                got: tshape,
            });
        }
        let (v, h) = (tshape[0], tshape[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, rows: v });
            }
            data.extend_from_slice(&self.nodes[table.0].data[id * h..(id + 1) * h]);
        }
        let req = self.requires(table);
        Ok(self.push(
            data,
            vec![ids.len(), h],
            req,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Columns lo..hi of a 2-d tensor, as a contiguous copy.
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || hi > shape[1] || lo >= hi {
            return Err(TensorError::BadRank {
                op: "slice_cols",
                expected: "2-d tensor with lo < hi <= cols",
                got: shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let width = hi - lo;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data[r * cols + lo..r * cols + hi]);
        }
        let req = self.requires(a);
        Ok(self.push(data, vec![rows, width], req, Op::SliceCols { a, lo, hi }))
    }

    /// Concatenate 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of zero parts");
        let rows = self.shape(parts[0])[0];
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                let start = r * c;
                let src = &self.nodes[p.0].data[start..start + c];
                data.extend_from_slice(src);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            data,
            vec![rows, total],
            req,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: T = self.nodes[a.0].data.iter().copied().sum();
        let req = self.requires(a);
        self.push(vec![s], vec![1], req, Op::SumAll { a })
    }

    /// Mean over active positions of -log softmax(logits)[target].
    /// `active[i] == false` excludes position i (padding).
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        active: &[bool],
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.len() != active.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len(), active.len()],
            });
        }
        let (t, v) = (shape[0], shape[1]);
        let n_active = active.iter().filter(|&&a| a).count();
        assert!(n_active > 0, "cross_entropy with no active positions");
        let mut total = T::zero();
        for i in 0..t {
            if !active[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(TensorError::IndexOutOfRange {
                    index: targets[i],
                    rows: v,
                });
            }
            let row = &self.nodes[logits.0].data[i * v..(i + 1) * v];
            total += row_logsumexp(row) - row[targets[i]];
        }
        let loss = total / T::from_f64(n_active as f64);
        let req = self.requires(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every requires_grad node on the
    /// graph ends up with a populated (possibly zero) gradient. A graph can
    /// be differentiated once; rebuild to run again.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![T::zero(); node.data.len()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any tracked leaf: all grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = T::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let ashape = self.shape(a).to_vec();
                    let k = self.shape(b)[0];
                    let n = self.shape(b)[1];
                    let rows: usize = ashape[..ashape.len() - 1].iter().product();
                    if self.requires(a) {
                        // da = dout * b^T
                        let da = matmul_nt_raw(&g, &self.nodes[b.0].data, rows, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        // db = a^T * dout
                        let adata = &self.nodes[a.0].data;
                        let mut db = vec![T::zero(); k * n];
                        for r in 0..rows {
                            for p in 0..k {
                                let a_rp = adata[r * k + p];
                                for j in 0..n {
                                    db[p * n + j] += a_rp * g[r * n + j];
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[0];
                    if self.requires(a) {
                        // da = dout * b
                        let da = matmul_raw(&g, &self.nodes[b.0].data, m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        // db = dout^T * a
                        let adata = &self.nodes[a.0].data;
                        let mut db = vec![T::zero(); n * k];
                        for i2 in 0..m {
                            for j in 0..n {
                                let gij = g[i2 * n + j];
                                for p in 0..k {
                                    db[j * k + p] += gij * adata[i2 * k + p];
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(a) {
                        self.accumulate(a, &g);
                    }
                    if self.requires(b) {
                        self.accumulate(b, &g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(a) {
                        let da: Vec<T> = g
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(&gi, &bi)| gi * bi)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<T> = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&gi, &ai)| gi * ai)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { a, factor } => {
                    if self.requires(a) {
                        let da: Vec<T> = g.iter().map(|&gi| gi * factor).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.requires(a) {
                        self.accumulate(a, &g);
                    }
                    if self.requires(row) {
                        let n = self.shape(row)[0];
                        let mut dr = vec![T::zero(); n];
                        for (i, &gi) in g.iter().enumerate() {
                            dr[i % n] += gi;
                        }
                        self.accumulate(row, &dr);
                    }
                }
                Op::Relu { a } => {
                    if self.requires(a) {
                        let da: Vec<T> = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::SoftmaxLastDim { a } => {
                    if self.requires(a) {
                        let n = *self.nodes[i].shape.last().unwrap();
                        let s = &self.nodes[i].data;
                        let mut da = vec![T::zero(); s.len()];
                        for r in 0..s.len() / n {
                            let srow = &s[r * n..(r + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            softmax_row_backward(srow, grow, &mut da[r * n..(r + 1) * n]);
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::CausalSoftmax { a } => {
                    if self.requires(a) {
                        let t = self.nodes[i].shape[0];
                        let s = &self.nodes[i].data;
                        let mut da = vec![T::zero(); t * t];
                        for r in 0..t {
                            let lo = r * t;
                            let hi = r * t + r + 1;
                            softmax_row_backward(&s[lo..hi], &g[lo..hi], &mut da[lo..hi]);
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let h = *self.nodes[i].shape.last().unwrap();
                    let xd = self.nodes[x.0].data.clone();
                    let gd = self.nodes[gain.0].data.clone();
                    let rows = xd.len() / h;
                    let mut dx = vec![T::zero(); xd.len()];
                    let mut dgain = vec![T::zero(); h];
                    let mut dbias = vec![T::zero(); h];
                    let inv_h = T::one() / T::from_f64(h as f64);
                    for r in 0..rows {
                        let xrow = &xd[r * h..(r + 1) * h];
                        let grow = &g[r * h..(r + 1) * h];
                        let (mean, inv_std) = row_norm_stats(xrow, eps);
                        // dxhat, plus the two row means that couple elements
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        let mut xhat = vec![T::zero(); h];
                        let mut dxhat = vec![T::zero(); h];
                        for j in 0..h {
                            xhat[j] = (xrow[j] - mean) * inv_std;
                            dxhat[j] = grow[j] * gd[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[j];
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                        }
                        mean_dxhat *= inv_h;
                        mean_dxhat_xhat *= inv_h;
                        for j in 0..h {
                            dx[r * h + j] =
                                inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    if self.requires(x) {
                        self.accumulate(x, &dx);
                    }
                    if self.requires(gain) {
                        self.accumulate(gain, &dgain);
                    }
                    if self.requires(bias) {
                        self.accumulate(bias, &dbias);
                    }
                }
                Op::GatherRows { table, ids } => {
                    if self.requires(table) {
                        let h = self.shape(table)[1];
                        let mut dt = vec![T::zero(); self.nodes[table.0].data.len()];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..h {
                                dt[id * h + j] += g[r * h + j];
                            }
                        }
                        self.accumulate(table, &dt);
                    }
                }
                Op::SliceCols { a, lo, hi } => {
                    if self.requires(a) {
                        let cols = self.shape(a)[1];
                        let rows = self.shape(a)[0];
                        let width = hi - lo;
                        let mut da = vec![T::zero(); rows * cols];
                        for r in 0..rows {
                            for j in 0..width {
                                da[r * cols + lo + j] = g[r * width + j];
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0usize;
                    for &p in &parts {
                        let c = self.shape(p)[1];
                        if self.requires(p) {
                            let mut dp = vec![T::zero(); rows * c];
                            for r in 0..rows {
                                dp[r * c..(r + 1) * c]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            self.accumulate(p, &dp);
                        }
                        offset += c;
                    }
                }
                Op::SumAll { a } => {
                    if self.requires(a) {
                        let da = vec![g[0]; self.nodes[a.0].data.len()];
                        self.accumulate(a, &da);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    active,
                } => {
                    if self.requires(logits) {
                        let v = self.shape(logits)[1];
                        let n_active = active.iter().filter(|&&a| a).count();
                        let scale = g[0] / T::from_f64(n_active as f64);
                        let ld = self.nodes[logits.0].data.clone();
                        let mut dl = vec![T::zero(); ld.len()];
                        for (r, (&tgt, &act)) in targets.iter().zip(&active).enumerate() {
                            if !act {
                                continue;
                            }
                            let row = &ld[r * v..(r + 1) * v];
                            let mut probs = vec![T::zero(); v];
                            softmax_row(row, &mut probs);
                            for j in 0..v {
                                let indicator = if j == tgt { T::one() } else { T::zero() };
                                dl[r * v + j] = scale * (probs[j] - indicator);
                            }
                        }
                        self.accumulate(logits, &dl);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[T]) {
        let buf = self.nodes[id.0]
            .grad
            .as_mut()
            .expect("grad buffer allocated for requires_grad node");
        for (b, &d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn softmax_row_backward<T: Scalar>(s: &[T], g: &[T], out: &mut [T]) {
    let mut dot = T::zero();
    for (si, gi) in s.iter().zip(g) {
        dot += *si * *gi;
    }
    for ((o, &si), &gi) in out.iter_mut().zip(s).zip(g) {
        *o = si * (gi - dot);
    }
}

fn row_norm_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let h = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / h;
    let var = row
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<T>()
        / h;
    (mean, T::one() / (var + eps).sqrt())
}

/// Stable log(sum(exp(row))).
pub(crate) fn row_logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return T::neg_infinity();
    }
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central finite differences of a scalar-valued graph builder.
    fn fd_grads(
        build: &dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> NodeId,
        inputs: &[Tensor<f64>],
        eps: f64,
    ) -> Vec<Vec<f64>> {
        let eval = |inputs: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let loss = build(&mut g, inputs);
            g.data(loss)[0]
        };
        inputs
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                (0..p.numel())
                    .map(|j| {
                        let mut plus = inputs.to_vec();
                        plus[pi].data_mut()[j] += eps;
                        let mut minus = inputs.to_vec();
                        minus[pi].data_mut()[j] -= eps;
                        (eval(&plus) - eval(&minus)) / (2.0 * eps)
                    })
                    .collect()
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], rel_tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom <= rel_tol,
                "elem {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    fn check_grads(
        build: &dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> NodeId,
        inputs: &[Tensor<f64>],
        rel_tol: f64,
    ) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = Vec::new();
        drop(ids);
        let loss = build(&mut g, inputs);
        g.backward(loss).unwrap();
        // Leaves are created first, in input order, by every builder here.
        let numeric = fd_grads(build, inputs, 1e-5);
        for (pi, num) in numeric.iter().enumerate() {
            let analytic = g.grad(NodeId(pi)).unwrap();
            assert_close(analytic, num, rel_tol);
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let eye = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let m = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_basis_vector_selects() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1, 2], &[1.0, 0.0]), false);
        let b = g.leaf(&t(&[2, 1], &[2.0, 5.0]), false);
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.data(out), &[2.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(&Tensor::zeros(vec![2, 3]), false);
        let b = g.leaf(&Tensor::zeros(vec![4, 2]), false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&[3, 4], &mut rng);
            let b = rand_tensor(&[4, 2], &mut rng);
            check_grads(
                &|g, inp| {
                    let a = g.leaf(&inp[0], true);
                    let b = g.leaf(&inp[1], true);
                    let c = g.matmul(a, b).unwrap();
                    g.sum_all(c)
                },
                &[a, b],
                1e-6,
            );
        }
    }

    #[test]
    fn batched_matmul_flattens_leading_dims() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(out), &[2, 1, 2]);
        assert_eq!(g.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_forward_and_zero_region() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);

        let mut g2 = Graph::new();
        let x2 = g2.leaf(&t(&[3], &[-1.0, -2.0, -0.5]), true);
        let y2 = g2.relu(x2);
        assert!(g2.data(y2).iter().all(|&v| v == 0.0));
        let loss = g2.sum_all(y2);
        g2.backward(loss).unwrap();
        assert!(g2.grad(x2).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_passes_upstream_where_positive() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.5, 1.5, 3.0]), true);
        let y = g.relu(x);
        let s = g.scale(y, 2.5);
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn softmax_symmetry_and_hand_value() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[0.0, 0.0]), false);
        let s = g.softmax_lastdim(x);
        assert_eq!(g.data(s), &[0.5, 0.5]);

        let mut g2 = Graph::new();
        let x2 = g2.leaf(&t(&[2], &[0.0, 3.0f64.ln()]), false);
        let s2 = g2.softmax_lastdim(x2);
        let got = g2.data(s2);
        assert!((got[0] - 0.25).abs() < 1e-12 && (got[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let c = rng.random_range(-10.0..10.0);
            let shifted: Vec<f64> = x.iter().map(|&v| v + c).collect();
            let mut g = Graph::new();
            let a = g.leaf(&t(&[5], &x), false);
            let b = g.leaf(&t(&[5], &shifted), false);
            let sa = g.softmax_lastdim(a);
            let sb = g.softmax_lastdim(b);
            for (p, q) in g.data(sa).iter().zip(g.data(sb)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[6, 7], &mut rng);
        let mut g = Graph::new();
        let a = g.leaf(&x, false);
        let s = g.softmax_lastdim(a);
        for r in 0..6 {
            let sum: f64 = g.data(s)[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = rand_tensor(&[3, 5], &mut rng);
            let w = rand_tensor(&[3, 5], &mut rng);
            check_grads(
                &|g, inp| {
                    let x = g.leaf(&inp[0], true);
                    let w = g.leaf(&inp[1], false);
                    let s = g.softmax_lastdim(x);
                    let weighted = g.mul(s, w).unwrap();
                    g.sum_all(weighted)
                },
                &[x, w],
                1e-4,
            );
        }
    }

    #[test]
    fn layer_norm_hand_case_and_constant_row() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 2], &[1.0, 3.0]), false);
        let gain = g.leaf(&t(&[2], &[1.0, 1.0]), false);
        let bias = g.leaf(&t(&[2], &[0.0, 0.0]), false);
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        let got = g.data(y);
        assert!((got[0] + 1.0).abs() < 1e-5 && (got[1] - 1.0).abs() < 1e-5);

        // constant row collapses to the bias
        let mut g2 = Graph::new();
        let x2 = g2.leaf(&t(&[1, 3], &[4.0, 4.0, 4.0]), false);
        let gain2 = g2.leaf(&t(&[3], &[1.0, 1.0, 1.0]), false);
        let bias2 = g2.leaf(&t(&[3], &[0.7, 0.7, 0.7]), false);
        let y2 = g2.layer_norm(x2, gain2, bias2, 1e-6).unwrap();
        for &v in g2.data(y2) {
            assert!((v - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[4, 16], &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(&x, false);
        let gain = g.leaf(&Tensor::full(vec![16], 1.0), false);
        let bias = g.leaf(&Tensor::zeros(vec![16]), false);
        let y = g.layer_norm(xn, gain, bias, 1e-6).unwrap();
        for r in 0..4 {
            let row = &g.data(y)[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-6, "row mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "row var {var}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = rand_tensor(&[3, 6], &mut rng);
            let gain = rand_tensor(&[6], &mut rng);
            let bias = rand_tensor(&[6], &mut rng);
            let probe = rand_tensor(&[3, 6], &mut rng);
            check_grads(
                &|g, inp| {
                    let x = g.leaf(&inp[0], true);
                    let gain = g.leaf(&inp[1], true);
                    let bias = g.leaf(&inp[2], true);
                    let probe = g.leaf(&inp[3], false);
                    let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
                    let w = g.mul(y, probe).unwrap();
                    g.sum_all(w)
                },
                &[x, gain, bias, probe],
                1e-5,
            );
        }
    }

    #[test]
    fn gather_rows_basic_and_out_of_range() {
        let mut g = Graph::new();
        let table = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let out = g.gather_rows(table, &[0]).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0]);
        let err = g.gather_rows(table, &[2]).unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
    }

    #[test]
    fn gather_rows_repeated_ids_accumulate_gradient() {
        let mut g = Graph::new();
        let table = g.leaf(&t(&[3, 2], &[0.0; 6]), true);
        let out = g.gather_rows(table, &[1, 1]).unwrap();
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        // Two gathers of row 1: each output element contributes 1.
        assert_eq!(g.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_equals_onehot_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let table = rand_tensor(&[5, 3], &mut rng);
        let ids = [3usize, 0, 4, 3];
        let mut onehot = Tensor::<f64>::zeros(vec![ids.len(), 5]);
        for (r, &id) in ids.iter().enumerate() {
            onehot.data_mut()[r * 5 + id] = 1.0;
        }
        let mut g = Graph::new();
        let tn = g.leaf(&table, false);
        let oh = g.leaf(&onehot, false);
        let gathered = g.gather_rows(tn, &ids).unwrap();
        let mm = g.matmul(oh, tn).unwrap();
        assert_eq!(g.data(gathered), g.data(mm));
    }

    #[test]
    fn causal_softmax_rows_normalize_over_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_tensor(&[4, 4], &mut rng);
        let mut g = Graph::new();
        let a = g.leaf(&x, false);
        let s = g.causal_softmax(a).unwrap();
        let d = g.data(s);
        for r in 0..4 {
            let sum: f64 = d[r * 4..r * 4 + r + 1].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for j in r + 1..4 {
                assert_eq!(d[r * 4 + j], 0.0);
            }
        }
    }

    #[test]
    fn causal_softmax_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = rand_tensor(&[4, 4], &mut rng);
            let w = rand_tensor(&[4, 4], &mut rng);
            check_grads(
                &|g, inp| {
                    let x = g.leaf(&inp[0], true);
                    let w = g.leaf(&inp[1], false);
                    let s = g.causal_softmax(x).unwrap();
                    let m = g.mul(s, w).unwrap();
                    g.sum_all(m)
                },
                &[x, w],
                1e-4,
            );
        }
    }

    #[test]
    fn slice_concat_roundtrip_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_tensor(&[3, 6], &mut rng);
        let mut g = Graph::new();
        let a = g.leaf(&x, true);
        let left = g.slice_cols(a, 0, 2).unwrap();
        let right = g.slice_cols(a, 2, 6).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.data(back), x.data());
        let loss = g.sum_all(back);
        g.backward(loss).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[4], &[1.0, -2.0, 0.5, 3.0]), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let mut g2 = Graph::new();
        let x2 = g2.leaf(&t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = g2.mul(x2, x2).unwrap();
        let loss2 = g2.sum_all(sq);
        g2.backward(loss2).unwrap();
        assert_eq!(g2.grad(x2).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(matches!(
            g.backward(loss),
            Err(TensorError::BackwardConsumed)
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut g = Graph::new();
        let logits = g.leaf(&Tensor::zeros(vec![2, 8]), true);
        let loss = g
            .cross_entropy(logits, &[3, 5], &[true, true])
            .unwrap();
        assert!((g.data(loss)[0] - (8f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_confident_logits_near_zero_loss() {
        let mut data = vec![0.0f64; 2 * 4];
        data[0 * 4 + 1] = 50.0;
        data[1 * 4 + 2] = 50.0;
        let mut g = Graph::new();
        let logits = g.leaf(&t(&[2, 4], &data), false);
        let loss = g.cross_entropy(logits, &[1, 2], &[true, true]).unwrap();
        assert!(g.data(loss)[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_ignores_inactive_positions_and_checks_grad() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let logits = rand_tensor(&[4, 5], &mut rng);
            check_grads(
                &|g, inp| {
                    let l = g.leaf(&inp[0], true);
                    g.cross_entropy(l, &[1, 2, 0, 4], &[true, false, true, true])
                        .unwrap()
                },
                &[logits],
                1e-5,
            );
        }
        // inactive rows receive zero gradient
        let mut g = Graph::new();
        let l = g.leaf(&Tensor::full(vec![2, 3], 0.3), true);
        let loss = g.cross_entropy(l, &[0, 1], &[true, false]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(l).unwrap();
        assert!(grad[3..].iter().all(|&v| v == 0.0));
        assert!(grad[..3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn determinism_same_inputs_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let x = rand_tensor(&[4, 4], &mut rng);
            let w = rand_tensor(&[4, 4], &mut rng);
            let mut g = Graph::new();
            let xn = g.leaf(&x, true);
            let wn = g.leaf(&w, true);
            let y = g.matmul(xn, wn).unwrap();
            let s = g.softmax_lastdim(y);
            let loss = g.sum_all(s);
            g.backward(loss).unwrap();
            (
                g.data(s).to_vec(),
                g.grad(xn).unwrap().to_vec(),
                g.grad(wn).unwrap().to_vec(),
            )
        };
        let (a1, b1, c1) = run();
        let (a2, b2, c2) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a2));
        assert_eq!(bits(&b1), bits(&b2));
        assert_eq!(bits(&c1), bits(&c2));
    }

    #[test]
    fn unused_tracked_leaf_gets_zero_grad_after_backward() {
        let mut g = Graph::new();
        let used = g.leaf(&t(&[2], &[1.0, 2.0]), true);
        let unused = g.leaf(&t(&[3], &[0.0, 0.0, 0.0]), true);
        let loss = g.sum_all(used);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }
}
