//! Append-only differentiation tape.
//!
//! Every primitive pushes one node holding the operation kind, its input node
//! ids, and the forward value, so ids are topologically ordered by
//! construction and `backward` is a single reverse sweep. Recorded values are
//! never mutated afterwards.

use super::{Tensor, TensorError};

/// Index of a recorded node within its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    /// Position in the tape; stable for the lifetime of the graph.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Negate { x: NodeId },
    Relu { x: NodeId },
    Concat { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    Lookup { table: NodeId, indices: Vec<usize> },
    Conv1d { x: NodeId, filters: NodeId, bias: NodeId, true_len: usize, width: usize },
    MaxRows { x: NodeId, argmax: Vec<usize> },
    Softmax { x: NodeId },
    CrossEntropy { dist: NodeId, target: usize, clamped: bool },
    SqDist { a: NodeId, b: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode tape: nodes are appended by the primitive methods, gradients
/// are filled in by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Probabilities below this are clamped before the cross-entropy log.
pub const CROSS_ENTROPY_CLAMP: f64 = 1e-12;

/// A distribution fed to cross-entropy must sum to 1 within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-9;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Record `t` as a constant leaf.
    pub fn leaf(&mut self, mut t: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        t.node_id = Some(id);
        self.nodes.push(Node { op: Op::Leaf, value: t });
        id
    }

    /// Record a copy of `t` as a leaf and stamp the returned id onto `t`, so
    /// the caller-side tensor can later find its gradient (see
    /// [`super::sgd_update`]).
    pub fn param(&mut self, t: &mut Tensor) -> NodeId {
        let id = self.leaf(t.clone());
        t.node_id = Some(id);
        id
    }

    /// Forward value recorded for `id`. Panics on a foreign id.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: Tensor { shape, data, node_id: Some(id) },
        });
        id
    }

    fn want_rank(&self, op: &'static str, id: NodeId, rank: usize, expected: &'static str) -> Result<(), TensorError> {
        let shape = self.value(id).shape();
        if shape.len() != rank {
            return Err(TensorError::BadRank { op, expected, got: shape.to_vec() });
        }
        Ok(())
    }

    /// Matrix product. `a` must be 2-D; `b` may be 2-D (`[m,k]x[k,n] -> [m,n]`)
    /// or 1-D, which is treated as a column vector (`[m,k]x[k] -> [m]`).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.want_rank("matmul", a, 2, "2-D left operand")?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape[0], av.shape[1]);
        match bv.shape.len() {
            2 => {
                if bv.shape[0] != k {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        left: av.shape.clone(),
                        right: bv.shape.clone(),
                    });
                }
                let n = bv.shape[1];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let arow = &av.data[i * k..(i + 1) * k];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (kk, &aval) in arow.iter().enumerate() {
                        let brow = &bv.data[kk * n..(kk + 1) * n];
                        for (o, &bval) in orow.iter_mut().zip(brow) {
                            *o += aval * bval;
                        }
                    }
                }
                Ok(self.push(Op::MatMul { a, b }, vec![m, n], out))
            }
            1 => {
                if bv.shape[0] != k {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        left: av.shape.clone(),
                        right: bv.shape.clone(),
                    });
                }
                let out: Vec<f64> = (0..m)
                    .map(|i| dot(&av.data[i * k..(i + 1) * k], &bv.data))
                    .collect();
                Ok(self.push(Op::MatMul { a, b }, vec![m], out))
            }
            _ => Err(TensorError::BadRank {
                op: "matmul",
                expected: "1-D or 2-D right operand",
                got: bv.shape.clone(),
            }),
        }
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, data))
    }

    /// Multiply every element by a finite constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        if !factor.is_finite() {
            return Err(TensorError::NonFiniteConstant { op: "scale", value: factor });
        }
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| v * factor).collect();
        let shape = xv.shape.clone();
        Ok(self.push(Op::Scale { x, factor }, shape, data))
    }

    pub fn negate(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| -v).collect();
        let shape = xv.shape.clone();
        Ok(self.push(Op::Negate { x }, shape, data))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| v.max(0.0)).collect();
        let shape = xv.shape.clone();
        Ok(self.push(Op::Relu { x }, shape, data))
    }

    /// Concatenate 1-D tensors into one longer vector (scalars count as 1-D).
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            self.want_rank("concat", p, 1, "1-D parts")?;
            data.extend_from_slice(&self.value(p).data);
        }
        let len = data.len();
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, vec![len], data))
    }

    /// Concatenate 2-D tensors with equal row counts along their columns:
    /// `[r,c1] ++ [r,c2] -> [r, c1+c2]`.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        for &p in parts {
            self.want_rank("concat_cols", p, 2, "2-D parts")?;
        }
        let rows = self.value(parts[0]).shape[0];
        let mut total_cols = 0;
        for &p in parts {
            let shape = &self.value(p).shape;
            if shape[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape.clone(),
                    right: shape.clone(),
                });
            }
            total_cols += shape[1];
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                let c = pv.shape[1];
                data.extend_from_slice(&pv.data[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            vec![rows, total_cols],
            data,
        ))
    }

    /// Gather rows of a 2-D table: output row `i` is `table[indices[i]]`.
    pub fn lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        self.want_rank("lookup", table, 2, "2-D table")?;
        if indices.is_empty() {
            return Err(TensorError::EmptyInput { op: "lookup" });
        }
        let tv = self.value(table);
        let (rows, cols) = (tv.shape[0], tv.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(TensorError::LookupOutOfBounds { index: ix, rows });
            }
            data.extend_from_slice(&tv.data[ix * cols..(ix + 1) * cols]);
        }
        Ok(self.push(
            Op::Lookup { table, indices: indices.to_vec() },
            vec![indices.len(), cols],
            data,
        ))
    }

    /// 1-D convolution over time with bias, evaluated at every window centered
    /// inside `[0, true_len)`.
    ///
    /// `x` is `[rows, d]` with the sentence occupying the first `true_len`
    /// rows; rows at or past `true_len` are never read, which is what makes
    /// padding inert. The window extends `floor(width/2)` to each side of its
    /// center and out-of-sentence offsets contribute zero (virtual padding).
    /// `filters` is `[f, width*d]` (offset-major rows), `bias` is `[f]`, and
    /// the output is `[true_len, f]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        filters: NodeId,
        bias: NodeId,
        true_len: usize,
        width: usize,
    ) -> Result<NodeId, TensorError> {
        self.want_rank("conv1d", x, 2, "2-D input")?;
        self.want_rank("conv1d", filters, 2, "2-D filters")?;
        self.want_rank("conv1d", bias, 1, "1-D bias")?;
        if width == 0 {
            return Err(TensorError::BadWindow { width });
        }
        let (xv, fv, bv) = (self.value(x), self.value(filters), self.value(bias));
        let (rows, d) = (xv.shape[0], xv.shape[1]);
        if true_len == 0 || true_len > rows {
            return Err(TensorError::BadTrueLength { true_len, rows });
        }
        let nf = fv.shape[0];
        if fv.shape[1] != width * d {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: fv.shape.clone(),
                right: vec![nf, width * d],
            });
        }
        if bv.shape[0] != nf {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: bv.shape.clone(),
                right: vec![nf],
            });
        }
        let half = width / 2;
        let mut out = vec![0.0; true_len * nf];
        for f in 0..nf {
            let frow = &fv.data[f * width * d..(f + 1) * width * d];
            for p in 0..true_len {
                let mut acc = bv.data[f];
                for t in 0..width {
                    let src = p + t;
                    if src < half {
                        continue;
                    }
                    let src = src - half;
                    if src >= true_len {
                        continue;
                    }
                    acc += dot(&xv.data[src * d..(src + 1) * d], &frow[t * d..(t + 1) * d]);
                }
                out[p * nf + f] = acc;
            }
        }
        Ok(self.push(
            Op::Conv1d { x, filters, bias, true_len, width },
            vec![true_len, nf],
            out,
        ))
    }

    /// Column-wise maximum over the rows of a 2-D tensor: `[r,c] -> [c]`.
    /// Ties route the gradient to the earliest row.
    pub fn max_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.want_rank("max_rows", x, 2, "2-D input")?;
        let xv = self.value(x);
        let (rows, cols) = (xv.shape[0], xv.shape[1]);
        if rows == 0 {
            return Err(TensorError::EmptyInput { op: "max_rows" });
        }
        let mut best = xv.data[..cols].to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..rows {
            for c in 0..cols {
                let v = xv.data[r * cols + c];
                if v > best[c] {
                    best[c] = v;
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(Op::MaxRows { x, argmax }, vec![cols], best))
    }

    /// Numerically stable softmax of a 1-D tensor: the maximum is subtracted
    /// before exponentiation, so arbitrarily large logits stay finite.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.want_rank("softmax", x, 1, "1-D input")?;
        let xv = self.value(x);
        if xv.data.is_empty() {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let max = xv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.data.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let shape = xv.shape.clone();
        Ok(self.push(Op::Softmax { x }, shape, data))
    }

    /// `-ln(dist[target])` with the probability clamped below by
    /// [`CROSS_ENTROPY_CLAMP`]. `dist` must already be a probability vector.
    pub fn cross_entropy(&mut self, dist: NodeId, target: usize) -> Result<NodeId, TensorError> {
        self.want_rank("cross_entropy", dist, 1, "1-D distribution")?;
        let dv = self.value(dist);
        if dv.data.is_empty() {
            return Err(TensorError::EmptyInput { op: "cross_entropy" });
        }
        if target >= dv.data.len() {
            return Err(TensorError::TargetOutOfRange { target, len: dv.data.len() });
        }
        let sum: f64 = dv.data.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(TensorError::NotNormalized { sum });
        }
        let p = dv.data[target];
        let clamped = p < CROSS_ENTROPY_CLAMP;
        let value = -p.max(CROSS_ENTROPY_CLAMP).ln();
        Ok(self.push(Op::CrossEntropy { dist, target, clamped }, vec![1], vec![value]))
    }

    /// Squared Euclidean distance of two same-length 1-D tensors, as a scalar.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.want_rank("sq_dist", a, 1, "1-D input")?;
        self.want_rank("sq_dist", b, 1, "1-D input")?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                op: "sq_dist",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let d: f64 = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::SqDist { a, b }, vec![1], vec![d]))
    }

    /// Gradient of `id` from the most recent [`Graph::backward`] call, or
    /// `None` if the root never reached it.
    pub fn gradient(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`Graph::gradient`], but unreachable nodes read as all-zeros.
    pub fn gradient_or_zeros(&self, id: NodeId) -> Tensor {
        match self.gradient(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(id).shape()),
        }
    }

    /// Reverse sweep from a scalar root. Replaces any gradients from an
    /// earlier call; each invocation is independent.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot { shape: root_value.shape.clone() });
        }
        self.grads = Vec::with_capacity(self.nodes.len());
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[root.0] = Some(Tensor {
            shape: root_value.shape.clone(),
            data: vec![1.0],
            node_id: None,
        });

        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Add this node's contribution to its inputs' gradients.
    fn propagate(&mut self, id: usize, g: &Tensor) {
        // Split borrows: ops/values are read-only here, grads are written.
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        fn value(nodes: &[Node], nid: NodeId) -> &Tensor {
            &nodes[nid.0].value
        }
        let mut accum = |nid: NodeId, write: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[nid.0];
            let t = slot.get_or_insert_with(|| Tensor::zeros(nodes[nid.0].value.shape()));
            write(&mut t.data);
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (value(nodes, *a), value(nodes, *b));
                let (m, k) = (av.shape[0], av.shape[1]);
                if bv.shape.len() == 2 {
                    let n = bv.shape[1];
                    accum(*a, &mut |da| {
                        for i in 0..m {
                            let grow = &g.data[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for (kk, dval) in darow.iter_mut().enumerate() {
                                *dval += dot(grow, &bv.data[kk * n..(kk + 1) * n]);
                            }
                        }
                    });
                    accum(*b, &mut |db| {
                        for i in 0..m {
                            let grow = &g.data[i * n..(i + 1) * n];
                            let arow = &av.data[i * k..(i + 1) * k];
                            for (kk, &aval) in arow.iter().enumerate() {
                                let dbrow = &mut db[kk * n..(kk + 1) * n];
                                for (d, &gval) in dbrow.iter_mut().zip(grow) {
                                    *d += aval * gval;
                                }
                            }
                        }
                    });
                } else {
                    accum(*a, &mut |da| {
                        for i in 0..m {
                            let gi = g.data[i];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for (d, &bval) in darow.iter_mut().zip(&bv.data) {
                                *d += gi * bval;
                            }
                        }
                    });
                    accum(*b, &mut |db| {
                        for i in 0..m {
                            let gi = g.data[i];
                            let arow = &av.data[i * k..(i + 1) * k];
                            for (d, &aval) in db.iter_mut().zip(arow) {
                                *d += gi * aval;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                accum(*a, &mut |da| {
                    for (d, &gv) in da.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
                accum(*b, &mut |db| {
                    for (d, &gv) in db.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
            }
            Op::Scale { x, factor } => {
                let factor = *factor;
                accum(*x, &mut |dx| {
                    for (d, &gv) in dx.iter_mut().zip(&g.data) {
                        *d += factor * gv;
                    }
                });
            }
            Op::Negate { x } => {
                accum(*x, &mut |dx| {
                    for (d, &gv) in dx.iter_mut().zip(&g.data) {
                        *d -= gv;
                    }
                });
            }
            Op::Relu { x } => {
                let xv = value(nodes, *x);
                accum(*x, &mut |dx| {
                    for ((d, &gv), &iv) in dx.iter_mut().zip(&g.data).zip(&xv.data) {
                        if iv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = value(nodes, p).data.len();
                    let gslice = &g.data[offset..offset + len];
                    accum(p, &mut |dp| {
                        for (d, &gv) in dp.iter_mut().zip(gslice) {
                            *d += gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = value(nodes, parts[0]).shape[0];
                let total_cols: usize = parts.iter().map(|&p| value(nodes, p).shape[1]).sum();
                let mut col_offset = 0;
                for &p in parts {
                    let c = value(nodes, p).shape[1];
                    accum(p, &mut |dp| {
                        for r in 0..rows {
                            let gslice = &g.data[r * total_cols + col_offset..][..c];
                            for (d, &gv) in dp[r * c..(r + 1) * c].iter_mut().zip(gslice) {
                                *d += gv;
                            }
                        }
                    });
                    col_offset += c;
                }
            }
            Op::Lookup { table, indices } => {
                let cols = value(nodes, *table).shape[1];
                accum(*table, &mut |dt| {
                    for (i, &ix) in indices.iter().enumerate() {
                        let gslice = &g.data[i * cols..(i + 1) * cols];
                        for (d, &gv) in dt[ix * cols..(ix + 1) * cols].iter_mut().zip(gslice) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Conv1d { x, filters, bias, true_len, width } => {
                let (true_len, width) = (*true_len, *width);
                let (xv, fv) = (value(nodes, *x), value(nodes, *filters));
                let d = xv.shape[1];
                let nf = fv.shape[0];
                let half = width / 2;
                accum(*bias, &mut |db| {
                    for p in 0..true_len {
                        for (f, dbf) in db.iter_mut().enumerate() {
                            *dbf += g.data[p * nf + f];
                        }
                    }
                });
                accum(*filters, &mut |df| {
                    for f in 0..nf {
                        let dfrow = &mut df[f * width * d..(f + 1) * width * d];
                        for p in 0..true_len {
                            let gv = g.data[p * nf + f];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..width {
                                let src = p + t;
                                if src < half {
                                    continue;
                                }
                                let src = src - half;
                                if src >= true_len {
                                    continue;
                                }
                                let xrow = &xv.data[src * d..(src + 1) * d];
                                for (dv, &xvv) in dfrow[t * d..(t + 1) * d].iter_mut().zip(xrow) {
                                    *dv += gv * xvv;
                                }
                            }
                        }
                    }
                });
                accum(*x, &mut |dx| {
                    for f in 0..nf {
                        let frow = &fv.data[f * width * d..(f + 1) * width * d];
                        for p in 0..true_len {
                            let gv = g.data[p * nf + f];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..width {
                                let src = p + t;
                                if src < half {
                                    continue;
                                }
                                let src = src - half;
                                if src >= true_len {
                                    continue;
                                }
                                let fseg = &frow[t * d..(t + 1) * d];
                                for (dv, &fvv) in dx[src * d..(src + 1) * d].iter_mut().zip(fseg) {
                                    *dv += gv * fvv;
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxRows { x, argmax } => {
                let cols = argmax.len();
                accum(*x, &mut |dx| {
                    for (c, &r) in argmax.iter().enumerate() {
                        dx[r * cols + c] += g.data[c];
                    }
                });
            }
            Op::Softmax { x } => {
                let out = &nodes[id].value;
                let weighted: f64 = g.data.iter().zip(&out.data).map(|(gv, ov)| gv * ov).sum();
                accum(*x, &mut |dx| {
                    for ((d, &gv), &ov) in dx.iter_mut().zip(&g.data).zip(&out.data) {
                        *d += ov * (gv - weighted);
                    }
                });
            }
            Op::CrossEntropy { dist, target, clamped } => {
                if !clamped {
                    let p = value(nodes, *dist).data[*target];
                    let g0 = g.data[0];
                    let target = *target;
                    accum(*dist, &mut |dd| {
                        dd[target] -= g0 / p;
                    });
                } else {
                    // Inside the clamp the output is constant, so no gradient
                    // flows; still materialize a zero entry for the input.
                    accum(*dist, &mut |_| {});
                }
            }
            Op::SqDist { a, b } => {
                let (av, bv) = (value(nodes, *a), value(nodes, *b));
                let g0 = g.data[0];
                accum(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(&av.data).zip(&bv.data) {
                        *d += g0 * 2.0 * (x - y);
                    }
                });
                accum(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(&av.data).zip(&bv.data) {
                        *d -= g0 * 2.0 * (x - y);
                    }
                });
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    mod matmul {
        use super::*;

        #[test]
        fn identity_leaves_operand_unchanged() {
            let mut g = Graph::new();
            let eye = g.leaf(
                Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            );
            let b_t = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(7));
            let expected = b_t.data().to_vec();
            let b = g.leaf(b_t);
            let c = g.matmul(eye, b).unwrap();
            assert_eq!(g.value(c).data(), &expected[..]);
        }

        #[test]
        fn zero_matrix_annihilates() {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng(8)));
            let z = g.leaf(Tensor::zeros(&[3, 2]));
            let c = g.matmul(a, z).unwrap();
            assert!(g.value(c).data().iter().all(|&v| v == 0.0));
        }

        #[test]
        fn matches_triple_loop_oracle() {
            let mut r = rng(9);
            let a_t = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut r);
            let b_t = Tensor::uniform(&[3, 2], -2.0, 2.0, &mut r);
            // Independent j-k ordered accumulation.
            let mut expected = vec![0.0; 4 * 2];
            for i in 0..4 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += a_t.data()[i * 3 + k] * b_t.data()[k * 2 + j];
                    }
                    expected[i * 2 + j] = acc;
                }
            }
            let mut g = Graph::new();
            let a = g.leaf(a_t);
            let b = g.leaf(b_t);
            let c = g.matmul(a, b).unwrap();
            for (got, want) in g.value(c).data().iter().zip(&expected) {
                assert!((got - want).abs() < 1e-12);
            }
        }

        #[test]
        fn vector_right_operand_is_a_column() {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
            let v = g.leaf(Tensor::vector(vec![1.0, 0.5, -1.0]));
            let c = g.matmul(a, v).unwrap();
            assert_eq!(g.value(c).shape(), &[2]);
            assert!((g.value(c).data()[0] - (1.0 + 1.0 - 3.0)).abs() < 1e-12);
            assert!((g.value(c).data()[1] - (4.0 + 2.5 - 6.0)).abs() < 1e-12);
        }

        #[test]
        fn inner_dimension_mismatch_names_both_shapes() {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::zeros(&[4, 3]));
            let b = g.leaf(Tensor::zeros(&[2, 5]));
            let err = g.matmul(a, b).unwrap_err();
            match err {
                TensorError::ShapeMismatch { left, right, .. } => {
                    assert_eq!(left, vec![4, 3]);
                    assert_eq!(right, vec![2, 5]);
                }
                other => panic!("unexpected error {other:?}"),
            }
        }
    }

    mod softmax {
        use super::*;

        #[test]
        fn uniform_logits_give_uniform_probabilities() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
            let s = g.softmax(x).unwrap();
            for &p in g.value(s).data() {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }

        #[test]
        fn huge_logit_stays_finite_and_saturates() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![1000.0, 0.0]));
            let s = g.softmax(x).unwrap();
            let out = g.value(s).data();
            assert!(out.iter().all(|v| v.is_finite()));
            assert!(out[0] > 1.0 - 1e-10);
            assert!(out[1] < 1e-10);
        }

        #[test]
        fn matches_direct_formula() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
            let s = g.softmax(x).unwrap();
            let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
            for (i, &p) in g.value(s).data().iter().enumerate() {
                let direct = ((i + 1) as f64).exp() / z;
                assert!((p - direct).abs() < 1e-12);
            }
        }

        #[test]
        fn rejects_empty_input() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![]));
            assert!(matches!(g.softmax(x), Err(TensorError::EmptyInput { .. })));
        }

        #[test]
        fn sums_to_one_and_shift_invariant_over_random_vectors() {
            let mut r = rng(10);
            for _ in 0..50 {
                let t = Tensor::uniform(&[6], -5.0, 5.0, &mut r);
                let shifted = Tensor::vector(t.data().iter().map(|v| v + 17.25).collect());
                let mut g = Graph::new();
                let a = g.leaf(t);
                let b = g.leaf(shifted);
                let sa = g.softmax(a).unwrap();
                let sb = g.softmax(b).unwrap();
                let sum: f64 = g.value(sa).data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    mod cross_entropy {
        use super::*;

        #[test]
        fn uniform_distribution_costs_ln_n() {
            let mut g = Graph::new();
            let d = g.leaf(Tensor::vector(vec![0.25; 4]));
            let c = g.cross_entropy(d, 2).unwrap();
            assert!((g.value(c).item() - 4.0f64.ln()).abs() < 1e-12);
        }

        #[test]
        fn one_hot_at_target_costs_zero() {
            let mut g = Graph::new();
            let d = g.leaf(Tensor::vector(vec![0.0, 1.0, 0.0]));
            let c = g.cross_entropy(d, 1).unwrap();
            assert_eq!(g.value(c).item(), 0.0);
        }

        #[test]
        fn matches_hand_value() {
            let mut g = Graph::new();
            let d = g.leaf(Tensor::vector(vec![0.7, 0.2, 0.1]));
            let c = g.cross_entropy(d, 1).unwrap();
            assert!((g.value(c).item() - 1.6094).abs() < 1e-4);
        }

        #[test]
        fn zero_probability_clamps_instead_of_inf() {
            let mut g = Graph::new();
            let d = g.leaf(Tensor::vector(vec![1.0, 0.0]));
            let c = g.cross_entropy(d, 1).unwrap();
            let v = g.value(c).item();
            assert!(v.is_finite());
            assert!((v + CROSS_ENTROPY_CLAMP.ln()).abs() < 1e-9);
        }

        #[test]
        fn rejects_out_of_range_target() {
            let mut g = Graph::new();
            let d = g.leaf(Tensor::vector(vec![0.5, 0.5]));
            assert!(matches!(
                g.cross_entropy(d, 2),
                Err(TensorError::TargetOutOfRange { target: 2, len: 2 })
            ));
        }

        #[test]
        fn rejects_unnormalized_distribution() {
            let mut g = Graph::new();
            let d = g.leaf(Tensor::vector(vec![0.5, 0.2]));
            assert!(matches!(
                g.cross_entropy(d, 0),
                Err(TensorError::NotNormalized { .. })
            ));
        }
    }

    mod pooling_and_conv {
        use super::*;

        #[test]
        fn max_rows_takes_column_maxima() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::matrix(3, 2, vec![1.0, 5.0, 4.0, 2.0, 3.0, 3.0]).unwrap());
            let m = g.max_rows(x).unwrap();
            assert_eq!(g.value(m).data(), &[4.0, 5.0]);
        }

        #[test]
        fn max_rows_ties_route_gradient_to_earliest_row() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::matrix(2, 1, vec![3.0, 3.0]).unwrap());
            let m = g.max_rows(x).unwrap();
            let ones = g.leaf(Tensor::matrix(1, 1, vec![1.0]).unwrap());
            let s = g.matmul(ones, m).unwrap();
            g.backward(s).unwrap();
            assert_eq!(g.gradient(x).unwrap().data(), &[1.0, 0.0]);
        }

        #[test]
        fn conv_single_token_sentence_sees_one_window() {
            // width 3, true length 1: the only window is centered on token 0
            // with virtual zeros on both sides, so the response is the middle
            // filter segment applied to that token, plus bias.
            let mut g = Graph::new();
            let x = g.leaf(Tensor::matrix(4, 2, vec![1.0, 2.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0]).unwrap());
            let f = g.leaf(Tensor::matrix(1, 6, vec![10.0, 10.0, 3.0, 4.0, 10.0, 10.0]).unwrap());
            let b = g.leaf(Tensor::vector(vec![0.5]));
            let c = g.conv1d(x, f, b, 1, 3).unwrap();
            assert_eq!(g.value(c).shape(), &[1, 1]);
            assert!((g.value(c).item() - (3.0 + 8.0 + 0.5)).abs() < 1e-12);
        }

        #[test]
        fn conv_never_reads_rows_past_true_length() {
            let mut r = rng(11);
            let mut base = Tensor::uniform(&[6, 3], -1.0, 1.0, &mut r);
            let filters = Tensor::uniform(&[4, 9], -1.0, 1.0, &mut r);
            let bias = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
            let mut g1 = Graph::new();
            let x1 = g1.leaf(base.clone());
            let f1 = g1.leaf(filters.clone());
            let b1 = g1.leaf(bias.clone());
            let c1 = g1.conv1d(x1, f1, b1, 3, 3).unwrap();

            // Scribble over the padding rows; output must be bitwise equal.
            for v in &mut base.data_mut()[3 * 3..] {
                *v = 1234.5;
            }
            let mut g2 = Graph::new();
            let x2 = g2.leaf(base);
            let f2 = g2.leaf(filters);
            let b2 = g2.leaf(bias);
            let c2 = g2.conv1d(x2, f2, b2, 3, 3).unwrap();
            assert_eq!(g1.value(c1).bits(), g2.value(c2).bits());
        }

        #[test]
        fn conv_rejects_true_length_beyond_rows() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::zeros(&[2, 3]));
            let f = g.leaf(Tensor::zeros(&[1, 9]));
            let b = g.leaf(Tensor::zeros(&[1]));
            assert!(matches!(
                g.conv1d(x, f, b, 3, 3),
                Err(TensorError::BadTrueLength { true_len: 3, rows: 2 })
            ));
        }
    }

    mod backward {
        use super::*;

        #[test]
        fn gradient_of_sum_is_all_ones() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::uniform(&[5], -1.0, 1.0, &mut rng(12)));
            let ones = g.leaf(Tensor::matrix(1, 5, vec![1.0; 5]).unwrap());
            let s = g.matmul(ones, x).unwrap();
            g.backward(s).unwrap();
            assert_eq!(g.gradient(x).unwrap().data(), &[1.0; 5]);
            assert_eq!(g.gradient(s).unwrap().data(), &[1.0]);
        }

        #[test]
        fn gradient_of_half_squared_norm_is_x() {
            let mut g = Graph::new();
            let x_t = Tensor::uniform(&[4], -2.0, 2.0, &mut rng(13));
            let expected = x_t.data().to_vec();
            let x = g.leaf(x_t);
            let zero = g.leaf(Tensor::zeros(&[4]));
            let d = g.sq_dist(x, zero).unwrap();
            let half = g.scale(d, 0.5).unwrap();
            g.backward(half).unwrap();
            for (got, want) in g.gradient(x).unwrap().data().iter().zip(&expected) {
                assert!((got - want).abs() < 1e-12);
            }
        }

        #[test]
        fn backward_is_linear_in_the_root() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::uniform(&[3], 0.5, 1.5, &mut rng(14)));
            let zero = g.leaf(Tensor::zeros(&[3]));
            let f = g.sq_dist(x, zero).unwrap();
            let sm = g.softmax(x).unwrap();
            let h = g.cross_entropy(sm, 1).unwrap();
            let fa = g.scale(f, 2.0).unwrap();
            let hb = g.scale(h, -0.5).unwrap();
            let combined = g.add(fa, hb).unwrap();

            g.backward(f).unwrap();
            let gf = g.gradient(x).unwrap().data().to_vec();
            g.backward(h).unwrap();
            let gh = g.gradient(x).unwrap().data().to_vec();
            g.backward(combined).unwrap();
            let gc = g.gradient(x).unwrap().data().to_vec();
            for i in 0..3 {
                assert!((gc[i] - (2.0 * gf[i] - 0.5 * gh[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn non_scalar_root_is_rejected() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
            assert!(matches!(
                g.backward(x),
                Err(TensorError::NonScalarRoot { .. })
            ));
        }

        #[test]
        fn unreachable_leaf_reads_as_zero_gradient_on_request() {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![1.0]));
            let y = g.leaf(Tensor::vector(vec![2.0, 3.0]));
            let z = g.leaf(Tensor::vector(vec![0.0]));
            let s = g.sq_dist(x, z).unwrap();
            g.backward(s).unwrap();
            assert!(g.gradient(y).is_none());
            assert_eq!(g.gradient_or_zeros(y).data(), &[0.0, 0.0]);
        }
    }
}
