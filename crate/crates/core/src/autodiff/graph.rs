use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: Vec::new(), data: vec![x] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => (1, self.data.len()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input, receives no gradient.
    Input,
    /// Slice `offset..offset+len` of the flat parameter vector.
    Param { offset: usize },
    /// `x · wᵀ` with `x: B×in`, `w: out×in`.
    MatMulT { x: NodeId, w: NodeId },
    /// Adds a length-`out` bias to every row.
    AddBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    /// Mean softmax cross-entropy over rows; caches the probabilities so
    /// the backward pass is `(p - y) / B`.
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode tape. Nodes are appended in topological order, so a
/// backward pass is a single reverse sweep over node indices.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_len: usize,
}

impl Graph {
    /// `param_len` is the length of the flat gradient vectors produced by
    /// [`Graph::backward`].
    pub fn new(param_len: usize) -> Self {
        Self { nodes: Vec::new(), param_len }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, value: Tensor, offset: usize) -> Result<NodeId> {
        if offset + value.len() > self.param_len {
            return Err(Error::DimensionMismatch { expected: self.param_len, actual: offset + value.len() });
        }
        Ok(self.push(Op::Param { offset }, value))
    }

    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (b, inner) = self.value(x).rows_cols();
        let (out, w_inner) = self.value(w).rows_cols();
        if inner != w_inner {
            return Err(Error::DimensionMismatch { expected: inner, actual: w_inner });
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut y = vec![0.0; b * out];
        for r in 0..b {
            let xr = &xv[r * inner..(r + 1) * inner];
            for o in 0..out {
                let wr = &wv[o * inner..(o + 1) * inner];
                y[r * out + o] = xr.iter().zip(wr).map(|(a, c)| a * c).sum();
            }
        }
        let value = Tensor::matrix(b, out, y)?;
        Ok(self.push(Op::MatMulT { x, w }, value))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).rows_cols();
        let bv = self.value(bias).data().to_vec();
        if bv.len() != cols {
            return Err(Error::DimensionMismatch { expected: cols, actual: bv.len() });
        }
        let mut y = self.value(x).data().to_vec();
        for r in 0..rows {
            for (yc, bc) in y[r * cols..(r + 1) * cols].iter_mut().zip(&bv) {
                *yc += bc;
            }
        }
        let value = Tensor::matrix(rows, cols, y)?;
        Ok(self.push(Op::AddBias { x, b: bias }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = v.max(0.0);
        }
        self.push(Op::Relu { x }, value)
    }

    /// Fused softmax + mean cross-entropy. Softmax uses the max-shifted form.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, classes) = self.value(logits).rows_cols();
        if labels.len() != rows {
            return Err(Error::DimensionMismatch { expected: rows, actual: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::ClassOutOfRange { class: bad, classes });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for r in 0..rows {
            let (p, loss) = softmax_row(&z[r * classes..(r + 1) * classes], labels[r]);
            probs[r * classes..(r + 1) * classes].copy_from_slice(&p);
            total += loss;
        }
        let mean = total / rows as f64;
        Ok(self.push(Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }, Tensor::scalar(mean)))
    }

    /// Probabilities cached by a [`Graph::softmax_xent`] node.
    pub fn probabilities(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::SoftmaxXent { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// One reverse sweep seeded with `seed` as the adjoint of `root`.
    /// Adjoints are fresh for every call; returns the flat parameter
    /// gradient.
    pub fn backward(&self, root: NodeId, seed: &Tensor) -> Result<Vec<f64>> {
        if seed.len() != self.value(root).len() {
            return Err(Error::DimensionMismatch { expected: self.value(root).len(), actual: seed.len() });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(seed.data().to_vec());
        let mut grad = vec![0.0; self.param_len];

        for idx in (0..=root.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (g, a) in grad[*offset..*offset + adj.len()].iter_mut().zip(&adj) {
                        *g += a;
                    }
                }
                Op::MatMulT { x, w } => {
                    let (b, inner) = self.value(*x).rows_cols();
                    let (out, _) = self.value(*w).rows_cols();
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    if needs_adjoint(&self.nodes[x.0].op) {
                        let gx = accumulator(&mut adjoints, *x, b * inner);
                        for r in 0..b {
                            for o in 0..out {
                                let a = adj[r * out + o];
                                if a != 0.0 {
                                    let wr = &wv[o * inner..(o + 1) * inner];
                                    for (gi, wi) in gx[r * inner..(r + 1) * inner].iter_mut().zip(wr) {
                                        *gi += a * wi;
                                    }
                                }
                            }
                        }
                    }
                    let gw = accumulator(&mut adjoints, *w, out * inner);
                    for r in 0..b {
                        let xr = &xv[r * inner..(r + 1) * inner];
                        for o in 0..out {
                            let a = adj[r * out + o];
                            if a != 0.0 {
                                for (gi, xi) in gw[o * inner..(o + 1) * inner].iter_mut().zip(xr) {
                                    *gi += a * xi;
                                }
                            }
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    let (rows, cols) = node.value.rows_cols();
                    let gb = accumulator(&mut adjoints, *b, cols);
                    for r in 0..rows {
                        for (g, a) in gb.iter_mut().zip(&adj[r * cols..(r + 1) * cols]) {
                            *g += a;
                        }
                    }
                    if needs_adjoint(&self.nodes[x.0].op) {
                        let gx = accumulator(&mut adjoints, *x, rows * cols);
                        for (g, a) in gx.iter_mut().zip(&adj) {
                            *g += a;
                        }
                    }
                }
                Op::Relu { x } => {
                    let pre = self.value(*x).data();
                    let gx = accumulator(&mut adjoints, *x, pre.len());
                    // derivative at exactly zero taken as zero
                    for ((g, a), p) in gx.iter_mut().zip(&adj).zip(pre) {
                        if *p > 0.0 {
                            *g += a;
                        }
                    }
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let (rows, classes) = self.value(*logits).rows_cols();
                    let scale = adj[0] / rows as f64;
                    let gz = accumulator(&mut adjoints, *logits, rows * classes);
                    for r in 0..rows {
                        for k in 0..classes {
                            let y = if labels[r] == k { 1.0 } else { 0.0 };
                            gz[r * classes + k] += scale * (probs[r * classes + k] - y);
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn needs_adjoint(op: &Op) -> bool {
    !matches!(op, Op::Input)
}

fn accumulator(adjoints: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    adjoints[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Max-shifted softmax of one logit row and the cross-entropy against
/// `label`, computed as `logsumexp(z) - z_label`.
pub fn softmax_row(z: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    let loss = sum.ln() + max - z[label];
    (probs, loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_backward_by_hand() {
        // y = x wᵀ + b, loss seed = ones
        let mut g = Graph::new(6);
        let x = g.input(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap());
        let w = g.param(Tensor::matrix(2, 2, vec![1.0, 0.5, -0.5, 3.0]).unwrap(), 0).unwrap();
        let b = g.param(Tensor::new(vec![2], vec![0.1, 0.2]).unwrap(), 4).unwrap();
        let xw = g.matmul_t(x, w).unwrap();
        let y = g.add_bias(xw, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5 + 0.1, -4.0 + 0.2]);
        let grad = g.backward(y, &Tensor::matrix(1, 2, vec![1.0, 10.0]).unwrap()).unwrap();
        assert_eq!(grad, vec![2.0, -1.0, 20.0, -10.0, 1.0, 10.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::new(4);
        let x = g.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = g.param(Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 0.5]).unwrap(), 0).unwrap();
        let z = g.matmul_t(x, w).unwrap();
        let h = g.relu(z);
        let seed = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let first = g.backward(h, &seed).unwrap();
        let second = g.backward(h, &seed).unwrap();
        assert_eq!(first, second);
        // first unit has pre-activation -1, so its row gets no gradient
        assert_eq!(first, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let (p, loss) = softmax_row(&[3f64.ln(), 0.0], 0);
        assert!((p[0] - 0.75).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let (p, loss) = softmax_row(&[1000.0, 0.0, -1000.0], 1);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((loss - 1000.0).abs() < 1e-9);
    }
}
