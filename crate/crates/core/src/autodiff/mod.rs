//! Reverse-mode differentiation of MLP classifiers.
//!
//! The loss gradient follows the printed sign convention
//! `g = (1/|B|) Σ_μ Σ_k (p_k − y_k) ∂z_k/∂θ`, i.e. the gradient of the mean
//! cross-entropy. Per-class logit gradients `∂z_k/∂θ` come from `C` separate
//! backward passes over one forward graph per example.

mod graph;

pub use graph::{softmax_row, Graph, NodeId, Tensor};

use crate::data::Examples;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{Activation, ModelSpec, ParamVector};

/// Largest parameter count for which dense `N x N` matrices are assembled.
pub const DEFAULT_DENSE_CAP: usize = 4000;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchForward {
    pub logits: DenseMatrix,
    pub probs: DenseMatrix,
    pub labels: DenseMatrix,
    pub mean_loss: f64,
    pub per_example_loss: Vec<f64>,
}

impl BatchForward {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    pub fn classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn predicted(&self, row: usize) -> usize {
        argmax(self.logits.row(row))
    }

    /// Fraction of rows whose arg-max logit is the true class.
    pub fn accuracy(&self) -> f64 {
        let correct = (0..self.batch_size())
            .filter(|&r| self.labels[(r, self.predicted(r))] == 1.0)
            .count();
        correct as f64 / self.batch_size() as f64
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct MlpGraph {
    graph: Graph,
    logits: NodeId,
    loss: Option<NodeId>,
}

fn build_graph(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &DenseMatrix,
    labels: Option<&[usize]>,
) -> Result<MlpGraph> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch { expected: spec.param_count(), actual: params.len() });
    }
    if inputs.cols() != spec.input_dim() {
        return Err(Error::DimensionMismatch { expected: spec.input_dim(), actual: inputs.cols() });
    }
    if inputs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let theta = params.as_slice();
    let mut graph = Graph::new(params.len());
    let mut h = graph.input(Tensor::matrix(inputs.rows(), inputs.cols(), inputs.as_slice().to_vec())?);
    let layout = spec.layout();
    let last = layout.len() - 1;
    for (l, slot) in layout.iter().enumerate() {
        let w = graph.param(
            Tensor::matrix(slot.fan_out, slot.fan_in, theta[slot.weights()].to_vec())?,
            slot.weight_offset,
        )?;
        let b = graph.param(Tensor::new(vec![slot.fan_out], theta[slot.bias()].to_vec())?, slot.bias_offset)?;
        let xw = graph.matmul_t(h, w)?;
        let z = graph.add_bias(xw, b)?;
        if !graph.value(z).all_finite() {
            return Err(Error::NonFinite(format!("activations of layer {l}")));
        }
        h = if l == last {
            z
        } else {
            match spec.activation {
                Activation::Relu => graph.relu(z),
                Activation::Identity => z,
            }
        };
    }
    let loss = match labels {
        Some(labels) => Some(graph.softmax_xent(h, labels)?),
        None => None,
    };
    Ok(MlpGraph { graph, logits: h, loss })
}

/// Logits, probabilities, one-hot labels and losses for a batch.
pub fn forward_batch(spec: &ModelSpec, params: &ParamVector, batch: &Examples) -> Result<BatchForward> {
    let g = build_graph(spec, params, &batch.inputs, Some(&batch.labels))?;
    let rows = batch.len();
    let classes = spec.classes();
    let logits = DenseMatrix::from_row_major(rows, classes, g.graph.value(g.logits).data().to_vec())?;
    let mut probs = DenseMatrix::zeros(rows, classes);
    let mut labels = DenseMatrix::zeros(rows, classes);
    let mut per_example_loss = Vec::with_capacity(rows);
    for r in 0..rows {
        let (p, loss) = softmax_row(logits.row(r), batch.labels[r]);
        probs.row_mut(r).copy_from_slice(&p);
        labels[(r, batch.labels[r])] = 1.0;
        per_example_loss.push(loss);
    }
    let mean_loss = per_example_loss.iter().sum::<f64>() / rows as f64;
    if !mean_loss.is_finite() {
        return Err(Error::NonFinite("softmax cross-entropy loss".into()));
    }
    Ok(BatchForward { logits, probs, labels, mean_loss, per_example_loss })
}

pub fn mean_loss(spec: &ModelSpec, params: &ParamVector, batch: &Examples) -> Result<f64> {
    Ok(forward_batch(spec, params, batch)?.mean_loss)
}

/// Gradient of the mean cross-entropy over the batch.
pub fn loss_gradient(spec: &ModelSpec, params: &ParamVector, batch: &Examples) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(spec, params, batch)?.1)
}

pub fn loss_and_gradient(spec: &ModelSpec, params: &ParamVector, batch: &Examples) -> Result<(f64, Vec<f64>)> {
    let g = build_graph(spec, params, &batch.inputs, Some(&batch.labels))?;
    let loss = g.loss.expect("labels supplied");
    let value = g.graph.value(loss).data()[0];
    Ok((value, g.graph.backward(loss, &Tensor::scalar(1.0))?))
}

/// `∂z_k/∂θ` for a single input.
pub fn logit_gradient(spec: &ModelSpec, params: &ParamVector, input: &[f64], class: usize) -> Result<Vec<f64>> {
    let classes = spec.classes();
    if class >= classes {
        return Err(Error::ClassOutOfRange { class, classes });
    }
    let inputs = DenseMatrix::from_row_major(1, input.len(), input.to_vec())?;
    let g = build_graph(spec, params, &inputs, None)?;
    g.graph.backward(g.logits, &one_hot_seed(classes, class))
}

/// All `C` logit gradients of one input: one forward graph, `C` backward
/// passes.
pub fn example_logit_gradients(spec: &ModelSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<Vec<f64>>> {
    let classes = spec.classes();
    let inputs = DenseMatrix::from_row_major(1, input.len(), input.to_vec())?;
    let g = build_graph(spec, params, &inputs, None)?;
    (0..classes).map(|k| g.graph.backward(g.logits, &one_hot_seed(classes, k))).collect()
}

/// Logit gradients indexed `[example][class]`.
pub fn batch_logit_gradients(spec: &ModelSpec, params: &ParamVector, batch: &Examples) -> Result<Vec<Vec<Vec<f64>>>> {
    (0..batch.len()).map(|r| example_logit_gradients(spec, params, batch.inputs.row(r))).collect()
}

fn one_hot_seed(classes: usize, k: usize) -> Tensor {
    let mut seed = vec![0.0; classes];
    seed[k] = 1.0;
    Tensor::matrix(1, classes, seed).expect("sizes agree")
}

/// Smallest `|pre-activation|` over the hidden ReLU units for the given
/// inputs; `f64::INFINITY` when the model has no ReLU layers.
pub fn min_abs_preactivation(spec: &ModelSpec, params: &ParamVector, inputs: &DenseMatrix) -> Result<f64> {
    if spec.activation != Activation::Relu || spec.layer_count() < 2 {
        return Ok(f64::INFINITY);
    }
    let layers = params.unflatten();
    let mut min = f64::INFINITY;
    for r in 0..inputs.rows() {
        let mut h = inputs.row(r).to_vec();
        for layer in &layers[..layers.len() - 1] {
            let mut z = layer.weights.matvec(&h)?;
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
                min = min.min(zi.abs());
            }
            h = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    Ok(min)
}

/// Central differences `(f(θ + h e_α) − f(θ − h e_α)) / 2h` per coordinate.
pub fn central_difference<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for a in 0..theta.len() {
        x[a] = theta[a] + h;
        let up = f(&x)?;
        x[a] = theta[a] - h;
        let down = f(&x)?;
        x[a] = theta[a];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Central differences of a gradient map, symmetrized. Column `α` holds
/// `(∇f(θ + h e_α) − ∇f(θ − h e_α)) / 2h`.
pub fn central_difference_hessian<G>(grad: G, theta: &[f64], h: f64, cap: usize) -> Result<DenseMatrix>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = theta.len();
    if n > cap {
        return Err(Error::DenseCapExceeded { params: n, cap });
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut m = DenseMatrix::zeros(n, n);
    let mut x = theta.to_vec();
    for a in 0..n {
        x[a] = theta[a] + h;
        let up = grad(&x)?;
        x[a] = theta[a] - h;
        let down = grad(&x)?;
        x[a] = theta[a];
        if up.len() != n || down.len() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: up.len() });
        }
        for b in 0..n {
            m[(b, a)] = (up[b] - down[b]) / (2.0 * h);
        }
    }
    m.symmetrized()
}

pub fn fd_gradient(spec: &ModelSpec, params: &ParamVector, batch: &Examples, h: f64) -> Result<Vec<f64>> {
    central_difference(|x| mean_loss(spec, &params.with_values(x.to_vec()), batch), params.as_slice(), h)
}

/// Dense loss Hessian by central differences of [`loss_gradient`].
pub fn fd_hessian(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Examples,
    h: f64,
    cap: usize,
) -> Result<DenseMatrix> {
    central_difference_hessian(
        |x| loss_gradient(spec, &params.with_values(x.to_vec()), batch),
        params.as_slice(),
        h,
        cap,
    )
}

/// Dense Hessian of a single logit `z_k(x; θ)` in the parameters.
pub fn fd_logit_hessian(
    spec: &ModelSpec,
    params: &ParamVector,
    input: &[f64],
    class: usize,
    h: f64,
    cap: usize,
) -> Result<DenseMatrix> {
    central_difference_hessian(
        |x| logit_gradient(spec, &params.with_values(x.to_vec()), input, class),
        params.as_slice(),
        h,
        cap,
    )
}
