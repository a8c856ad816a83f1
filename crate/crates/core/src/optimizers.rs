//! Heavy-ball SGD, the class-subspace quasi-Newton update and the training
//! loop that drives them.
//!
//! The quasi-Newton update is
//! `Δ = −η g − Σ_k (1/λ_k − η)(v_kᵀ g) v_k`:
//! a Newton step `−(1/λ_k)(v_kᵀ g)` along each class direction and a plain
//! gradient step on the complement.
//!
//! Momentum velocities are kept in gradient units for both methods, so the
//! parameter update is always `θ ← θ − η · velocity` (plus the raw Newton
//! part under [`MomentumPlacement::ProjectedOnly`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::{batch_logit_gradients, forward_batch, loss_and_gradient};
use crate::curvature::{
    batch_class_gradients, batch_eigenvalues, build_low_rank, squared_norms, CurvatureState, LowRankHessian,
    DEFAULT_LAMBDA_FLOOR,
};
use crate::data::{minibatch_stream, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::model::{ModelSpec, ParamVector};

/// Parameter norm beyond which a run is declared diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    QuasiNewton,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::QuasiNewton => "quasi_newton",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "quasi_newton" | "qn" => Ok(Method::QuasiNewton),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Where heavy-ball momentum acts in the quasi-Newton update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumPlacement {
    /// Velocity accumulates the whole update.
    CombinedUpdate,
    /// Velocity accumulates only the complement (gradient-descent) part;
    /// the Newton part is applied raw.
    ProjectedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    pub eta: f64,
    pub momentum_beta: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub orthonormalize: bool,
    pub lambda_floor: f64,
    pub momentum_applies_to: MomentumPlacement,
    /// Optional bound on `|(1/λ_k − η)(v_kᵀ g)|` per direction.
    pub max_newton_step: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Sgd,
            eta: 0.1,
            momentum_beta: 0.9,
            gamma: 0.9,
            weight_decay: 0.0,
            orthonormalize: false,
            lambda_floor: DEFAULT_LAMBDA_FLOOR,
            momentum_applies_to: MomentumPlacement::CombinedUpdate,
            max_newton_step: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(eta: f64) -> Self {
        Self { method: Method::Sgd, eta, ..Self::default() }
    }

    pub fn quasi_newton(eta: f64) -> Self {
        Self { method: Method::QuasiNewton, eta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::InvalidArgument(format!("momentum_beta must lie in [0,1), got {}", self.momentum_beta)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.lambda_floor > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_floor must be positive, got {}", self.lambda_floor)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if let Some(m) = self.max_newton_step {
            if !(m > 0.0) {
                return Err(Error::InvalidArgument(format!("max_newton_step must be positive, got {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: Vec<f64>,
}

impl MomentumState {
    pub fn new(dim: usize) -> Self {
        Self { velocity: vec![0.0; dim] }
    }
}

fn check_step(theta: &[f64], g: &[f64], m: &MomentumState) -> Result<()> {
    if g.len() != theta.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), actual: g.len() });
    }
    if m.velocity.len() != theta.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), actual: m.velocity.len() });
    }
    Ok(())
}

/// `velocity ← β velocity + g; θ ← θ − η velocity`.
pub fn sgd_step(theta: &mut [f64], g: &[f64], momentum: &mut MomentumState, cfg: &OptimizerConfig) -> Result<()> {
    check_step(theta, g, momentum)?;
    let beta = cfg.momentum_beta;
    let mut next = theta.to_vec();
    let mut vel = momentum.velocity.clone();
    for ((t, v), gi) in next.iter_mut().zip(vel.iter_mut()).zip(g) {
        *v = beta * *v + gi;
        *t -= cfg.eta * *v;
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteUpdate(format!("sgd step with |g| = {:e}", norm(g))));
    }
    theta.copy_from_slice(&next);
    momentum.velocity = vel;
    Ok(())
}

/// Per-direction coefficients `(1/λ_k − η)(v_kᵀ g)`, clamped by
/// `max_newton_step` when configured.
fn newton_coefficients(g: &[f64], h: &LowRankHessian, cfg: &OptimizerConfig) -> (Vec<f64>, Vec<f64>) {
    let projections: Vec<f64> = h.directions.iter().map(|v| dot(v, g)).collect();
    let coeffs = projections
        .iter()
        .zip(&h.eigenvalues)
        .map(|(&p, &l)| {
            let c = (1.0 / l - cfg.eta) * p;
            match cfg.max_newton_step {
                Some(cap) => c.clamp(-cap, cap),
                None => c,
            }
        })
        .collect();
    (projections, coeffs)
}

/// The raw update `Δ = −η g − Σ_k (1/λ_k − η)(v_kᵀ g) v_k`.
pub fn qn_raw_update(g: &[f64], h: &LowRankHessian, cfg: &OptimizerConfig) -> Result<Vec<f64>> {
    if let Some(n) = h.dim() {
        if n != g.len() {
            return Err(Error::DimensionMismatch { expected: n, actual: g.len() });
        }
    }
    let (_, coeffs) = newton_coefficients(g, h, cfg);
    let mut delta: Vec<f64> = g.iter().map(|x| -cfg.eta * x).collect();
    for (v, c) in h.directions.iter().zip(&coeffs) {
        axpy(-c, v, &mut delta);
    }
    Ok(delta)
}

fn non_finite_dump(g: &[f64], h: &LowRankHessian) -> String {
    let parts: Vec<String> = h
        .classes
        .iter()
        .zip(&h.eigenvalues)
        .zip(&h.directions)
        .map(|((k, l), v)| format!("class {k}: lambda={l:e} |v.g|={:e}", dot(v, g).abs()))
        .collect();
    parts.join("; ")
}

/// One quasi-Newton step with momentum placed per `cfg.momentum_applies_to`.
pub fn qn_step(
    theta: &mut [f64],
    g: &[f64],
    h: &LowRankHessian,
    momentum: &mut MomentumState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_step(theta, g, momentum)?;
    if let Some(n) = h.dim() {
        if n != g.len() {
            return Err(Error::DimensionMismatch { expected: n, actual: g.len() });
        }
    }
    let (projections, coeffs) = newton_coefficients(g, h, cfg);
    let beta = cfg.momentum_beta;
    let eta = cfg.eta;
    let mut next = theta.to_vec();
    let mut vel = momentum.velocity.clone();
    match cfg.momentum_applies_to {
        MomentumPlacement::CombinedUpdate => {
            // Δ / (−η) in gradient units
            let mut direction = g.to_vec();
            for (v, c) in h.directions.iter().zip(&coeffs) {
                axpy(c / eta, v, &mut direction);
            }
            for ((t, vl), d) in next.iter_mut().zip(vel.iter_mut()).zip(&direction) {
                *vl = beta * *vl + d;
                *t -= eta * *vl;
            }
        }
        MomentumPlacement::ProjectedOnly => {
            // gradient part: g − Σ (v_kᵀg) v_k; Newton part: Σ (1/λ_k)(v_kᵀg) v_k
            let mut sgd_part = g.to_vec();
            let mut newton = vec![0.0; g.len()];
            for ((v, p), c) in h.directions.iter().zip(&projections).zip(&coeffs) {
                axpy(-p, v, &mut sgd_part);
                axpy(c + eta * p, v, &mut newton);
            }
            for (((t, vl), s), n) in next.iter_mut().zip(vel.iter_mut()).zip(&sgd_part).zip(&newton) {
                *vl = beta * *vl + s;
                *t -= eta * *vl + n;
            }
        }
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteUpdate(non_finite_dump(g, h)));
    }
    theta.copy_from_slice(&next);
    momentum.velocity = vel;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub grad_norm: f64,
    /// Smoothed per-class eigenvalues (quasi-Newton runs only).
    pub lambdas: Vec<f64>,
    /// Largest `|v_iᵀ v_j|` among the low-rank directions.
    pub max_cross_dot: Option<f64>,
}

/// Everything a training run mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamVector,
    pub momentum: MomentumState,
    pub curvature: Option<CurvatureState>,
    pub step: usize,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(spec: &ModelSpec, params: ParamVector, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let n = params.len();
        let curvature = match cfg.method {
            Method::QuasiNewton => Some(CurvatureState::new(spec.classes(), n, cfg.gamma)?),
            Method::Sgd => None,
        };
        Ok(Self { params, momentum: MomentumState::new(n), curvature, step: 0, epoch: 0 })
    }
}

/// Per-step observation handed to a [`train_epoch`] observer.
pub struct StepObservation<'a> {
    pub step: usize,
    /// Batch class gradients `c_k^B` (`None` for classes absent from the batch).
    pub class_gradients: &'a [Option<Vec<f64>>],
}

pub type Observer<'a> = dyn FnMut(&StepObservation<'_>) + 'a;

/// Outcome of one epoch. On failure `metrics` holds the steps completed
/// before the error.
#[derive(Debug)]
pub struct EpochResult {
    pub metrics: Vec<StepMetrics>,
    pub failure: Option<Error>,
}

/// Runs one epoch of seeded minibatches. The observer, when given, also
/// makes SGD runs compute batch class gradients.
pub fn train_epoch(
    spec: &ModelSpec,
    train: &Dataset,
    cfg: &OptimizerConfig,
    state: &mut TrainState,
    batch_size: usize,
    epoch_seed: u64,
    mut observer: Option<&mut Observer<'_>>,
) -> EpochResult {
    let mut metrics = Vec::new();
    let batches = match minibatch_stream(train, batch_size, epoch_seed) {
        Ok(b) => b,
        Err(e) => return EpochResult { metrics, failure: Some(e) },
    };
    for batch in &batches {
        match train_step(spec, train, cfg, state, batch, observer.as_deref_mut()) {
            Ok(m) => metrics.push(m),
            Err(e) => return EpochResult { metrics, failure: Some(e) },
        }
    }
    state.epoch += 1;
    EpochResult { metrics, failure: None }
}

fn diverged(step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(what) => Error::Diverged { step, reason: format!("non-finite {what}") },
        Error::NonFiniteUpdate(what) => Error::Diverged { step, reason: format!("non-finite update ({what})") },
        other => other,
    }
}

fn train_step(
    spec: &ModelSpec,
    train: &Dataset,
    cfg: &OptimizerConfig,
    state: &mut TrainState,
    batch: &crate::data::Minibatch,
    observer: Option<&mut Observer<'_>>,
) -> Result<StepMetrics> {
    let step = state.step;
    let examples = train.gather(batch);
    let fwd = forward_batch(spec, &state.params, &examples).map_err(|e| diverged(step, e))?;
    let (_, mut g) = loss_and_gradient(spec, &state.params, &examples).map_err(|e| diverged(step, e))?;
    if cfg.weight_decay > 0.0 {
        axpy(cfg.weight_decay, state.params.as_slice(), &mut g);
    }
    let grad_norm = norm(&g);

    let needs_class_grads = cfg.method == Method::QuasiNewton || observer.is_some();
    let class_grads = if needs_class_grads {
        let lg = batch_logit_gradients(spec, &state.params, &examples).map_err(|e| diverged(step, e))?;
        Some(batch_class_gradients(&lg, batch))
    } else {
        None
    };
    if let (Some(obs), Some(cg)) = (observer, class_grads.as_ref()) {
        obs(&StepObservation { step, class_gradients: cg });
    }

    let mut lambdas = Vec::new();
    let mut max_cross_dot = None;
    match cfg.method {
        Method::Sgd => {
            sgd_step(state.params.as_mut_slice(), &g, &mut state.momentum, cfg).map_err(|e| diverged(step, e))?;
        }
        Method::QuasiNewton => {
            let cg = class_grads.expect("computed for quasi-Newton");
            let eig = batch_eigenvalues(&fwd, &squared_norms(&cg));
            let curvature = state.curvature.as_mut().ok_or_else(|| {
                Error::InvalidArgument("quasi-Newton training needs a curvature state".into())
            })?;
            curvature.update(&cg, &eig)?;
            let h = build_low_rank(curvature, cfg.orthonormalize, cfg.lambda_floor)?;
            lambdas = curvature.eigenvalues();
            max_cross_dot = Some(h.max_cross_dot());
            qn_step(state.params.as_mut_slice(), &g, &h, &mut state.momentum, cfg).map_err(|e| diverged(step, e))?;
        }
    }
    let theta_norm = norm(state.params.as_slice());
    if !(theta_norm <= DIVERGENCE_NORM) {
        return Err(Error::Diverged { step, reason: format!("parameter norm {theta_norm:e}") });
    }
    state.step += 1;
    Ok(StepMetrics {
        epoch: state.epoch,
        step,
        mean_loss: fwd.mean_loss,
        train_accuracy: fwd.accuracy(),
        grad_norm,
        lambdas,
        max_cross_dot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobSpec};
    use crate::linalg::{gram_schmidt, max_abs_diff};
    use crate::model::{init_params, prng, Activation};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = prng(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn orthonormal(rank: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        gram_schmidt(&(0..rank).map(|i| randn(dim, seed + i as u64)).collect::<Vec<_>>(), 1e-8).unwrap()
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let cfg = OptimizerConfig { momentum_beta: 0.0, ..OptimizerConfig::sgd(0.3) };
        let mut theta = vec![1.0, -2.0];
        let g = vec![0.5, 0.25];
        let mut m = MomentumState::new(2);
        sgd_step(&mut theta, &g, &mut m, &cfg).unwrap();
        assert_eq!(theta, vec![1.0 - 0.3 * 0.5, -2.0 - 0.3 * 0.25]);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let cfg = OptimizerConfig::sgd(0.1);
        let mut theta = vec![1.0, 2.0, 3.0];
        let mut m = MomentumState::new(3);
        for _ in 0..10 {
            sgd_step(&mut theta, &[0.0; 3], &mut m, &cfg).unwrap();
        }
        assert_eq!(theta, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn scalar_quadratic_contraction() {
        let lambda = 3.0;
        let cfg = OptimizerConfig { momentum_beta: 0.0, ..OptimizerConfig::sgd(1.9 / lambda) };
        let mut theta: Vec<f64> = vec![1.0];
        let mut m = MomentumState::new(1);
        for _ in 0..20 {
            let before = theta[0].abs();
            let g = vec![lambda * theta[0]];
            sgd_step(&mut theta, &g, &mut m, &cfg).unwrap();
            assert!((theta[0].abs() / before - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let cfg = OptimizerConfig::sgd(0.1);
        let mut theta = vec![1.0];
        let mut m = MomentumState::new(1);
        assert!(matches!(
            sgd_step(&mut theta, &[f64::NAN], &mut m, &cfg),
            Err(Error::NonFiniteUpdate(_))
        ));
        assert_eq!(theta, vec![1.0]);
    }

    #[test]
    fn qn_with_no_directions_is_sgd() {
        for placement in [MomentumPlacement::CombinedUpdate, MomentumPlacement::ProjectedOnly] {
            let cfg = OptimizerConfig { momentum_applies_to: placement, ..OptimizerConfig::quasi_newton(0.05) };
            let h = LowRankHessian::new(Vec::new(), Vec::new(), true).unwrap();
            let mut a = randn(8, 1);
            let mut b = a.clone();
            let (mut ma, mut mb) = (MomentumState::new(8), MomentumState::new(8));
            for s in 0..5 {
                let g = randn(8, 10 + s);
                qn_step(&mut a, &g, &h, &mut ma, &cfg).unwrap();
                sgd_step(&mut b, &g, &mut mb, &cfg).unwrap();
            }
            assert_eq!(a, b);
        }
    }

    #[test]
    fn inverse_eta_eigenvalues_reduce_to_sgd() {
        let eta = 0.1;
        let dirs = orthonormal(3, 10, 3);
        let h = LowRankHessian::new(dirs, vec![1.0 / eta; 3], true).unwrap();
        let g = randn(10, 4);
        let cfg = OptimizerConfig::quasi_newton(eta);
        let delta = qn_raw_update(&g, &h, &cfg).unwrap();
        let sgd: Vec<f64> = g.iter().map(|x| -eta * x).collect();
        assert!(max_abs_diff(&delta, &sgd) < 1e-12);
    }

    #[test]
    fn pure_newton_along_a_direction() {
        let dirs = orthonormal(2, 6, 5);
        let h = LowRankHessian::new(dirs.clone(), vec![2.0, 5.0], true).unwrap();
        let cfg = OptimizerConfig { momentum_beta: 0.0, ..OptimizerConfig::quasi_newton(0.1) };
        let mut theta = vec![0.0; 6];
        let mut m = MomentumState::new(6);
        qn_step(&mut theta, &dirs[0], &h, &mut m, &cfg).unwrap();
        let want: Vec<f64> = dirs[0].iter().map(|x| -0.5 * x).collect();
        assert!(max_abs_diff(&theta, &want) < 1e-12);
    }

    #[test]
    fn update_decomposes_into_pinv_and_projection() {
        let dirs = orthonormal(3, 12, 7);
        let h = LowRankHessian::new(dirs, vec![0.7, 3.0, 12.0], true).unwrap();
        let g = randn(12, 8);
        let cfg = OptimizerConfig::quasi_newton(0.05);
        let delta = qn_raw_update(&g, &h, &cfg).unwrap();
        let newton = h.apply_pinv(&g).unwrap();
        let comp = h.project_complement(&g).unwrap();
        let want: Vec<f64> = newton.iter().zip(&comp).map(|(n, p)| -n - 0.05 * p).collect();
        assert!(max_abs_diff(&delta, &want) < 1e-12);
    }

    #[test]
    fn projected_only_momentum_keeps_newton_part_raw() {
        let dirs = orthonormal(2, 5, 9);
        let h = LowRankHessian::new(dirs, vec![1.5, 4.0], true).unwrap();
        let cfg = OptimizerConfig { momentum_applies_to: MomentumPlacement::ProjectedOnly, ..OptimizerConfig::quasi_newton(0.1) };
        let g = randn(5, 10);
        let mut theta = vec![0.0; 5];
        let mut m = MomentumState::new(5);
        qn_step(&mut theta, &g, &h, &mut m, &cfg).unwrap();
        // from rest the first step equals the raw update
        assert!(max_abs_diff(&theta, &qn_raw_update(&g, &h, &cfg).unwrap()) < 1e-12);
        let comp = h.project_complement(&g).unwrap();
        assert!(max_abs_diff(&m.velocity, &comp) < 1e-12);
    }

    #[test]
    fn newton_step_cap() {
        let dirs = orthonormal(1, 4, 11);
        let h = LowRankHessian::new(dirs.clone(), vec![1e-6], true).unwrap();
        let cfg = OptimizerConfig { max_newton_step: Some(0.5), ..OptimizerConfig::quasi_newton(0.1) };
        let delta = qn_raw_update(&dirs[0], &h, &cfg).unwrap();
        let along = dot(&delta, &dirs[0]);
        assert!((along - (-0.1 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn subspace_newton_solves_quadratic_in_span() {
        // H = Σ λ_big v vᵀ + λ_small (I − Σ v vᵀ); θ* = 0
        let n = 10;
        let dirs = orthonormal(2, n, 20);
        let big = [50.0, 20.0];
        let small = 0.3;
        let mut hess = crate::linalg::DenseMatrix::identity(n);
        for i in 0..n {
            hess[(i, i)] = small;
        }
        for (v, &l) in dirs.iter().zip(&big) {
            hess.add_outer(l - small, v, v);
        }
        let theta0 = randn(n, 21);
        let g = hess.matvec(&theta0).unwrap();
        let h = LowRankHessian::new(dirs.clone(), big.to_vec(), true).unwrap();
        let eta = 0.5;
        let cfg = OptimizerConfig { momentum_beta: 0.0, ..OptimizerConfig::quasi_newton(eta) };
        let mut theta = theta0.clone();
        let mut m = MomentumState::new(n);
        qn_step(&mut theta, &g, &h, &mut m, &cfg).unwrap();
        for v in &dirs {
            assert!(dot(v, &theta).abs() < 1e-10);
        }
        let before = h.project_complement(&theta0).unwrap();
        let after = h.project_complement(&theta).unwrap();
        let want: Vec<f64> = before.iter().map(|x| (1.0 - eta * small) * x).collect();
        assert!(max_abs_diff(&after, &want) < 1e-12);
    }

    fn blobs() -> Dataset {
        generate_blobs(&BlobSpec { classes: 3, per_class: 12, dim: 4, mean_scale: 3.0, sigma: 0.7, seed: 2 }).unwrap()
    }

    #[test]
    fn epoch_row_count_and_determinism() {
        let ds = blobs();
        let spec = ModelSpec::new(vec![4, 6, 3], Activation::Relu).unwrap();
        for cfg in [OptimizerConfig::sgd(0.05), OptimizerConfig::quasi_newton(0.05)] {
            let run = || {
                let mut st = TrainState::new(&spec, init_params(&spec, 1), &cfg).unwrap();
                let r = train_epoch(&spec, &ds, &cfg, &mut st, 5, 77, None);
                assert!(r.failure.is_none());
                (r.metrics, st.params)
            };
            let (a, pa) = run();
            let (b, pb) = run();
            assert_eq!(a.len(), 36usize.div_ceil(5));
            assert_eq!(a, b);
            assert_eq!(pa, pb);
            if cfg.method == Method::QuasiNewton {
                assert!(a.iter().all(|m| m.lambdas.len() == 3 && m.max_cross_dot.is_some()));
            }
        }
    }

    #[test]
    fn full_batch_is_one_step() {
        let ds = blobs();
        let spec = ModelSpec::linear(4, 3);
        let cfg = OptimizerConfig::quasi_newton(0.1);
        let mut st = TrainState::new(&spec, init_params(&spec, 3), &cfg).unwrap();
        let r = train_epoch(&spec, &ds, &cfg, &mut st, ds.len(), 0, None);
        assert_eq!(r.metrics.len(), 1);
    }

    #[test]
    fn observer_sees_class_gradients_for_sgd() {
        let ds = blobs();
        let spec = ModelSpec::linear(4, 3);
        let cfg = OptimizerConfig::sgd(0.1);
        let mut st = TrainState::new(&spec, init_params(&spec, 3), &cfg).unwrap();
        let mut seen = 0;
        let mut obs = |o: &StepObservation<'_>| {
            assert_eq!(o.class_gradients.len(), 3);
            seen += 1;
        };
        let r = train_epoch(&spec, &ds, &cfg, &mut st, 12, 0, Some(&mut obs));
        assert!(r.failure.is_none());
        assert_eq!(seen, 3);
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence() {
        let ds = blobs();
        let spec = ModelSpec::new(vec![4, 6, 3], Activation::Relu).unwrap();
        let cfg = OptimizerConfig::sgd(1e6);
        let mut st = TrainState::new(&spec, init_params(&spec, 3), &cfg).unwrap();
        let mut failure = None;
        let mut steps = 0;
        for e in 0..50 {
            let r = train_epoch(&spec, &ds, &cfg, &mut st, 6, e, None);
            steps += r.metrics.len();
            if let Some(f) = r.failure {
                failure = Some(f);
                break;
            }
        }
        assert!(matches!(failure, Some(Error::Diverged { .. })), "{failure:?}");
        assert_eq!(steps, st.step);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { momentum_beta: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        let d = OptimizerConfig::default();
        assert_eq!((d.eta, d.momentum_beta, d.gamma, d.weight_decay), (0.1, 0.9, 0.9, 0.0));
    }
}
