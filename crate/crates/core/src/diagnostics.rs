//! Measurements of the curvature picture: the quadratic gradient-descent
//! testbed, the dense Gauss-Newton Hessian, low-rank approximation error,
//! logit-gradient residuals, eigenspectra and class-gradient/eigenvector
//! overlap.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{batch_logit_gradients, forward_batch, fd_hessian, DEFAULT_DENSE_CAP, DEFAULT_FD_STEP};
use crate::curvature::LowRankHessian;
use crate::data::Examples;
use crate::error::{Error, Result};
use crate::linalg::{
    axpy, dot, gram_schmidt, hungarian_max, norm, numerical_rank, rank_from_singular_values, singular_values,
    sym_eig, DenseMatrix, EigenSystem,
};
use crate::model::{prng, ModelSpec, ParamVector};

pub const DIAG_SCHEMA: &str = "diag-v1";

/// `f(θ) = ½ (θ − θ*)ᵀ H (θ − θ*)` with `H` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub hessian: DenseMatrix,
    pub minimum: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(hessian: DenseMatrix, minimum: Vec<f64>) -> Result<Self> {
        if !hessian.is_square() {
            return Err(Error::NotSquare { rows: hessian.rows(), cols: hessian.cols() });
        }
        if hessian.rows() != minimum.len() {
            return Err(Error::DimensionMismatch { expected: hessian.rows(), actual: minimum.len() });
        }
        if hessian.sub(&hessian.transpose())?.max_abs() > 1e-12 {
            return Err(Error::InvalidArgument("quadratic Hessian must be symmetric".into()));
        }
        let eig = sym_eig(&hessian)?;
        if eig.eigenvalues.last().is_some_and(|&l| l <= 0.0) {
            return Err(Error::InvalidArgument("quadratic Hessian must be positive definite".into()));
        }
        Ok(Self { hessian, minimum })
    }

    /// Random SPD problem `Q diag(λ) Qᵀ` with eigenvalues log-uniform in
    /// `[lo, hi]` and a standard normal minimum.
    pub fn random(dim: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("quadratic dimension must be positive".into()));
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("eigenvalue range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        let mut rng = prng(seed);
        let raw: Vec<Vec<f64>> = (0..dim).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let q = gram_schmidt(&raw, 1e-10)?;
        if q.len() != dim {
            return Err(Error::InvalidArgument("random basis was rank deficient".into()));
        }
        let mut h = DenseMatrix::zeros(dim, dim);
        for v in &q {
            let l = lo * (hi / lo).powf(rng.random::<f64>());
            h.add_outer(l, v, v);
        }
        let h = h.symmetrized()?;
        let minimum = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(h, minimum)
    }

    pub fn dim(&self) -> usize {
        self.minimum.len()
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let delta: Vec<f64> = theta.iter().zip(&self.minimum).map(|(a, b)| a - b).collect();
        self.hessian.matvec(&delta)
    }

    pub fn max_eigenvalue(&self) -> Result<f64> {
        Ok(sym_eig(&self.hessian)?.eigenvalues[0])
    }
}

/// Distances `‖θ^{(t)} − θ*‖` for `t = 0..=steps` under plain gradient
/// descent `θ ← θ − η H (θ − θ*)`.
pub fn quadratic_gd_trajectory(p: &QuadraticProblem, theta0: &[f64], eta: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if theta0.len() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), actual: theta0.len() });
    }
    let mut theta = theta0.to_vec();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(norm(&crate::linalg::sub(&theta, &p.minimum)));
    for _ in 0..steps {
        let g = p.gradient(&theta)?;
        axpy(-eta, &g, &mut theta);
        out.push(norm(&crate::linalg::sub(&theta, &p.minimum)));
    }
    Ok(out)
}

/// The same distances from the eigendecomposition:
/// `‖θ^{(t)} − θ*‖² = Σ_i (1 − ηλ_i)^{2t} (v_iᵀ δ₀)²`.
pub fn quadratic_closed_form(p: &QuadraticProblem, theta0: &[f64], eta: f64, steps: usize) -> Result<Vec<f64>> {
    let eig = sym_eig(&p.hessian)?;
    let delta0 = crate::linalg::sub(theta0, &p.minimum);
    let coords: Vec<f64> = eig.eigenvectors.iter().map(|v| dot(v, &delta0)).collect();
    Ok((0..=steps)
        .map(|t| {
            eig.eigenvalues
                .iter()
                .zip(&coords)
                .map(|(&l, &c)| (1.0 - eta * l).powi(2 * t as i32) * c * c)
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

fn check_dense_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        return Err(Error::DenseCapExceeded { params: n, cap });
    }
    Ok(())
}

/// `(1/|B|) Σ_μ Σ_{k,ℓ} p_k (δ_kℓ − p_ℓ) ∇z_k ∇z_ℓᵀ` from precomputed
/// logit gradients `[example][class]` and probabilities `[example][class]`.
/// Assembled per example as `Σ_k p_k ∇z_k ∇z_kᵀ − s sᵀ` with
/// `s = Σ_k p_k ∇z_k`.
pub fn gauss_newton_from_parts(logit_grads: &[Vec<Vec<f64>>], probs: &DenseMatrix) -> Result<DenseMatrix> {
    let b = logit_grads.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = logit_grads[0].first().map_or(0, Vec::len);
    let mut h = DenseMatrix::zeros(n, n);
    for (mu, grads) in logit_grads.iter().enumerate() {
        let mut s = vec![0.0; n];
        for (k, gk) in grads.iter().enumerate() {
            let p = probs[(mu, k)];
            h.add_outer(p / b as f64, gk, gk);
            axpy(p, gk, &mut s);
        }
        h.add_outer(-1.0 / b as f64, &s, &s);
    }
    h.symmetrized()
}

/// Dense Gauss-Newton part of the cross-entropy Hessian for a batch.
pub fn gauss_newton_hessian(spec: &ModelSpec, params: &ParamVector, batch: &Examples) -> Result<DenseMatrix> {
    gauss_newton_hessian_capped(spec, params, batch, DEFAULT_DENSE_CAP)
}

pub fn gauss_newton_hessian_capped(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Examples,
    cap: usize,
) -> Result<DenseMatrix> {
    check_dense_cap(params.len(), cap)?;
    let fwd = forward_batch(spec, params, batch)?;
    let lg = batch_logit_gradients(spec, params, batch)?;
    gauss_newton_from_parts(&lg, &fwd.probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowRankError {
    /// `‖H_lowrank − H_GN‖_F / ‖H_GN‖_F`
    pub frobenius_rel_error: f64,
    /// Largest principal angle (radians) between `span{v_k}` and the top
    /// eigenspace of the Gauss-Newton matrix of the same dimension.
    pub top_subspace_angle: f64,
}

/// Principal angles (radians, ascending) between the spans of two sets of
/// vectors. Both sets are orthonormalized first.
pub fn principal_angles(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    let qa = gram_schmidt(a, 1e-12)?;
    let qb = gram_schmidt(b, 1e-12)?;
    if qa.is_empty() || qb.is_empty() {
        return Ok(Vec::new());
    }
    let mut m = DenseMatrix::zeros(qa.len(), qb.len());
    for (i, x) in qa.iter().enumerate() {
        for (j, y) in qb.iter().enumerate() {
            m[(i, j)] = dot(x, y);
        }
    }
    let mut sv = singular_values(&m)?;
    sv.truncate(qa.len().min(qb.len()));
    Ok(sv.iter().map(|&s| s.clamp(-1.0, 1.0).acos()).collect())
}

pub fn low_rank_error_against(gauss_newton: &DenseMatrix, h: &LowRankHessian) -> Result<LowRankError> {
    let diff = h.to_dense().sub(gauss_newton)?;
    let denom = gauss_newton.frobenius_norm();
    let frobenius_rel_error = if denom == 0.0 { diff.frobenius_norm() } else { diff.frobenius_norm() / denom };
    let eig = sym_eig(gauss_newton)?;
    let top: Vec<Vec<f64>> = eig.eigenvectors.iter().take(h.rank()).cloned().collect();
    let angles = principal_angles(&h.directions, &top)?;
    let top_subspace_angle = angles.iter().copied().fold(0.0, f64::max);
    Ok(LowRankError { frobenius_rel_error, top_subspace_angle })
}

/// Compares a low-rank Hessian with the dense Gauss-Newton matrix of the
/// batch.
pub fn low_rank_error(spec: &ModelSpec, params: &ParamVector, batch: &Examples, h: &LowRankHessian) -> Result<LowRankError> {
    let gn = gauss_newton_hessian(spec, params, batch)?;
    low_rank_error_against(&gn, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub class: usize,
    /// Mean and max of `‖ε_k^μ‖/‖c_k‖` over examples of class `k`.
    pub within_mean: f64,
    pub within_max: f64,
    /// Same ratio over examples of other classes, where `ε_k^μ = ∇z_k^μ`.
    pub other_mean: f64,
    pub other_max: f64,
}

/// Residual of the logit-gradient decomposition
/// `ε_k^μ = ∇z_k^μ − y_k^μ c_k`.
pub fn logit_residual(logit_grad: &[f64], label: usize, class: usize, class_gradient: &[f64]) -> Vec<f64> {
    let mut e = logit_grad.to_vec();
    if label == class {
        axpy(-1.0, class_gradient, &mut e);
    }
    e
}

/// Per-class residual statistics. `class_gradients[k]` may be `None` for
/// classes without examples, which are skipped.
pub fn logit_residuals(
    logit_grads: &[Vec<Vec<f64>>],
    labels: &[usize],
    class_gradients: &[Option<Vec<f64>>],
) -> Vec<ResidualStats> {
    let mut out = Vec::new();
    for (k, c) in class_gradients.iter().enumerate() {
        let Some(c) = c else { continue };
        let cn = norm(c);
        let (mut wsum, mut wmax, mut wn) = (0.0, 0.0_f64, 0usize);
        let (mut osum, mut omax, mut on) = (0.0, 0.0_f64, 0usize);
        for (grads, &y) in logit_grads.iter().zip(labels) {
            let ratio = norm(&logit_residual(&grads[k], y, k, c)) / cn;
            if y == k {
                wsum += ratio;
                wmax = wmax.max(ratio);
                wn += 1;
            } else {
                osum += ratio;
                omax = omax.max(ratio);
                on += 1;
            }
        }
        out.push(ResidualStats {
            class: k,
            within_mean: if wn > 0 { wsum / wn as f64 } else { 0.0 },
            within_max: wmax,
            other_mean: if on > 0 { osum / on as f64 } else { 0.0 },
            other_max: omax,
        });
    }
    out
}

/// Mean logit gradient `c_k` of each class over the given examples
/// (`None` for classes without examples).
pub fn class_gradients(logit_grads: &[Vec<Vec<f64>>], labels: &[usize], classes: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums: Vec<Option<Vec<f64>>> = vec![None; classes];
    let mut counts = vec![0usize; classes];
    for (grads, &y) in logit_grads.iter().zip(labels) {
        match &mut sums[y] {
            Some(s) => axpy(1.0, &grads[y], s),
            slot @ None => *slot = Some(grads[y].clone()),
        }
        counts[y] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| s.map(|v| v.into_iter().map(|x| x / n as f64).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// `cosine_matrix[k][j] = |cos(c_k, e_j)|`
    pub cosine_matrix: Vec<Vec<f64>>,
    /// Row `k` → eigenvector index chosen by the cosine-maximizing assignment.
    pub assignment: Vec<usize>,
    /// Mean assigned cosine.
    pub assignment_score: f64,
    /// Numerical rank of `[v_1..v_C | e_1..e_C]`.
    pub combined_rank: usize,
    /// Singular values of the combined matrix, descending.
    pub combined_singular_values: Vec<f64>,
    pub rank_per_batch: Vec<usize>,
    pub residual_stats: Vec<ResidualStats>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

/// Cosine matrix, assignment score and combined rank between class
/// gradients and the leading `C` eigenvectors.
pub fn subspace_overlap(class_grads: &[Vec<f64>], eig: &EigenSystem, rel_tol: f64) -> Result<OverlapReport> {
    let c = class_grads.len();
    if eig.len() < c {
        return Err(Error::InvalidArgument(format!("need at least {c} eigenvectors, have {}", eig.len())));
    }
    let dirs: Vec<Vec<f64>> = class_grads.iter().map(|g| unit(g)).collect();
    let top = &eig.eigenvectors[..c];
    let mut cos = DenseMatrix::zeros(c, c);
    for (k, v) in dirs.iter().enumerate() {
        for (j, e) in top.iter().enumerate() {
            cos[(k, j)] = dot(v, e).abs().min(1.0);
        }
    }
    let assignment = hungarian_max(&cos)?;
    let mut columns = dirs.clone();
    columns.extend(top.iter().cloned());
    let combined = DenseMatrix::from_columns(&columns)?;
    let sv = singular_values(&combined)?;
    Ok(OverlapReport {
        cosine_matrix: (0..c).map(|k| cos.row(k).to_vec()).collect(),
        assignment: assignment.columns,
        assignment_score: if c == 0 { 0.0 } else { assignment.total / c as f64 },
        combined_rank: rank_from_singular_values(&sv, rel_tol),
        combined_singular_values: sv,
        rank_per_batch: Vec::new(),
        residual_stats: Vec::new(),
    })
}

/// Rank of `[v_1..v_m | e_1..e_C]` for one batch's class gradients plus
/// the singular values `σ_C`, `σ_{C+1}`, `σ_{2C}` (1-based, when present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRank {
    pub present_classes: usize,
    pub rank: usize,
    pub sigma_c: Option<f64>,
    pub sigma_c_plus_1: Option<f64>,
    pub sigma_2c: Option<f64>,
}

pub fn batch_combined_rank(class_grads: &[Vec<f64>], top: &[Vec<f64>], rel_tol: f64) -> Result<BatchRank> {
    let c = top.len();
    let mut columns: Vec<Vec<f64>> = class_grads.iter().map(|g| unit(g)).collect();
    columns.extend(top.iter().cloned());
    let sv = singular_values(&DenseMatrix::from_columns(&columns)?)?;
    let pick = |i: usize| if i >= 1 { sv.get(i - 1).copied() } else { None };
    Ok(BatchRank {
        present_classes: class_grads.len(),
        rank: rank_from_singular_values(&sv, rel_tol),
        sigma_c: pick(c),
        sigma_c_plus_1: pick(c + 1),
        sigma_2c: pick(2 * c),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    /// `λ_C / λ_{C+1}` when both exist and the denominator is positive.
    pub gap_ratio: Option<f64>,
    pub fd_eigenvalues: Option<Vec<f64>>,
}

pub fn spectrum_from(eig: &EigenSystem, classes: usize, top_n: usize) -> SpectrumReport {
    let n = top_n.min(eig.len());
    let gap_ratio = match (classes.checked_sub(1).and_then(|i| eig.eigenvalues.get(i)), eig.eigenvalues.get(classes)) {
        (Some(&a), Some(&b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    SpectrumReport { eigenvalues: eig.eigenvalues[..n].to_vec(), gap_ratio, fd_eigenvalues: None }
}

/// Top `top_n` Gauss-Newton eigenvalues (clamped to `N`), optionally with
/// the finite-difference Hessian spectrum alongside.
pub fn eigenspectrum_report(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Examples,
    top_n: usize,
    with_fd: bool,
) -> Result<SpectrumReport> {
    let gn = gauss_newton_hessian(spec, params, batch)?;
    let mut report = spectrum_from(&sym_eig(&gn)?, spec.classes(), top_n);
    if with_fd {
        let fd = fd_hessian(spec, params, batch, DEFAULT_FD_STEP, DEFAULT_DENSE_CAP)?;
        let fe = sym_eig(&fd)?;
        report.fd_eigenvalues = Some(fe.eigenvalues[..top_n.min(fe.len())].to_vec());
    }
    Ok(report)
}

/// `|cos|` between `pairs` independent pairs of uniformly random unit
/// vectors in `dim` dimensions.
pub fn random_cosines(dim: usize, pairs: usize, seed: u64) -> Vec<f64> {
    let mut rng = prng(seed);
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    (0..pairs)
        .map(|_| {
            for x in a.iter_mut().chain(b.iter_mut()) {
                *x = rng.sample(StandardNormal);
            }
            (dot(&a, &b) / (norm(&a) * norm(&b))).abs()
        })
        .collect()
}

/// `E|cos|` for random unit vectors, `Γ(d/2) / (√π Γ((d+1)/2))`, evaluated
/// through a log-gamma ratio; approaches `√(2/(πd))` for large `d`.
pub fn expected_random_cosine(dim: usize) -> f64 {
    let d = dim as f64;
    (ln_gamma(d / 2.0) - ln_gamma((d + 1.0) / 2.0)).exp() / std::f64::consts::PI.sqrt()
}

// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 relative.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Numerical rank helper re-exported for report builders.
pub fn combined_rank(columns: &[Vec<f64>], rel_tol: f64) -> Result<usize> {
    numerical_rank(&DenseMatrix::from_columns(columns)?, rel_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_hessian, min_abs_preactivation};
    use crate::linalg::max_abs_diff;
    use crate::model::{init_params, Activation};

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = prng(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn random_examples(n: usize, d: usize, classes: usize, seed: u64) -> Examples {
        let mut rng = prng(seed);
        let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Examples::new(DenseMatrix::from_row_major(n, d, data).unwrap(), labels).unwrap()
    }

    #[test]
    fn one_step_convergence_and_growth_factor() {
        let p = QuadraticProblem::new(DenseMatrix::diagonal(&[1.0]), vec![0.0]).unwrap();
        let d = quadratic_gd_trajectory(&p, &[3.0], 1.0, 3).unwrap();
        assert_eq!(d, vec![3.0, 0.0, 0.0, 0.0]);
        let p = QuadraticProblem::new(DenseMatrix::diagonal(&[4.0, 1.0]), vec![0.0, 0.0]).unwrap();
        let mut theta = vec![1.0, 0.0];
        for _ in 0..5 {
            let g = p.gradient(&theta).unwrap();
            let before = theta[0];
            axpy(-0.6, &g, &mut theta);
            assert!((theta[0] / before + 1.4).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_matches_closed_form() {
        for seed in 0..5 {
            let p = QuadraticProblem::random(6, 0.1, 5.0, seed).unwrap();
            let theta0 = randn(6, seed + 50);
            let lmax = p.max_eigenvalue().unwrap();
            let a = quadratic_gd_trajectory(&p, &theta0, 1.5 / lmax, 40).unwrap();
            let b = quadratic_closed_form(&p, &theta0, 1.5 / lmax, 40).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-9);
        }
    }

    #[test]
    fn quadratic_validation() {
        assert!(QuadraticProblem::new(DenseMatrix::diagonal(&[1.0, -1.0]), vec![0.0; 2]).is_err());
        let p = QuadraticProblem::new(DenseMatrix::identity(2), vec![0.0; 2]).unwrap();
        assert!(quadratic_gd_trajectory(&p, &[1.0, 1.0], 0.1, 0).is_err());
    }

    #[test]
    fn gauss_newton_uniform_axis_case() {
        let c = 3;
        let grads: Vec<Vec<f64>> = (0..c).map(|k| (0..c).map(|i| if i == k { 1.0 } else { 0.0 }).collect()).collect();
        let probs = DenseMatrix::from_rows(&[vec![1.0 / 3.0; 3]]).unwrap();
        let h = gauss_newton_from_parts(&[grads], &probs).unwrap();
        for i in 0..c {
            for j in 0..c {
                let want = (1.0 / 3.0) * (if i == j { 1.0 } else { 0.0 } - 1.0 / 3.0);
                assert!((h[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gauss_newton_equals_fd_hessian_for_linear_softmax() {
        let spec = ModelSpec::linear(3, 3);
        let params = init_params(&spec, 4);
        let batch = random_examples(7, 3, 3, 5);
        let gn = gauss_newton_hessian(&spec, &params, &batch).unwrap();
        let fd = fd_hessian(&spec, &params, &batch, 1e-5, DEFAULT_DENSE_CAP).unwrap();
        assert!(gn.sub(&fd).unwrap().max_abs() < 1e-6);
        let eig = sym_eig(&gn).unwrap();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-9));
    }

    #[test]
    fn relu_hessian_is_gauss_newton_plus_logit_curvature() {
        // H = GN + (1/|B|) Σ_μ Σ_k (p_k − y_k) ∇²z_k
        let spec = ModelSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let params = init_params(&spec, 12);
        let batch = random_examples(3, 2, 2, 13);
        assert!(min_abs_preactivation(&spec, &params, &batch.inputs).unwrap() > 1e-3);
        let fwd = forward_batch(&spec, &params, &batch).unwrap();
        let gn = gauss_newton_hessian(&spec, &params, &batch).unwrap();
        let fd = fd_hessian(&spec, &params, &batch, 1e-5, DEFAULT_DENSE_CAP).unwrap();
        let mut rebuilt = gn.clone();
        for r in 0..batch.len() {
            for k in 0..2 {
                let coeff = (fwd.probs[(r, k)] - fwd.labels[(r, k)]) / batch.len() as f64;
                let hz =
                    crate::autodiff::fd_logit_hessian(&spec, &params, batch.inputs.row(r), k, 1e-5, 100).unwrap();
                for (a, b) in rebuilt.as_mut_slice().iter_mut().zip(hz.as_slice()) {
                    *a += coeff * b;
                }
            }
        }
        assert!(rebuilt.sub(&fd).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn dense_cap_is_enforced() {
        let spec = ModelSpec::linear(3, 3);
        let params = init_params(&spec, 4);
        let batch = random_examples(2, 3, 3, 5);
        assert!(matches!(
            gauss_newton_hessian_capped(&spec, &params, &batch, 5),
            Err(Error::DenseCapExceeded { params: 12, cap: 5 })
        ));
    }

    #[test]
    fn low_rank_exact_when_residuals_vanish() {
        // each example's logit gradient is c_label for its own class and 0 otherwise
        let n = 6;
        let cs = [vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.5, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 3.0, 0.0]];
        let labels = [0, 1, 2, 0, 1];
        let probs = DenseMatrix::from_rows(&[
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.1, 0.8],
            vec![0.7, 0.2, 0.1],
            vec![0.3, 0.4, 0.3],
        ])
        .unwrap();
        let lg: Vec<Vec<Vec<f64>>> = labels
            .iter()
            .map(|&y| (0..3).map(|k| if k == y { cs[k].clone() } else { vec![0.0; n] }).collect())
            .collect();
        let gn = gauss_newton_from_parts(&lg, &probs).unwrap();
        let b = labels.len() as f64;
        let eigenvalues: Vec<f64> = (0..3)
            .map(|k| {
                let s: f64 = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &y)| y == k)
                    .map(|(r, _)| probs[(r, k)] * (1.0 - probs[(r, k)]))
                    .sum();
                s / b * dot(&cs[k], &cs[k])
            })
            .collect();
        let h = LowRankHessian::new(cs.iter().map(|c| unit(c)).collect(), eigenvalues, true).unwrap();
        let err = low_rank_error_against(&gn, &h).unwrap();
        assert!(err.frobenius_rel_error < 1e-10);
        assert!(err.top_subspace_angle < 1e-6);
    }

    #[test]
    fn low_rank_error_matches_direct_reassembly() {
        let spec = ModelSpec::new(vec![3, 4, 3], Activation::Relu).unwrap();
        let params = init_params(&spec, 2);
        let batch = random_examples(6, 3, 3, 3);
        let dirs: Vec<Vec<f64>> = (0..3).map(|k| unit(&randn(params.len(), 40 + k))).collect();
        let h = LowRankHessian::new(dirs.clone(), vec![0.5, 0.2, 0.1], false).unwrap();
        let err = low_rank_error(&spec, &params, &batch, &h).unwrap();
        let gn = gauss_newton_hessian(&spec, &params, &batch).unwrap();
        let mut diff = gn.clone();
        for (v, l) in dirs.iter().zip([0.5, 0.2, 0.1]) {
            diff.add_outer(-l, v, v);
        }
        let want = diff.frobenius_norm() / gn.frobenius_norm();
        assert!((err.frobenius_rel_error - want).abs() < 1e-12);
    }

    #[test]
    fn single_direction_angle_is_zero_when_spans_coincide() {
        let v = unit(&[1.0, 2.0, 2.0]);
        let mut gn = DenseMatrix::zeros(3, 3);
        gn.add_outer(3.0, &v, &v);
        let h = LowRankHessian::new(vec![v.clone()], vec![3.0], true).unwrap();
        let err = low_rank_error_against(&gn, &h).unwrap();
        assert!(err.top_subspace_angle.abs() < 1e-7);
        assert!(err.frobenius_rel_error < 1e-12);
    }

    #[test]
    fn residual_identities() {
        let lg = vec![
            vec![vec![1.0, 0.0], vec![5.0, 5.0]],
            vec![vec![3.0, 2.0], vec![1.0, -1.0]],
            vec![vec![0.5, 0.5], vec![2.0, 0.0]],
        ];
        let labels = vec![0, 0, 1];
        let cg = class_gradients(&lg, &labels, 2);
        assert_eq!(cg[0], Some(vec![2.0, 1.0]));
        // mean residual over the class is zero
        let mut mean = vec![0.0; 2];
        for (g, &y) in lg.iter().zip(&labels) {
            if y == 0 {
                axpy(0.5, &logit_residual(&g[0], y, 0, cg[0].as_ref().unwrap()), &mut mean);
            }
        }
        assert!(norm(&mean) < 1e-12);
        // off-class residual is the logit gradient itself
        assert_eq!(logit_residual(&lg[2][0], 1, 0, cg[0].as_ref().unwrap()), lg[2][0]);
        // identical members → zero within-class residual
        let same = vec![vec![vec![1.0, 1.0]], vec![vec![1.0, 1.0]]];
        let st = logit_residuals(&same, &[0, 0], &class_gradients(&same, &[0, 0], 1));
        assert_eq!(st[0].within_max, 0.0);
    }

    #[test]
    fn overlap_on_permuted_eigenvectors() {
        let basis = gram_schmidt(&(0..3).map(|k| randn(20, k)).collect::<Vec<_>>(), 1e-8).unwrap();
        let eig = EigenSystem {
            eigenvalues: vec![3.0, 2.0, 1.0],
            eigenvectors: vec![basis[2].clone(), basis[0].iter().map(|x| -x).collect(), basis[1].clone()],
        };
        let scaled: Vec<Vec<f64>> = basis.iter().map(|v| v.iter().map(|x| 4.0 * x).collect()).collect();
        let r = subspace_overlap(&scaled, &eig, 1e-6).unwrap();
        assert!((r.assignment_score - 1.0).abs() < 1e-12);
        assert_eq!(r.assignment, vec![1, 2, 0]);
        assert_eq!(r.combined_rank, 3);
        assert!(r.cosine_matrix.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn overlap_with_independent_eigenvectors() {
        let all = gram_schmidt(&(0..6).map(|k| randn(200, 100 + k)).collect::<Vec<_>>(), 1e-8).unwrap();
        let grads: Vec<Vec<f64>> = (0..3).map(|k| randn(200, 300 + k)).collect();
        let eig = EigenSystem { eigenvalues: vec![3.0, 2.0, 1.0], eigenvectors: all[3..].to_vec() };
        let r = subspace_overlap(&grads, &eig, 1e-6).unwrap();
        assert_eq!(r.combined_rank, 6);
        assert!(subspace_overlap(&grads, &EigenSystem { eigenvalues: vec![1.0], eigenvectors: vec![all[0].clone()] }, 1e-6)
            .is_err());
    }

    #[test]
    fn expected_cosine_formula() {
        // d = 2: E|cos θ| for uniform θ is 2/π
        assert!((expected_random_cosine(2) - 2.0 / std::f64::consts::PI).abs() < 1e-12);
        // d = 3: E|u| for u uniform on [-1,1] is 1/2
        assert!((expected_random_cosine(3) - 0.5).abs() < 1e-12);
        let d = 10_000.0;
        assert!((expected_random_cosine(10_000) - (2.0 / (std::f64::consts::PI * d)).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn spectrum_clamps_and_is_psd() {
        let spec = ModelSpec::linear(2, 2);
        let params = init_params(&spec, 1);
        let batch = random_examples(4, 2, 2, 2);
        let r = eigenspectrum_report(&spec, &params, &batch, 100, true).unwrap();
        assert_eq!(r.eigenvalues.len(), 6);
        assert!(r.eigenvalues.iter().all(|&l| l >= -1e-9));
        let fd = r.fd_eigenvalues.unwrap();
        assert!(max_abs_diff(&fd, &r.eigenvalues) < 1e-6);
    }

    #[test]
    fn linear_spectrum_on_orthogonal_inputs() {
        // x = e_0, e_1 with zero weights, so p = 1/2. Each example adds
        // ½ u uᵀ with u = (g0 − g1)/2 a unit vector; the two u's have
        // cosine ½, giving eigenvalues ½(1 ± ½).
        let spec = ModelSpec::linear(2, 2);
        let params = ParamVector::zeros(&spec);
        let batch = Examples::new(DenseMatrix::identity(2), vec![0, 1]).unwrap();
        let r = eigenspectrum_report(&spec, &params, &batch, 6, false).unwrap();
        let want = [0.75, 0.25, 0.0, 0.0, 0.0, 0.0];
        assert!(max_abs_diff(&r.eigenvalues, &want) < 1e-8);
    }
}
