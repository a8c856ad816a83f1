//! Low-rank curvature built from class gradients.
//!
//! Per minibatch, the class gradient `c_k^B` is the mean logit gradient
//! `∇z_k` over the batch examples of class `k`, and the batch eigenvalue is
//! `λ_k^B = (1/|B|) Σ_μ y_k p_k (1 − p_k) |c_k^B|²`. Both are smoothed with a
//! bias-corrected exponential moving average (the eigenvalue as a root mean
//! square) and assembled into `H = Σ_k λ_k v_k v_kᵀ` with `v_k = ĉ_k/|ĉ_k|`.

use std::io::{Read, Write};

use log::warn;

use crate::autodiff::BatchForward;
use crate::data::Minibatch;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, gram_schmidt_indexed, norm, scale, DenseMatrix};

pub const DEFAULT_LAMBDA_FLOOR: f64 = 1e-8;

/// Norm below which a smoothed class gradient is treated as zero.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 5] = b"SCRV1";

/// Mean logit gradient of each class over its members in the batch.
/// `logit_grads` is indexed `[batch position][class]`. Classes with no
/// members are `None`.
pub fn batch_class_gradients(logit_grads: &[Vec<Vec<f64>>], batch: &Minibatch) -> Vec<Option<Vec<f64>>> {
    batch
        .partition
        .iter()
        .enumerate()
        .map(|(k, members)| {
            let first = *members.first()?;
            let mut c = logit_grads[first][k].clone();
            for &r in &members[1..] {
                axpy(1.0, &logit_grads[r][k], &mut c);
            }
            scale(1.0 / members.len() as f64, &mut c);
            Some(c)
        })
        .collect()
}

/// `λ_k^B = (1/|B|) Σ_μ y_k^μ p_k^μ (1 − p_k^μ) |c_k^B|²`, given the squared
/// norms `|c_k^B|²` (zero for absent classes).
pub fn batch_eigenvalues(forward: &BatchForward, class_grad_sq_norms: &[f64]) -> Vec<f64> {
    let b = forward.batch_size();
    (0..forward.classes())
        .map(|k| {
            let mut acc = 0.0;
            for r in 0..b {
                let y = forward.labels[(r, k)];
                if y != 0.0 {
                    let p = forward.probs[(r, k)];
                    acc += y * p * (1.0 - p);
                }
            }
            acc / b as f64 * class_grad_sq_norms[k]
        })
        .collect()
}

pub fn squared_norms(class_grads: &[Option<Vec<f64>>]) -> Vec<f64> {
    class_grads.iter().map(|c| c.as_ref().map_or(0.0, |v| dot(v, v))).collect()
}

/// Bias-corrected EMA class gradients and RMS eigenvalues with per-class
/// step counters.
///
/// The estimates are updated in debiased form,
/// `ĉ ← ĉ + w_t (c − ĉ)` with `w_t = (1−γ)/(1−γ^t)`, which equals
/// `m_t / (1−γ^t)` for the usual accumulator `m_t = γ m_{t−1} + (1−γ) c_t`
/// and makes the first estimate exactly the first observation. The squared
/// eigenvalues are averaged the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureState {
    ema_estimates: Vec<Vec<f64>>,
    rms_estimates: Vec<f64>,
    gamma: f64,
    step_counts: Vec<u64>,
    global_step: u64,
}

impl CurvatureState {
    pub fn new(classes: usize, dim: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0,1), got {gamma}")));
        }
        Ok(Self {
            ema_estimates: vec![vec![0.0; dim]; classes],
            rms_estimates: vec![0.0; classes],
            gamma,
            step_counts: vec![0; classes],
            global_step: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.rms_estimates.len()
    }

    pub fn dim(&self) -> usize {
        self.ema_estimates.first().map_or(0, Vec::len)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn step_count(&self, class: usize) -> u64 {
        self.step_counts[class]
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    /// Weight `(1−γ)/(1−γ^t)` of the `t`-th observation in the
    /// bias-corrected average; exactly 1 at `t = 1`.
    fn observation_weight(gamma: f64, t: u64) -> f64 {
        (1.0 - gamma) / (1.0 - gamma.powi(t.min(i32::MAX as u64) as i32))
    }

    /// Bias-corrected class gradient `ĉ_k`; `None` before the first
    /// observation of class `k`.
    pub fn class_gradient(&self, class: usize) -> Option<Vec<f64>> {
        if self.step_counts[class] == 0 {
            return None;
        }
        Some(self.ema_estimates[class].clone())
    }

    /// Bias-corrected RMS eigenvalue `λ̂_k`; 1 until class `k` is first seen.
    pub fn eigenvalue(&self, class: usize) -> f64 {
        if self.step_counts[class] == 0 {
            return 1.0;
        }
        self.rms_estimates[class].sqrt()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        (0..self.classes()).map(|k| self.eigenvalue(k)).collect()
    }

    /// Folds one batch into the running averages. Absent classes keep
    /// their accumulators and counters unchanged.
    pub fn update(&mut self, class_grads: &[Option<Vec<f64>>], batch_eigenvalues: &[f64]) -> Result<()> {
        if class_grads.len() != self.classes() {
            return Err(Error::DimensionMismatch { expected: self.classes(), actual: class_grads.len() });
        }
        if batch_eigenvalues.len() != self.classes() {
            return Err(Error::DimensionMismatch { expected: self.classes(), actual: batch_eigenvalues.len() });
        }
        for (k, c) in class_grads.iter().enumerate() {
            let Some(c) = c else { continue };
            if c.len() != self.dim() {
                return Err(Error::DimensionMismatch { expected: self.dim(), actual: c.len() });
            }
            self.step_counts[k] += 1;
            let w = Self::observation_weight(self.gamma, self.step_counts[k]);
            for (mi, ci) in self.ema_estimates[k].iter_mut().zip(c) {
                *mi += w * (ci - *mi);
            }
            let l = batch_eigenvalues[k];
            self.rms_estimates[k] += w * (l * l - self.rms_estimates[k]);
        }
        self.global_step += 1;
        Ok(())
    }

    /// Writes the `SCRV1` checkpoint: magic, then little-endian `C` and `N`
    /// (u64), the `C x N` bias-corrected class gradients, `C` bias-corrected
    /// mean squared eigenvalues, `C` step counters (u64) and `γ`. Multiply
    /// the averages by `1 − γ^{t_k}` to recover plain EMA accumulators.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.classes() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for m in &self.ema_estimates {
            for x in m {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for r in &self.rms_estimates {
            w.write_all(&r.to_le_bytes())?;
        }
        for t in &self.step_counts {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&self.gamma.to_le_bytes())?;
        Ok(())
    }

    /// Reads an `SCRV1` checkpoint. The global step is not part of the
    /// record and is restored as the largest per-class counter.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let mut u64_buf = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u64_buf).map_err(|_| Error::Checkpoint("truncated record".into()))?;
            Ok(u64::from_le_bytes(u64_buf))
        };
        let classes = next_u64(&mut r)? as usize;
        let dim = next_u64(&mut r)? as usize;
        let read_f64 = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated record".into()))?;
            Ok(f64::from_le_bytes(b))
        };
        let mut ema_estimates = Vec::with_capacity(classes);
        for _ in 0..classes {
            ema_estimates.push((0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?);
        }
        let rms_estimates = (0..classes).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut step_counts = Vec::with_capacity(classes);
        for _ in 0..classes {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated record".into()))?;
            step_counts.push(u64::from_le_bytes(b));
        }
        let gamma = read_f64(&mut r)?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Checkpoint(format!("gamma {gamma} outside (0,1)")));
        }
        let global_step = step_counts.iter().copied().max().unwrap_or(0);
        Ok(Self { ema_estimates, rms_estimates, gamma, step_counts, global_step })
    }
}

/// `H = Σ_k λ_k v_k v_kᵀ` over the classes that made it into the rank-C set.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankHessian {
    pub directions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Class index of each direction.
    pub classes: Vec<usize>,
    pub orthonormalized: bool,
}

impl LowRankHessian {
    /// Builds directly from unit directions and eigenvalues.
    pub fn new(directions: Vec<Vec<f64>>, eigenvalues: Vec<f64>, orthonormalized: bool) -> Result<Self> {
        if directions.len() != eigenvalues.len() {
            return Err(Error::DimensionMismatch { expected: directions.len(), actual: eigenvalues.len() });
        }
        let classes = (0..directions.len()).collect();
        Ok(Self { directions, eigenvalues, classes, orthonormalized })
    }

    pub fn rank(&self) -> usize {
        self.directions.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.directions.first().map(Vec::len)
    }

    fn check_dim(&self, u: &[f64]) -> Result<()> {
        match self.dim() {
            Some(n) if n != u.len() => Err(Error::DimensionMismatch { expected: n, actual: u.len() }),
            _ => Ok(()),
        }
    }

    /// `Σ_k λ_k (v_kᵀ u) v_k` without forming the `N x N` matrix.
    pub fn apply_hvp(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        let mut out = vec![0.0; u.len()];
        for (v, &l) in self.directions.iter().zip(&self.eigenvalues) {
            axpy(l * dot(v, u), v, &mut out);
        }
        Ok(out)
    }

    /// Generalized inverse `Σ_k (1/λ_k)(v_kᵀ g) v_k`.
    pub fn apply_pinv(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(g)?;
        let mut out = vec![0.0; g.len()];
        for (v, &l) in self.directions.iter().zip(&self.eigenvalues) {
            axpy(dot(v, g) / l, v, &mut out);
        }
        Ok(out)
    }

    /// `(I − Σ v_k v_kᵀ) g`, applied as sequential deflation in direction
    /// order. Exact for orthonormal directions; otherwise only the last
    /// direction is removed exactly.
    pub fn project_complement(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(g)?;
        let mut out = g.to_vec();
        for v in &self.directions {
            let c = dot(v, &out);
            axpy(-c, v, &mut out);
        }
        Ok(out)
    }

    /// Largest `|v_iᵀ v_j|` over distinct pairs; zero when orthogonal.
    pub fn max_cross_dot(&self) -> f64 {
        let mut m = 0.0_f64;
        for i in 0..self.rank() {
            for j in 0..i {
                m = m.max(dot(&self.directions[i], &self.directions[j]).abs());
            }
        }
        m
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.dim().unwrap_or(0);
        let mut m = DenseMatrix::zeros(n, n);
        for (v, &l) in self.directions.iter().zip(&self.eigenvalues) {
            m.add_outer(l, v, v);
        }
        m
    }
}

/// Assembles the low-rank Hessian from the running state. Classes never
/// observed, or whose smoothed gradient has vanishing norm, are left out.
pub fn build_low_rank(state: &CurvatureState, orthonormalize: bool, lambda_floor: f64) -> Result<LowRankHessian> {
    if !(lambda_floor > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_floor must be positive, got {lambda_floor}")));
    }
    let mut raw = Vec::new();
    let mut classes = Vec::new();
    for k in 0..state.classes() {
        let Some(c) = state.class_gradient(k) else { continue };
        let n = norm(&c);
        if !(n >= MIN_DIRECTION_NORM) {
            warn!("class {k}: smoothed class gradient norm {n:e} too small, excluded from the low-rank Hessian");
            continue;
        }
        raw.push(c.into_iter().map(|x| x / n).collect::<Vec<f64>>());
        classes.push(k);
    }
    let (directions, classes) = if orthonormalize {
        let kept = gram_schmidt_indexed(&raw, MIN_DIRECTION_NORM)?;
        let cls = kept.iter().map(|(i, _)| classes[*i]).collect();
        (kept.into_iter().map(|(_, v)| v).collect(), cls)
    } else {
        (raw, classes)
    };
    let eigenvalues = classes.iter().map(|&k| state.eigenvalue(k).max(lambda_floor)).collect();
    Ok(LowRankHessian { directions, eigenvalues, classes, orthonormalized: orthonormalize })
}
