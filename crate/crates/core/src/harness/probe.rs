use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Cell, ExperimentConfig, PreparedData};
use super::run::{train_cell, CellRun, Outcome};
use super::svg::{LineChart, Series};
use crate::autodiff::{batch_logit_gradients, fd_hessian, forward_batch, DEFAULT_DENSE_CAP, DEFAULT_FD_STEP};
use crate::curvature::{batch_eigenvalues, build_low_rank, squared_norms, LowRankHessian};
use crate::data::Examples;
use crate::diagnostics::{
    batch_combined_rank, class_gradients, gauss_newton_from_parts, logit_residuals, low_rank_error_against,
    spectrum_from, subspace_overlap, BatchRank, LowRankError, OverlapReport, SpectrumReport, DIAG_SCHEMA,
};
use crate::error::{Error, Result};
use crate::linalg::{gram_schmidt, norm, sym_eig, DenseMatrix, EigenSystem};
use crate::optimizers::StepObservation;

pub const SPECTRUM_SCHEMA: &str = "spectrum-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub assignment_score: f64,
    pub combined_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema: String,
    pub config_hash: String,
    pub cell: Cell,
    pub outcome: Outcome,
    pub param_count: usize,
    pub eval_examples: usize,
    pub steps: usize,
    pub spectrum: SpectrumReport,
    pub overlap: OverlapReport,
    /// Low-rank Hessian assembled from the exact class gradients and
    /// eigenvalues of the evaluation set.
    pub low_rank_error: LowRankError,
    /// Low-rank Hessian held by the quasi-Newton optimizer at the end of
    /// training, when the probed cell uses it.
    pub optimizer_low_rank_error: Option<LowRankError>,
    /// Step index of the first entry of `overlap.rank_per_batch`.
    pub rank_trace_first_step: usize,
    pub batch_ranks: Vec<BatchRank>,
    pub self_check: Option<SelfCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFile {
    pub schema: String,
    pub config_hash: String,
    pub cell: Cell,
    pub param_count: usize,
    pub eval_examples: usize,
    pub spectrum: SpectrumReport,
}

/// Evenly spaced training examples, at most `max`.
pub fn eval_subset(data: &PreparedData, max: usize) -> Examples {
    let n = data.train.len();
    let m = max.min(n);
    let idx: Vec<usize> = (0..m).map(|i| i * n / m).collect();
    data.train.examples.select(&idx)
}

fn probe_cell(cfg: &ExperimentConfig) -> Cell {
    cfg.cells()[0]
}

fn check_cap(cfg: &ExperimentConfig) -> Result<usize> {
    let n = cfg.model.param_count();
    if n > DEFAULT_DENSE_CAP {
        return Err(Error::DenseCapExceeded { params: n, cap: DEFAULT_DENSE_CAP });
    }
    Ok(n)
}

fn require_completed(run: &CellRun) -> Result<()> {
    match &run.record.outcome {
        Outcome::Completed => Ok(()),
        Outcome::Diverged { step, reason } => Err(Error::Diverged { step: *step, reason: reason.clone() }),
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

/// Trains the first grid cell while keeping per-step batch class
/// gradients, then measures the final curvature on an evaluation subset
/// of the training data.
pub fn probe(cfg: &ExperimentConfig) -> Result<ProbeReport> {
    let param_count = check_cap(cfg)?;
    let data = cfg.prepare_data()?;
    let cell = probe_cell(cfg);
    let limit = cfg.probe.snapshot_limit;
    let mut snapshots: VecDeque<(usize, Vec<Vec<f64>>)> = VecDeque::new();
    let mut observe = |obs: &StepObservation<'_>| {
        if snapshots.len() == limit {
            snapshots.pop_front();
        }
        snapshots.push_back((obs.step, obs.class_gradients.iter().flatten().cloned().collect()));
    };
    let run = train_cell(cfg, &data, cell, Some(&mut observe))?;
    require_completed(&run)?;
    let params = &run.state.params;

    let eval = eval_subset(&data, cfg.probe.max_examples);
    let classes = cfg.model.classes();
    let fwd = forward_batch(&cfg.model, params, &eval)?;
    let lg = batch_logit_gradients(&cfg.model, params, &eval)?;
    let gn = gauss_newton_from_parts(&lg, &fwd.probs)?;
    let eig = sym_eig(&gn)?;
    let mut spectrum = spectrum_from(&eig, classes, cfg.probe.top_n);
    if cfg.probe.fd_spectrum {
        let fd = sym_eig(&fd_hessian(&cfg.model, params, &eval, DEFAULT_FD_STEP, DEFAULT_DENSE_CAP)?)?;
        spectrum.fd_eigenvalues = Some(fd.eigenvalues[..cfg.probe.top_n.min(fd.len())].to_vec());
    }

    let cg = class_gradients(&lg, &eval.labels, classes);
    let present: Vec<Vec<f64>> = cg.iter().flatten().cloned().collect();
    let mut overlap = subspace_overlap(&present, &eig, cfg.probe.rank_tol)?;
    overlap.residual_stats = logit_residuals(&lg, &eval.labels, &cg);

    let lambdas = batch_eigenvalues(&fwd, &squared_norms(&cg));
    let (dirs, eigs): (Vec<Vec<f64>>, Vec<f64>) =
        cg.iter().zip(&lambdas).filter_map(|(c, &l)| c.as_ref().map(|c| (unit(c), l))).unzip();
    let low_rank_error = low_rank_error_against(&gn, &LowRankHessian::new(dirs, eigs, false)?)?;
    let optimizer_low_rank_error = match &run.state.curvature {
        Some(state) => {
            let h = build_low_rank(state, cfg.optimizer.orthonormalize, cfg.optimizer.lambda_floor)?;
            Some(low_rank_error_against(&gn, &h)?)
        }
        None => None,
    };

    let top: Vec<Vec<f64>> = eig.eigenvectors.iter().take(classes).cloned().collect();
    let batch_ranks = snapshots
        .iter()
        .map(|(_, grads)| batch_combined_rank(grads, &top, cfg.probe.rank_tol))
        .collect::<Result<Vec<_>>>()?;
    overlap.rank_per_batch = batch_ranks.iter().map(|b| b.rank).collect();
    if let (Some(first), Some(last)) = (batch_ranks.first(), batch_ranks.last()) {
        log::info!(
            "rank trace: first σ_C={:?} σ_C+1={:?} σ_2C={:?}; last σ_C={:?} σ_C+1={:?} σ_2C={:?}",
            first.sigma_c,
            first.sigma_c_plus_1,
            first.sigma_2c,
            last.sigma_c,
            last.sigma_c_plus_1,
            last.sigma_2c
        );
    }

    let self_check = if cfg.probe.self_check {
        let basis = gram_schmidt(&present, 1e-12)?;
        let fake = EigenSystem { eigenvalues: vec![1.0; basis.len()], eigenvectors: basis.clone() };
        let r = subspace_overlap(&basis, &fake, cfg.probe.rank_tol)?;
        Some(SelfCheck { assignment_score: r.assignment_score, combined_rank: r.combined_rank })
    } else {
        None
    };

    Ok(ProbeReport {
        schema: DIAG_SCHEMA.into(),
        config_hash: cfg.hash(),
        cell,
        outcome: run.record.outcome.clone(),
        param_count,
        eval_examples: eval.len(),
        steps: run.record.steps,
        spectrum,
        overlap,
        low_rank_error,
        optimizer_low_rank_error,
        rank_trace_first_step: snapshots.front().map_or(0, |s| s.0),
        batch_ranks,
        self_check,
    })
}

pub fn spectrum_chart(spectrum: &SpectrumReport) -> LineChart {
    let pts = |vals: &[f64]| -> Vec<(f64, f64)> { vals.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect() };
    let mut chart = LineChart::new("Gauss-Newton eigenvalues", "index", "eigenvalue")
        .log_y(true)
        .with(Series::scatter("Gauss-Newton", pts(&spectrum.eigenvalues)));
    if let Some(fd) = &spectrum.fd_eigenvalues {
        chart = chart.with(Series::scatter("finite-difference", pts(fd)));
    }
    chart
}

pub fn rank_chart(report: &ProbeReport, classes: usize) -> LineChart {
    let first = report.rank_trace_first_step;
    let ranks: Vec<(f64, f64)> =
        report.overlap.rank_per_batch.iter().enumerate().map(|(i, &r)| ((first + i) as f64, r as f64)).collect();
    let span = |v: f64| -> Vec<(f64, f64)> {
        match (ranks.first(), ranks.last()) {
            (Some(a), Some(b)) => vec![(a.0, v), (b.0, v)],
            _ => Vec::new(),
        }
    };
    LineChart::new("rank of [class gradients | top eigenvectors]", "step", "rank")
        .with(Series::line("rank", ranks.clone()))
        .with(Series::line("C", span(classes as f64)))
        .with(Series::line("2C", span(2.0 * classes as f64)))
}

/// Runs [`probe`] and writes `diag.json`, `spectrum.svg` and
/// `rank_per_batch.svg` into `out_dir`.
pub fn write_probe(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ProbeReport> {
    let report = probe(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("diag.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out_dir.join("spectrum.svg"), spectrum_chart(&report.spectrum).render())?;
    fs::write(out_dir.join("rank_per_batch.svg"), rank_chart(&report, cfg.model.classes()).render())?;
    Ok(report)
}

/// Trains the first grid cell and reports the final Gauss-Newton
/// spectrum (plus the finite-difference spectrum when configured).
pub fn spectrum(cfg: &ExperimentConfig) -> Result<SpectrumFile> {
    let param_count = check_cap(cfg)?;
    let data = cfg.prepare_data()?;
    let cell = probe_cell(cfg);
    let run = train_cell(cfg, &data, cell, None)?;
    require_completed(&run)?;
    let eval = eval_subset(&data, cfg.probe.max_examples);
    let params = &run.state.params;
    let fwd = forward_batch(&cfg.model, params, &eval)?;
    let lg = batch_logit_gradients(&cfg.model, params, &eval)?;
    let gn: DenseMatrix = gauss_newton_from_parts(&lg, &fwd.probs)?;
    let mut spectrum = spectrum_from(&sym_eig(&gn)?, cfg.model.classes(), cfg.probe.top_n);
    if cfg.probe.fd_spectrum {
        let fd = sym_eig(&fd_hessian(&cfg.model, params, &eval, DEFAULT_FD_STEP, DEFAULT_DENSE_CAP)?)?;
        spectrum.fd_eigenvalues = Some(fd.eigenvalues[..cfg.probe.top_n.min(fd.len())].to_vec());
    }
    Ok(SpectrumFile {
        schema: SPECTRUM_SCHEMA.into(),
        config_hash: cfg.hash(),
        cell,
        param_count,
        eval_examples: eval.len(),
        spectrum,
    })
}

/// Runs [`spectrum`] and writes `spectrum.json` and `spectrum.svg`.
pub fn write_spectrum(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SpectrumFile> {
    let file = spectrum(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("spectrum.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    fs::write(out_dir.join("spectrum.svg"), spectrum_chart(&file.spectrum).render())?;
    Ok(file)
}
