use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Cell, ExperimentConfig, PreparedData};
use super::svg::{LineChart, Series};
use crate::autodiff::forward_batch;
use crate::data::Examples;
use crate::error::{Error, Result};
use crate::model::init_params;
use crate::optimizers::{train_epoch, Observer, TrainState};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: [&str; 9] = ["method", "eta", "batch_size", "seed", "epoch", "step", "split", "loss", "accuracy"];

pub const SUMMARY_SCHEMA: &str = "run-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// One `metrics.csv` row. Train rows are per step (minibatch loss and
/// accuracy before the update); validation rows are per epoch, stamped
/// with the number of steps taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub cell: Cell,
    pub epoch: usize,
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl MetricRow {
    pub fn record(&self) -> [String; 9] {
        [
            self.cell.method.to_string(),
            self.cell.eta.to_string(),
            self.cell.batch_size.to_string(),
            self.cell.seed.to_string(),
            self.epoch.to_string(),
            self.step.to_string(),
            self.split.name().to_string(),
            self.loss.to_string(),
            self.accuracy.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Diverged { step: usize, reason: String },
}

/// Final full-set evaluation. Accuracies are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub train_loss: f64,
    pub train_accuracy_pct: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub cell: Cell,
    pub outcome: Outcome,
    pub steps: usize,
    pub epochs_completed: usize,
    #[serde(rename = "final")]
    pub final_summary: Option<FinalSummary>,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct CellRun {
    pub record: CellRecord,
    pub rows: Vec<MetricRow>,
    pub state: TrainState,
}

/// Shuffle seed for one epoch of one seed; independent of method, η and
/// batch size so that paired cells see the same data order.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64 + 1)
}

fn evaluate(cfg: &ExperimentConfig, state: &TrainState, ex: &Examples) -> Result<(f64, f64)> {
    let f = forward_batch(&cfg.model, &state.params, ex)?;
    Ok((f.mean_loss, f.accuracy()))
}

/// Trains one grid cell. Divergence is recorded in the outcome; other
/// errors are returned.
pub fn train_cell(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    cell: Cell,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<CellRun> {
    let start = Instant::now();
    let opt = cfg.optimizer.for_cell(cell.method, cell.eta);
    let mut state = TrainState::new(&cfg.model, init_params(&cfg.model, cell.seed), &opt)?;
    let mut rows = Vec::new();
    let mut outcome = Outcome::Completed;
    for epoch in 0..cfg.epochs {
        let res = train_epoch(
            &cfg.model,
            &data.train,
            &opt,
            &mut state,
            cell.batch_size,
            epoch_seed(cell.seed, epoch),
            observer.as_deref_mut(),
        );
        rows.extend(res.metrics.iter().map(|m| MetricRow {
            cell,
            epoch: m.epoch,
            step: m.step,
            split: Split::Train,
            loss: m.mean_loss,
            accuracy: m.train_accuracy,
        }));
        match res.failure {
            None => {}
            Some(Error::Diverged { step, reason }) => {
                log::warn!("{}: diverged at step {step}: {reason}", cell.slug());
                outcome = Outcome::Diverged { step, reason };
                break;
            }
            Some(e) => return Err(e),
        }
        if let Some(val) = &data.validation {
            match evaluate(cfg, &state, val) {
                Ok((loss, accuracy)) => rows.push(MetricRow {
                    cell,
                    epoch,
                    step: state.step,
                    split: Split::Validation,
                    loss,
                    accuracy,
                }),
                Err(e) => {
                    outcome = Outcome::Diverged { step: state.step, reason: e.to_string() };
                    break;
                }
            }
        }
    }
    let final_summary = match outcome {
        Outcome::Completed => {
            let (train_loss, train_acc) = evaluate(cfg, &state, &data.train.examples)?;
            let val = data.validation.as_ref().map(|v| evaluate(cfg, &state, v)).transpose()?;
            Some(FinalSummary {
                train_loss,
                train_accuracy_pct: 100.0 * train_acc,
                validation_loss: val.map(|v| v.0),
                validation_accuracy_pct: val.map(|v| 100.0 * v.1),
            })
        }
        Outcome::Diverged { .. } => None,
    };
    let record = CellRecord {
        cell,
        outcome,
        steps: state.step,
        epochs_completed: state.epoch,
        final_summary,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(CellRun { record, rows, state })
}

/// Per-cell loss curve: train loss per step and validation loss per epoch.
pub fn loss_chart(cell: &Cell, rows: &[MetricRow], log_y: bool) -> LineChart {
    let pick = |split: Split| -> Vec<(f64, f64)> {
        rows.iter().filter(|r| r.split == split).map(|r| (r.step as f64, r.loss)).collect()
    };
    LineChart::new(format!("{} η={} batch={} seed={}", cell.method, cell.eta, cell.batch_size, cell.seed), "step", "loss")
        .log_y(log_y)
        .with(Series::line("train", pick(Split::Train)))
        .with(Series::line("validation", pick(Split::Validation)))
}

pub fn write_rows<W: std::io::Write>(w: W, rows: &[MetricRow], header: bool) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        out.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        out.write_record(r.record())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub config_hash: String,
    pub cells: Vec<CellRecord>,
}

impl RunSummary {
    pub fn any_diverged(&self) -> bool {
        self.cells.iter().any(|c| matches!(c.outcome, Outcome::Diverged { .. }))
    }

    /// 0 when every cell completed, 2 when any diverged.
    pub fn exit_code(&self) -> i32 {
        if self.any_diverged() {
            2
        } else {
            0
        }
    }
}

fn cell_dir(staging: &Path, index: usize) -> PathBuf {
    staging.join(format!("cell-{index:05}"))
}

/// Runs every grid cell with up to `jobs` workers and writes
/// `metrics.csv`, `summary.json`, `config.json` and `plots/<cell>.svg`
/// under `out_dir`. Each worker writes into its own staging directory;
/// the results are merged into `out_dir` once every cell has finished.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<RunSummary> {
    let data = cfg.prepare_data()?;
    let cells = cfg.cells();
    let hash = cfg.hash();
    fs::create_dir_all(out_dir)?;
    let staging = out_dir.join(format!(".staging-{}-{}", &hash[..12], std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;

    let next = AtomicUsize::new(0);
    let records: Mutex<Vec<Option<Result<CellRecord>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = jobs.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { break };
                let res = run_one(cfg, &data, cell, &cell_dir(&staging, i));
                records.lock().expect("no worker panicked")[i] = Some(res);
            });
        }
    });

    let mut summary = RunSummary { schema: SUMMARY_SCHEMA.into(), config_hash: hash, cells: Vec::new() };
    for r in records.into_inner().expect("no worker panicked") {
        summary.cells.push(r.expect("every cell visited")?);
    }

    // merge
    let mut csv_bytes = Vec::new();
    write_rows(&mut csv_bytes, &[], true)?;
    for i in 0..cells.len() {
        csv_bytes.extend(fs::read(cell_dir(&staging, i).join("rows.csv"))?);
    }
    fs::write(staging.join("metrics.csv"), csv_bytes)?;
    fs::write(staging.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(staging.join("config.json"), cfg.to_pretty_json() + "\n")?;
    let plots = out_dir.join("plots");
    fs::create_dir_all(&plots)?;
    for (i, cell) in cells.iter().enumerate() {
        fs::rename(cell_dir(&staging, i).join("loss.svg"), plots.join(format!("{}.svg", cell.slug())))?;
    }
    for name in ["metrics.csv", "summary.json", "config.json"] {
        fs::rename(staging.join(name), out_dir.join(name))?;
    }
    fs::remove_dir_all(&staging)?;
    Ok(summary)
}

fn run_one(cfg: &ExperimentConfig, data: &PreparedData, cell: Cell, dir: &Path) -> Result<CellRecord> {
    log::info!("cell {} started", cell.slug());
    let run = train_cell(cfg, data, cell, None)?;
    fs::create_dir_all(dir)?;
    write_rows(fs::File::create(dir.join("rows.csv"))?, &run.rows, false)?;
    fs::write(dir.join("loss.svg"), loss_chart(&cell, &run.rows, cfg.log_scale).render())?;
    log::info!("cell {} finished: {:?} after {} steps", cell.slug(), run.record.outcome, run.record.steps);
    Ok(run.record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::Method;

    #[test]
    fn rows_format_with_shortest_float_display() {
        let cell = Cell { method: Method::QuasiNewton, eta: 0.01, batch_size: 32, seed: 7 };
        let row = MetricRow { cell, epoch: 1, step: 12, split: Split::Validation, loss: 0.25, accuracy: 1.0 };
        let mut buf = Vec::new();
        write_rows(&mut buf, &[row], true).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,eta,batch_size,seed,epoch,step,split,loss,accuracy\nquasi_newton,0.01,32,7,1,12,validation,0.25,1\n"
        );
    }

    #[test]
    fn epoch_seeds_differ() {
        assert_ne!(epoch_seed(0, 0), epoch_seed(0, 1));
        assert_ne!(epoch_seed(0, 0), epoch_seed(1, 0));
    }
}
