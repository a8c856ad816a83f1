use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::METRICS_HEADER;
use crate::error::{Error, Result};
use crate::optimizers::Method;

/// One row of the ResNet9 / CIFAR-10 reference table: final accuracy (%)
/// and loss per learning rate. Displayed next to comparisons for context;
/// desk-scale runs are not expected to match it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub eta: f64,
    pub sgd_accuracy_pct: f64,
    pub qn_accuracy_pct: f64,
    pub sgd_loss: f64,
    pub qn_loss: f64,
}

pub const REFERENCE_TABLE: [ReferenceRow; 3] = [
    ReferenceRow { eta: 1e-1, sgd_accuracy_pct: 88.0, qn_accuracy_pct: 92.0, sgd_loss: 0.3574, qn_loss: 0.3304 },
    ReferenceRow { eta: 5e-2, sgd_accuracy_pct: 87.0, qn_accuracy_pct: 92.0, sgd_loss: 0.3985, qn_loss: 0.3346 },
    ReferenceRow { eta: 1e-2, sgd_accuracy_pct: 82.0, qn_accuracy_pct: 90.0, sgd_loss: 0.5362, qn_loss: 0.3411 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub batch_size: usize,
    pub eta: f64,
    pub method: Method,
    pub seeds: usize,
    /// `validation` when the runs recorded held-out metrics, else `train`.
    pub split: String,
    pub accuracy_mean_pct: f64,
    pub accuracy_std_pct: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub reference: Vec<ReferenceRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    batch_size: usize,
    eta_bits: u64,
    method_rank: u8,
    seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Final {
    validation: bool,
    loss: f64,
    accuracy: f64,
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, origin: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| {
        let line = rec.position().map_or(0, |p| p.line());
        Error::InvalidArgument(format!("{origin}:{line}: bad {} value {raw:?}", METRICS_HEADER[i]))
    })
}

fn method_rank(m: Method) -> u8 {
    match m {
        Method::Sgd => 0,
        Method::QuasiNewton => 1,
    }
}

/// Reads `metrics.csv` text and keeps the final row of each cell: the last
/// validation row if any, otherwise the last train row.
fn collect_finals(text: &str, origin: &str, into: &mut BTreeMap<CellKey, (Method, f64, Final)>) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::InvalidArgument(format!("{origin}: unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    for rec in reader.records() {
        let rec = rec?;
        let method: Method = parse_field(&rec, 0, origin)?;
        let eta: f64 = parse_field(&rec, 1, origin)?;
        let key = CellKey {
            batch_size: parse_field(&rec, 2, origin)?,
            eta_bits: eta.to_bits(),
            method_rank: method_rank(method),
            seed: parse_field(&rec, 3, origin)?,
        };
        let validation = match rec.get(6) {
            Some("validation") => true,
            Some("train") => false,
            other => {
                return Err(Error::InvalidArgument(format!("{origin}: unknown split {other:?}")));
            }
        };
        let f = Final { validation, loss: parse_field(&rec, 7, origin)?, accuracy: parse_field(&rec, 8, origin)? };
        let slot = into.entry(key).or_insert((method, eta, f));
        if validation || !slot.2.validation {
            slot.2 = f;
        }
    }
    Ok(())
}

/// Aggregates final accuracy and loss per `(batch size, η, method)` over
/// seeds. Every `(batch size, η)` pair must have both methods.
pub fn compare_texts(inputs: &[(String, String)]) -> Result<Comparison> {
    let mut finals = BTreeMap::new();
    for (origin, text) in inputs {
        collect_finals(text, origin, &mut finals)?;
    }
    let mut groups: BTreeMap<(usize, std::cmp::Reverse<u64>, u8), (Method, f64, Vec<Final>)> = BTreeMap::new();
    for (key, (method, eta, f)) in &finals {
        // η > 0, so the bit pattern orders like the value
        groups
            .entry((key.batch_size, std::cmp::Reverse(key.eta_bits), key.method_rank))
            .or_insert((*method, *eta, Vec::new()))
            .2
            .push(*f);
    }
    if groups.is_empty() {
        return Err(Error::IncompleteGrid("no metric rows".into()));
    }
    for &(bs, eta_key, _) in groups.keys() {
        for m in [Method::Sgd, Method::QuasiNewton] {
            if !groups.contains_key(&(bs, eta_key, method_rank(m))) {
                let eta = f64::from_bits(eta_key.0);
                return Err(Error::IncompleteGrid(format!("no {m} runs for batch_size={bs}, eta={eta}")));
            }
        }
    }
    let rows = groups
        .into_iter()
        .map(|((bs, _, _), (method, eta, fs))| {
            let acc: Vec<f64> = fs.iter().map(|f| 100.0 * f.accuracy).collect();
            let loss: Vec<f64> = fs.iter().map(|f| f.loss).collect();
            let (am, asd) = mean_std(&acc);
            let (lm, lsd) = mean_std(&loss);
            ComparisonRow {
                batch_size: bs,
                eta,
                method,
                seeds: fs.len(),
                split: if fs.iter().all(|f| f.validation) { "validation" } else { "train" }.into(),
                accuracy_mean_pct: am,
                accuracy_std_pct: asd,
                loss_mean: lm,
                loss_std: lsd,
            }
        })
        .collect();
    Ok(Comparison { rows, reference: REFERENCE_TABLE.to_vec() })
}

pub fn compare_files(paths: &[impl AsRef<Path>]) -> Result<Comparison> {
    let inputs = paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            Ok((p.display().to_string(), std::fs::read_to_string(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    compare_texts(&inputs)
}

impl Comparison {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>10}  {:>8}  {:<12}  {:>5}  {:<10}  {:>17}  {:>17}",
            "batch_size", "eta", "method", "seeds", "split", "accuracy (%)", "loss"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>10}  {:>8}  {:<12}  {:>5}  {:<10}  {:>17}  {:>17}",
                r.batch_size,
                r.eta,
                r.method.name(),
                r.seeds,
                r.split,
                format!("{:.2} ± {:.2}", r.accuracy_mean_pct, r.accuracy_std_pct),
                format!("{:.4} ± {:.4}", r.loss_mean, r.loss_std),
            );
        }
        let _ = writeln!(out, "\nreference (ResNet9 / CIFAR-10, for context only; not reproduced here)");
        let _ = writeln!(out, "{:>8}  {:>8}  {:>8}  {:>9}  {:>9}", "eta", "SGD acc", "QN acc", "SGD loss", "QN loss");
        for r in &self.reference {
            let _ = writeln!(
                out,
                "{:>8}  {:>8}  {:>8}  {:>9.4}  {:>9.4}",
                r.eta, r.sgd_accuracy_pct, r.qn_accuracy_pct, r.sgd_loss, r.qn_loss
            );
        }
        out
    }
}
