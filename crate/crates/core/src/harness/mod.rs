//! Config-driven experiment harness: grid runs, comparisons, curvature
//! probes and spectra, with CSV/JSON metrics and SVG plots.

pub mod compare;
pub mod config;
pub mod probe;
pub mod run;
pub mod svg;

pub use compare::{compare_files, compare_texts, Comparison, ComparisonRow, REFERENCE_TABLE};
pub use config::{Cell, DatasetConfig, ExperimentConfig, PreparedData, ProbeConfig, SharedOptimizer};
pub use probe::{probe, spectrum, write_probe, write_spectrum, ProbeReport, SpectrumFile};
pub use run::{run_experiment, train_cell, CellRecord, MetricRow, Outcome, RunSummary, METRICS_HEADER};
