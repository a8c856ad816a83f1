use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_blobs, load_idx, BlobSpec, Dataset, Examples, DEFAULT_HOLDOUT};
use crate::error::{Error, Result};
use crate::linalg::DEFAULT_RANK_TOL;
use crate::model::ModelSpec;
use crate::optimizers::{Method, MomentumPlacement, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        mean_scale: f64,
        sigma: f64,
        seed: u64,
    },
    /// Paths are resolved against the config file's directory.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` examples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// Optimizer settings shared by every grid cell; method and η come from
/// the grid axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharedOptimizer {
    pub momentum_beta: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub orthonormalize: bool,
    pub lambda_floor: f64,
    pub momentum_applies_to: MomentumPlacement,
    pub max_newton_step: Option<f64>,
}

impl Default for SharedOptimizer {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            momentum_beta: d.momentum_beta,
            gamma: d.gamma,
            weight_decay: d.weight_decay,
            orthonormalize: d.orthonormalize,
            lambda_floor: d.lambda_floor,
            momentum_applies_to: d.momentum_applies_to,
            max_newton_step: d.max_newton_step,
        }
    }
}

impl SharedOptimizer {
    pub fn for_cell(&self, method: Method, eta: f64) -> OptimizerConfig {
        OptimizerConfig {
            method,
            eta,
            momentum_beta: self.momentum_beta,
            gamma: self.gamma,
            weight_decay: self.weight_decay,
            orthonormalize: self.orthonormalize,
            lambda_floor: self.lambda_floor,
            momentum_applies_to: self.momentum_applies_to,
            max_newton_step: self.max_newton_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Training examples (taken in dataset order) used for the final
    /// dense Gauss-Newton eigensystem.
    pub max_examples: usize,
    /// Number of leading eigenvalues reported.
    pub top_n: usize,
    /// Also report the finite-difference Hessian spectrum.
    pub fd_spectrum: bool,
    /// Also report the overlap of the orthonormalized class gradients with
    /// themselves, which must be perfect.
    pub self_check: bool,
    pub rank_tol: f64,
    /// Most recent per-step class-gradient snapshots kept for the rank trace.
    pub snapshot_limit: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_examples: 256,
            top_n: 50,
            fd_spectrum: false,
            self_check: false,
            rank_tol: DEFAULT_RANK_TOL,
            snapshot_limit: 1024,
        }
    }
}

fn default_holdout() -> f64 {
    DEFAULT_HOLDOUT
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Held-out validation fraction; 0 disables validation.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default)]
    pub split_seed: u64,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: SharedOptimizer,
    pub methods: Vec<Method>,
    pub etas: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Relative paths are resolved against the config file's directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_true")]
    pub log_scale: bool,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One `(method, η, batch size, seed)` grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Cell {
    /// File stem used for per-cell artifacts.
    pub fn slug(&self) -> String {
        format!("{}_eta{}_bs{}_seed{}", self.method, self.eta, self.batch_size, self.seed)
    }
}

/// Train set plus optional held-out validation examples.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Option<Examples>,
}

impl ExperimentConfig {
    /// Parses and validates a config document. `origin` names the source
    /// in error messages and anchors relative paths.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let label = origin.display();
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("{label}:{}:{}: {e}", e.line(), e.column()))
        })?;
        cfg.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate().map_err(|(key, msg)| {
            let line = find_key_line(text, key);
            Error::Config(match line {
                Some(l) => format!("{label}:{l}: {key}: {msg}"),
                None => format!("{label}: {key}: {msg}"),
            })
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    /// `path` joined onto the config's directory when relative.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_relative() {
            self.base_dir.join(path)
        } else {
            path.to_path_buf()
        }
    }

    pub fn resolved_out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    /// Semantic checks; the error names the offending key.
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        self.model.validate().map_err(|e| ("model", e.to_string()))?;
        match &self.dataset {
            DatasetConfig::Blobs { classes, per_class, dim, sigma, mean_scale, .. } => {
                if *classes < 2 || *dim < 2 {
                    return Err(("dataset", "blobs need classes >= 2 and dim >= 2".into()));
                }
                if *per_class == 0 {
                    return Err(("per_class", "must be at least 1".into()));
                }
                if !(sigma.is_finite() && *sigma >= 0.0) || !mean_scale.is_finite() {
                    return Err(("dataset", "mean_scale and sigma must be finite, sigma >= 0".into()));
                }
                if self.model.input_dim() != *dim || self.model.classes() != *classes {
                    return Err(("layer_widths", format!("model must map {dim} inputs to {classes} classes")));
                }
            }
            DatasetConfig::Idx { images, labels, .. } => {
                for p in [images, labels] {
                    let p = self.resolve(p);
                    if !p.exists() {
                        return Err(("dataset", format!("file not found: {}", p.display())));
                    }
                }
            }
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(("holdout", format!("must lie in [0, 1), got {}", self.holdout)));
        }
        if self.methods.is_empty() {
            return Err(("methods", "at least one method is required".into()));
        }
        if self.etas.is_empty() {
            return Err(("etas", "at least one learning rate is required".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(("batch_sizes", "need at least one batch size, all >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(("seeds", "at least one seed is required".into()));
        }
        if self.epochs == 0 {
            return Err(("epochs", "must be at least 1".into()));
        }
        for &eta in &self.etas {
            self.optimizer.for_cell(Method::Sgd, eta).validate().map_err(|e| ("etas", e.to_string()))?;
        }
        self.optimizer.for_cell(Method::Sgd, 0.1).validate().map_err(|e| ("optimizer", e.to_string()))?;
        if self.probe.max_examples == 0 || self.probe.snapshot_limit == 0 {
            return Err(("probe", "max_examples and snapshot_limit must be at least 1".into()));
        }
        if !(self.probe.rank_tol > 0.0 && self.probe.rank_tol < 1.0) {
            return Err(("rank_tol", "must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Grid cells in method-major, then η, batch size, seed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &eta in &self.etas {
                for &batch_size in &self.batch_sizes {
                    for &seed in &self.seeds {
                        out.push(Cell { method, eta, batch_size, seed });
                    }
                }
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON form (sorted keys, `out_dir`
    /// excluded), hex encoded.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn prepare_data(&self) -> Result<PreparedData> {
        let full = match &self.dataset {
            DatasetConfig::Blobs { classes, per_class, dim, mean_scale, sigma, seed } => generate_blobs(&BlobSpec {
                classes: *classes,
                per_class: *per_class,
                dim: *dim,
                mean_scale: *mean_scale,
                sigma: *sigma,
                seed: *seed,
            })?,
            DatasetConfig::Idx { images, labels, limit } => {
                let ds = load_idx(&self.resolve(images), &self.resolve(labels))?;
                match limit {
                    Some(n) if *n < ds.len() => {
                        let idx: Vec<usize> = (0..*n).collect();
                        Dataset::new(ds.name.clone(), ds.class_count, ds.examples.select(&idx))?
                    }
                    _ => ds,
                }
            }
        };
        if full.dim() != self.model.input_dim() {
            return Err(Error::Config(format!(
                "model input width {} does not match dataset dimension {}",
                self.model.input_dim(),
                full.dim()
            )));
        }
        if full.class_count > self.model.classes() {
            return Err(Error::Config(format!(
                "model has {} outputs but the dataset has {} classes",
                self.model.classes(),
                full.class_count
            )));
        }
        if self.holdout == 0.0 {
            return Ok(PreparedData { train: full, validation: None });
        }
        let (train, validation) = full.split_holdout(self.holdout, self.split_seed)?;
        Ok(PreparedData { train, validation: Some(validation) })
    }
}

/// 1-based line of the first occurrence of `"key"` in the source.
fn find_key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
  "dataset": {"kind": "blobs", "classes": 3, "per_class": 10, "dim": 4,
              "mean_scale": 3.0, "sigma": 0.5, "seed": 1},
  "model": {"layer_widths": [4, 3], "activation": "relu"},
  "methods": ["sgd", "quasi_newton"],
  "etas": [0.1, 0.01],
  "batch_sizes": [8],
  "seeds": [0],
  "epochs": 2
}"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(text, Path::new("cfg.json"))
    }

    #[test]
    fn defaults_are_filled_in() {
        let c = parse(SAMPLE).unwrap();
        assert_eq!(c.holdout, 0.2);
        assert_eq!(c.optimizer.momentum_beta, 0.9);
        assert_eq!(c.optimizer.gamma, 0.9);
        assert_eq!(c.cells().len(), 4);
        let resolved = c.to_pretty_json();
        assert_eq!(parse(&resolved).unwrap(), c);
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        let bad = SAMPLE.replace("\"epochs\": 2", "\"epochs\": ");
        let msg = parse(&bad).unwrap_err().to_string();
        assert!(msg.starts_with("config: cfg.json:10:"), "{msg}");
        let unknown = SAMPLE.replace("\"epochs\"", "\"epoch\"");
        assert!(parse(&unknown).unwrap_err().to_string().contains("unknown field"));
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let bad = SAMPLE.replace("\"seeds\": [0]", "\"seeds\": []");
        assert_eq!(parse(&bad).unwrap_err().to_string(), "config: cfg.json:8: seeds: at least one seed is required");
        let bad = SAMPLE.replace("[4, 3]", "[5, 3]");
        assert!(parse(&bad).unwrap_err().to_string().contains("cfg.json:4: layer_widths"));
        let bad = SAMPLE.replace("[0.1, 0.01]", "[0.1, -1]");
        assert!(parse(&bad).unwrap_err().to_string().contains(":6: etas"));
    }

    #[test]
    fn hash_ignores_out_dir_and_formatting() {
        let a = parse(SAMPLE).unwrap();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        let reordered = SAMPLE.replace("\"epochs\": 2", "\"epochs\": 2, \"holdout\": 0.2");
        assert_eq!(parse(&reordered).unwrap().hash(), a.hash());
        let mut c = a.clone();
        c.epochs = 3;
        assert_ne!(c.hash(), a.hash());
        let mut d = a.clone();
        d.optimizer.gamma = 0.95;
        assert_ne!(d.hash(), a.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn missing_idx_files_are_rejected() {
        let text = SAMPLE.replace(
            r#"{"kind": "blobs", "classes": 3, "per_class": 10, "dim": 4,
              "mean_scale": 3.0, "sigma": 0.5, "seed": 1}"#,
            r#"{"kind": "idx", "images": "nope-images", "labels": "nope-labels"}"#,
        );
        let msg = parse(&text).unwrap_err().to_string();
        assert!(msg.contains("file not found"), "{msg}");
    }

    #[test]
    fn prepared_data_respects_holdout() {
        let c = parse(SAMPLE).unwrap();
        let d = c.prepare_data().unwrap();
        assert_eq!(d.train.len() + d.validation.as_ref().unwrap().len(), 30);
        let mut c0 = c.clone();
        c0.holdout = 0.0;
        assert!(c0.prepare_data().unwrap().validation.is_none());
    }
}
