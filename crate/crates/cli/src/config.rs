//! Versioned TOML run configuration. Unknown keys are rejected and every
//! section is validated before any computation starts.

use std::path::{Path, PathBuf};

use dcq_core::estimator::{BandwidthMode, FitConfig, OracleBandwidth, TauBarMode};
use dcq_core::experiments::{
    ErrorBase, ErrorDistributionSpec, EstimatorSet, ExperimentConfig, Model, OutlierAction, SplitPolicy,
};
use dcq_core::io::{BatchAssignment, CsvOptions};
use dcq_core::KernelSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<PredictSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSection>,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub j: usize,
    pub d_tau: f64,
    pub kernel: String,
    pub tau_bar: TauBarMode,
    pub bandwidth: BandwidthMode,
    pub oracle_bandwidth: OracleBandwidth,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_oll: Option<f64>,
    pub cv_folds: usize,
    pub cv_candidates: usize,
    pub restandardize_residuals: bool,
    pub beta_subgrid: usize,
    pub d_tau_retries: u32,
    pub n_grid: usize,
    /// Evaluation interval; defaults to the covariate range (fit) or the
    /// model interval (simulate).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<[f64; 2]>,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            j: d.j,
            d_tau: d.d_tau,
            kernel: d.kernel.family().to_string(),
            tau_bar: d.tau_bar_mode,
            bandwidth: d.bandwidth_mode,
            oracle_bandwidth: d.oracle_bandwidth,
            h_oll: d.h_oll,
            cv_folds: d.cv_folds,
            cv_candidates: d.cv_candidates,
            restandardize_residuals: d.restandardize_residuals,
            beta_subgrid: d.beta_subgrid,
            d_tau_retries: d.d_tau_retries,
            n_grid: 200,
            grid: None,
        }
    }
}

impl FitSection {
    pub fn to_fit_config(&self, cv_seed: u64) -> Result<FitConfig, CliError> {
        let kernel = KernelSpec::from_name(&self.kernel).map_err(|e| invalid(format!("fit.kernel: {e}")))?;
        Ok(FitConfig {
            j: self.j,
            d_tau: self.d_tau,
            kernel,
            tau_bar_mode: self.tau_bar,
            bandwidth_mode: self.bandwidth,
            oracle_bandwidth: self.oracle_bandwidth,
            h_oll: self.h_oll,
            cv_folds: self.cv_folds,
            cv_candidates: self.cv_candidates,
            cv_seed,
            restandardize_residuals: self.restandardize_residuals,
            beta_subgrid: self.beta_subgrid,
            d_tau_retries: self.d_tau_retries,
        })
    }

    fn validate(&self) -> Result<(), CliError> {
        KernelSpec::from_name(&self.kernel).map_err(|e| invalid(format!("fit.kernel: {e}")))?;
        if self.j == 0 {
            return Err(invalid("fit.j must be at least 1"));
        }
        if !(self.d_tau > 0.0 && self.d_tau < 1.0 - 2.0 * dcq_core::DELTA_TAU) {
            return Err(invalid(format!(
                "fit.d_tau must lie in (0, {}), got {}",
                1.0 - 2.0 * dcq_core::DELTA_TAU,
                self.d_tau
            )));
        }
        if let Some(h) = self.h_oll {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid(format!("fit.h_oll must be positive, got {h}")));
            }
        }
        if self.cv_folds < 2 || self.cv_candidates < 2 {
            return Err(invalid("fit.cv_folds and fit.cv_candidates must be at least 2"));
        }
        if self.n_grid < 2 {
            return Err(invalid("fit.n_grid must be at least 2"));
        }
        if self.beta_subgrid < 2 {
            return Err(invalid("fit.beta_subgrid must be at least 2"));
        }
        if let Some([lo, hi]) = self.grid {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid(format!(
                    "fit.grid must be an increasing pair, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_true")]
    pub header: bool,
    /// Batches when the file has no `batch_id` column.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub assignment: BatchAssignment,
}

fn default_delimiter() -> String {
    ",".into()
}

fn default_true() -> bool {
    true
}

fn default_m() -> usize {
    1
}

impl DataSection {
    pub fn csv_options(&self) -> Result<CsvOptions, CliError> {
        let d = match self.delimiter.as_bytes() {
            [b] if b.is_ascii() => *b,
            _ if self.delimiter == "\\t" => b'\t',
            _ => {
                return Err(invalid(format!(
                    "delimiter must be one ASCII character, got {:?}",
                    self.delimiter
                )))
            }
        };
        Ok(CsvOptions {
            delimiter: d,
            has_header: self.header,
        })
    }

    fn validate(&self, name: &str) -> Result<(), CliError> {
        self.csv_options()?;
        if self.m == 0 {
            return Err(invalid(format!("{name}.m must be at least 1")));
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        self.path = resolve_path(base, &self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default)]
    pub model: Model,
    pub n: usize,
    pub m: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub error: ErrorBase,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub split: SplitPolicy,
    #[serde(default)]
    pub estimators: EstimatorSet,
}

fn default_replications() -> usize {
    100
}

impl SimulateSection {
    pub fn to_experiment(&self, fit: FitConfig, n_grid: usize, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model,
            n: self.n,
            m_values: self.m.clone(),
            error: ErrorDistributionSpec {
                base: self.error,
                lambda: self.lambda,
            },
            replications: self.replications,
            seed,
            estimators: self.estimators,
            fit,
            n_grid,
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub plan: PathBuf,
    pub local_values: PathBuf,
    /// CSV with an `x` column; without it the stored grid is reproduced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<PathBuf>,
}

/// A scale factor or the literal `"remove"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Treatment {
    Scale(f64),
    Named(TreatmentName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreatmentName {
    Remove,
}

impl Treatment {
    pub fn action(self) -> OutlierAction {
        match self {
            Treatment::Scale(c) => OutlierAction::Scale(c),
            Treatment::Named(TreatmentName::Remove) => OutlierAction::Remove,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Test set, read with the same CSV options as `[data]`.
    pub test: PathBuf,
    /// Tagging threshold; absent means no tagging.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default = "default_treatments")]
    pub c: Vec<Treatment>,
    /// Redo pilot and bandwidth selection on every treated training set.
    #[serde(default)]
    pub retune: bool,
}

fn default_treatments() -> Vec<Treatment> {
    vec![Treatment::Scale(1.0)]
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Fit,
    Predict,
    Evaluate,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message().trim())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(d) = &mut self.data {
            d.resolve(base);
        }
        if let Some(p) = &mut self.predict {
            p.plan = resolve_path(base, &p.plan);
            p.local_values = resolve_path(base, &p.local_values);
            if let Some(x) = &mut p.points {
                *x = resolve_path(base, x);
            }
        }
        if let Some(e) = &mut self.evaluate {
            e.test = resolve_path(base, &e.test);
        }
    }

    /// Checks everything the given mode will use.
    pub fn validate(&self, mode: Mode) -> Result<(), CliError> {
        self.fit.validate()?;
        match mode {
            Mode::Simulate => {
                let s = self
                    .simulate
                    .as_ref()
                    .ok_or_else(|| invalid("missing [simulate] section"))?;
                let exp = s.to_experiment(self.fit.to_fit_config(0)?, self.fit.n_grid, self.seed);
                exp.validate().map_err(|e| invalid(e.to_string()))?;
            }
            Mode::Fit => {
                self.data
                    .as_ref()
                    .ok_or_else(|| invalid("missing [data] section"))?
                    .validate("data")?;
            }
            Mode::Predict => {
                self.predict
                    .as_ref()
                    .ok_or_else(|| invalid("missing [predict] section"))?;
            }
            Mode::Evaluate => {
                self.data
                    .as_ref()
                    .ok_or_else(|| invalid("missing [data] section for the training set"))?
                    .validate("data")?;
                let e = self
                    .evaluate
                    .as_ref()
                    .ok_or_else(|| invalid("missing [evaluate] section"))?;
                if let Some(g) = e.gamma {
                    if !(g > 0.0) {
                        return Err(invalid(format!("evaluate.gamma must be positive, got {g}")));
                    }
                }
                if e.c.is_empty() {
                    return Err(invalid("evaluate.c is empty"));
                }
                if e.c.iter().any(|t| matches!(t, Treatment::Scale(c) if !c.is_finite())) {
                    return Err(invalid("evaluate.c values must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
